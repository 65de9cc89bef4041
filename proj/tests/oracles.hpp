#pragma once

// Brute-force reference implementations. Plain loops over std::vector<double>,
// no shared code with the library beyond reading parameter values.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "prgcn/model.hpp"

namespace oracle {

using Vec = std::vector<double>;

inline Vec values(const prgcn::Tensor& t) { return Vec(t.data().begin(), t.data().end()); }

inline double gelu(double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); }

// rows x in  ->  rows x out, weight stored [in, out].
inline Vec linear(const Vec& x, std::size_t rows, const prgcn::Linear& l) {
  const std::size_t in = l.in_features(), out = l.out_features();
  const Vec w = values(l.weight);
  const Vec b = l.bias.defined() ? values(l.bias) : Vec(out, 0.0);
  Vec y(rows * out, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t o = 0; o < out; ++o) {
      double s = b[o];
      for (std::size_t i = 0; i < in; ++i) s += x[r * in + i] * w[i * out + o];
      y[r * out + o] = s;
    }
  }
  return y;
}

inline Vec layer_norm(const Vec& x, std::size_t rows, const prgcn::LayerNorm& ln, double eps = 1e-5) {
  const Vec g = values(ln.gamma), b = values(ln.beta);
  const std::size_t D = g.size();
  Vec y(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t d = 0; d < D; ++d) mu += x[r * D + d];
    mu /= static_cast<double>(D);
    double var = 0.0;
    for (std::size_t d = 0; d < D; ++d) var += (x[r * D + d] - mu) * (x[r * D + d] - mu);
    var /= static_cast<double>(D);
    for (std::size_t d = 0; d < D; ++d) y[r * D + d] = (x[r * D + d] - mu) / std::sqrt(var + eps) * g[d] + b[d];
  }
  return y;
}

// h_t = exp(delta_t * A) h_{t-1} + delta_t * B_t * x_t,  y_t = C_t . h_t, per lane and channel.
inline Vec ssm_scan(const Vec& x, const Vec& delta, const Vec& A, const Vec& B, const Vec& C, std::size_t S,
                    std::size_t L, std::size_t D, std::size_t N) {
  Vec y(S * L * D, 0.0);
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t d = 0; d < D; ++d) {
      Vec h(N, 0.0);
      for (std::size_t t = 0; t < L; ++t) {
        const std::size_t row = s * L + t;
        double acc = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
          h[n] = std::exp(delta[row * D + d] * A[d * N + n]) * h[n] + delta[row * D + d] * B[row * N + n] * x[row * D + d];
          acc += C[row * N + n] * h[n];
        }
        y[row * D + d] = acc;
      }
    }
  }
  return y;
}

// Multi-head attention of queries xq [S, Lq, D] over xkv [S, Lk, D].
inline Vec mha(const Vec& xq, const Vec& xkv, std::size_t S, std::size_t Lq, std::size_t Lk,
               const prgcn::MultiHeadAttention& m) {
  const std::size_t D = m.query.in_features(), H = m.heads, dk = D / H;
  const Vec q = linear(xq, S * Lq, m.query);
  const Vec k = linear(xkv, S * Lk, m.key);
  const Vec v = linear(xkv, S * Lk, m.value);
  Vec ctx(S * Lq * D, 0.0);
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < Lq; ++i) {
        Vec score(Lk);
        for (std::size_t j = 0; j < Lk; ++j) {
          double dot = 0.0;
          for (std::size_t c = 0; c < dk; ++c) dot += q[(s * Lq + i) * D + h * dk + c] * k[(s * Lk + j) * D + h * dk + c];
          score[j] = dot / std::sqrt(static_cast<double>(dk));
        }
        const double mx = *std::max_element(score.begin(), score.end());
        double z = 0.0;
        for (double& e : score) z += (e = std::exp(e - mx));
        for (std::size_t j = 0; j < Lk; ++j) {
          for (std::size_t c = 0; c < dk; ++c) {
            ctx[(s * Lq + i) * D + h * dk + c] += score[j] / z * v[(s * Lk + j) * D + h * dk + c];
          }
        }
      }
    }
  }
  return linear(ctx, S * Lq, m.output);
}

// [B, L, J, D] <-> [B, J, L, D]
inline Vec swap_time_joint(const Vec& x, std::size_t B, std::size_t L, std::size_t J, std::size_t D) {
  Vec y(x.size());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t j = 0; j < J; ++j)
        for (std::size_t d = 0; d < D; ++d) y[((b * J + j) * L + t) * D + d] = x[((b * L + t) * J + j) * D + d];
  return y;
}

// Proxy cross-attention: query [B, Lq, J, D] attends over context [B, Lk, J, D]
// per joint, pre-norm on both sides, residual on the query.
inline Vec cross_attention(const Vec& query, const Vec& context, std::size_t B, std::size_t Lq, std::size_t Lk,
                           std::size_t J, const prgcn::CrossAttention& ca) {
  const std::size_t D = ca.attn.query.in_features();
  const Vec qn = swap_time_joint(layer_norm(query, B * Lq * J, ca.norm_query), B, Lq, J, D);
  const Vec cn = swap_time_joint(layer_norm(context, B * Lk * J, ca.norm_context), B, Lk, J, D);
  const Vec upd = mha(qn, cn, B * J, Lq, Lk, ca.attn);
  Vec back(upd.size());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < J; ++j)
      for (std::size_t t = 0; t < Lq; ++t)
        for (std::size_t d = 0; d < D; ++d) back[((b * Lq + t) * J + j) * D + d] = upd[((b * J + j) * Lq + t) * D + d];
  Vec y(query.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = query[i] + back[i];
  return y;
}

// gelu(LN(A X W + b)) per graph; adjacency(g) returns the J x J matrix of graph g.
inline Vec gconv(const Vec& x, std::size_t graphs, std::size_t J, const std::function<double(std::size_t, std::size_t, std::size_t)>& adj,
                 const prgcn::GConvParams& p) {
  const std::size_t D = p.proj.in_features();
  Vec ax(x.size(), 0.0);
  for (std::size_t g = 0; g < graphs; ++g)
    for (std::size_t i = 0; i < J; ++i)
      for (std::size_t j = 0; j < J; ++j) {
        const double a = adj(g, i, j);
        for (std::size_t d = 0; d < D; ++d) ax[(g * J + i) * D + d] += a * x[(g * J + j) * D + d];
      }
  Vec y = layer_norm(linear(ax, graphs * J, p.proj), graphs * J, p.norm);
  for (double& v : y) v = gelu(v);
  return y;
}

// Memory convolution: one fused adjacency per (b, t'), x [B, T', J, D], a [B, T', J, J].
inline Vec memory_gconv(const Vec& x, const Vec& a, std::size_t B, std::size_t Tp, std::size_t J,
                        const prgcn::GConvParams& p) {
  return gconv(x, B * Tp, J, [&](std::size_t g, std::size_t i, std::size_t j) { return a[(g * J + i) * J + j]; }, p);
}

// alpha * G_s(X) + (1 - alpha) * G_t(X) on pooled features [B, T', J, D].
inline Vec dual_path(const Vec& x, std::size_t B, std::size_t Tp, std::size_t J, const Vec& As, const Vec& At,
                     double alpha, const prgcn::GConvParams& gs, const prgcn::GConvParams& gt) {
  const std::size_t D = gs.proj.in_features();
  const Vec spatial = gconv(x, B * Tp, J, [&](std::size_t, std::size_t i, std::size_t j) { return As[i * J + j]; }, gs);
  // Temporal path: graphs are joints, nodes are pooled frames.
  Vec xt(x.size());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < Tp; ++t)
      for (std::size_t j = 0; j < J; ++j)
        for (std::size_t d = 0; d < D; ++d) xt[((b * J + j) * Tp + t) * D + d] = x[((b * Tp + t) * J + j) * D + d];
  const Vec yt = gconv(xt, B * J, Tp, [&](std::size_t, std::size_t i, std::size_t j) { return At[i * Tp + j]; }, gt);
  Vec y(x.size());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < Tp; ++t)
      for (std::size_t j = 0; j < J; ++j)
        for (std::size_t d = 0; d < D; ++d) {
          const std::size_t i = ((b * Tp + t) * J + j) * D + d;
          y[i] = alpha * spatial[i] + (1.0 - alpha) * yt[((b * J + j) * Tp + t) * D + d];
        }
  return y;
}

inline double max_abs_diff(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_abs_diff(const prgcn::Tensor& a, const Vec& b) { return max_abs_diff(values(a), b); }

}  // namespace oracle
