#pragma once

// Dual-stream encoder: selective state-space blocks, self-attention blocks,
// and the learned gate that fuses the two streams.
//
// Feature tensors are [B, T, J, D]. "Spatial" blocks mix along J within a
// frame; "temporal" blocks mix along T within a joint.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <variant>
#include <vector>

#include "prgcn/layers.hpp"

namespace prgcn {

enum class Axis { spatial, temporal };
enum class StreamKind { mamba, attention };

inline const char* axis_name(Axis a) { return a == Axis::spatial ? "spatial" : "temporal"; }
inline const char* stream_kind_name(StreamKind k) { return k == StreamKind::mamba ? "mamba" : "attention"; }

// ---------------------------------------------------------------------------
// Attention.

inline constexpr std::size_t kAttentionQueryBlock = 64;

// softmax(Q K^T / sqrt(d)) V over the last two axes; leading axes are batch.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.dim() < 2 || k.dim() != q.dim() || v.dim() != q.dim()) {
    throw DimensionError("attention: rank mismatch " + shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                         shape_str(v.shape()));
  }
  const std::size_t d = q.shape().back();
  if (k.shape().back() != d || k.shape()[k.dim() - 2] != v.shape()[v.dim() - 2]) {
    throw DimensionError("attention: dim mismatch Q " + shape_str(q.shape()) + ", K " + shape_str(k.shape()) + ", V " +
                         shape_str(v.shape()));
  }
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  const Tensor kt = transpose(k);
  const std::size_t rows = q.shape()[q.dim() - 2];
  if (rows <= kAttentionQueryBlock) return matmul(softmax(scale(matmul(q, kt), inv_sqrt_d), -1), v);
  // Query rows in blocks so each score tile stays in cache; softmax is per row,
  // so the result matches the unblocked form.
  const long row_axis = static_cast<long>(q.dim()) - 2;
  std::vector<Tensor> parts;
  for (std::size_t r = 0; r < rows; r += kAttentionQueryBlock) {
    const Tensor qb = slice(q, row_axis, r, std::min(kAttentionQueryBlock, rows - r));
    parts.push_back(matmul(softmax(scale(matmul(qb, kt), inv_sqrt_d), -1), v));
  }
  return concat(parts, row_axis);
}

struct MultiHeadAttention {
  std::size_t heads = 1;
  Linear query, key, value, output;

  static MultiHeadAttention init(Rng& rng, std::size_t dim, std::size_t heads) {
    if (heads == 0 || dim % heads != 0) {
      throw std::invalid_argument("attention: D=" + std::to_string(dim) + " not divisible by H=" + std::to_string(heads));
    }
    return {heads, Linear::init(rng, dim, dim), Linear::init(rng, dim, dim), Linear::init(rng, dim, dim),
            Linear::init(rng, dim, dim)};
  }

  // Queries xq [..., Lq, D] attend to xkv [..., Lk, D] with matching batch axes.
  Tensor operator()(const Tensor& xq, const Tensor& xkv) const {
    const std::size_t D = xq.shape().back();
    const std::size_t dk = D / heads;
    auto split = [&](const Tensor& x) {
      const std::size_t L = x.shape()[x.dim() - 2];
      const std::size_t batch = x.numel() / (L * D);
      return permute(reshape(x, {batch, L, heads, dk}), {0, 2, 1, 3});
    };
    const Tensor ctx = attention(split(query(xq)), split(key(xkv)), split(value(xkv)));
    const Tensor merged = reshape(permute(ctx, {0, 2, 1, 3}), xq.shape());
    return output(merged);
  }

  void collect(ParameterList& out, const std::string& name, const std::string& group) const {
    query.collect(out, name + ".query", group);
    key.collect(out, name + ".key", group);
    value.collect(out, name + ".value", group);
    output.collect(out, name + ".output", group);
  }
};

// [B, T, J, D] <-> [B, J, T, D]
inline Tensor swap_time_joint(const Tensor& x) { return permute(x, {0, 2, 1, 3}); }

// Pre-norm self-attention plus a 2x feed-forward, both residual.
struct AttnBlock {
  Axis axis = Axis::temporal;
  LayerNorm norm_attn, norm_ffn;
  MultiHeadAttention attn;
  FeedForward ffn;

  static AttnBlock init(Rng& rng, Axis axis, std::size_t dim, std::size_t heads) {
    AttnBlock b;
    b.axis = axis;
    b.norm_attn = LayerNorm::init(dim);
    b.norm_ffn = LayerNorm::init(dim);
    b.attn = MultiHeadAttention::init(rng, dim, heads);
    b.ffn = FeedForward::init(rng, dim, 2 * dim);
    return b;
  }

  Tensor operator()(const Tensor& x) const {
    const Tensor seq = axis == Axis::temporal ? swap_time_joint(x) : x;
    const Tensor h = norm_attn(seq);
    Tensor y = add(seq, attn(h, h));
    y = add(y, ffn(norm_ffn(y)));
    return axis == Axis::temporal ? swap_time_joint(y) : y;
  }

  void collect(ParameterList& out, const std::string& name) const {
    norm_attn.collect(out, name + ".norm_attn");
    norm_ffn.collect(out, name + ".norm_ffn");
    attn.collect(out, name + ".attn", "attention");
    ffn.collect(out, name + ".ffn", "attention");
  }
};

// ---------------------------------------------------------------------------
// Selective state space.

inline constexpr std::size_t kDefaultStateDim = 16;

// Pre-norm selective SSM with input-dependent step, input and readout
// projections, a diagonal negative-real transition, a skip term and an
// output projection, wrapped in a residual.
struct SsmBlock {
  Axis axis = Axis::temporal;
  LayerNorm norm;
  Linear step;      // D -> D, softplus gives delta > 0
  Linear input_proj;   // D -> N (B path), no bias
  Linear readout_proj; // D -> N (C path), no bias
  Tensor a_log;     // D x N, A = -exp(a_log)
  Tensor skip;      // D
  Linear output;    // D -> D
  std::vector<std::size_t> joint_order;  // scan order for spatial blocks

  static SsmBlock init(Rng& rng, Axis axis, std::size_t dim, std::size_t state_dim,
                       std::vector<std::size_t> joint_order = {}) {
    SsmBlock b;
    b.axis = axis;
    b.norm = LayerNorm::init(dim);
    b.step = Linear::init(rng, dim, dim);
    // Initial step sizes log-uniform in [1e-3, 1e-1] through the softplus bias.
    std::uniform_real_distribution<double> u(std::log(1e-3), std::log(1e-1));
    for (double& w : b.step.weight.mutable_data()) w *= 0.1;
    for (double& bias : b.step.bias.mutable_data()) {
      const double dt = std::exp(u(rng));
      bias = dt + std::log(-std::expm1(-dt));
    }
    b.input_proj = Linear::init(rng, dim, state_dim, false);
    b.readout_proj = Linear::init(rng, dim, state_dim, false);
    std::vector<double> alog(dim * state_dim);
    for (std::size_t d = 0; d < dim; ++d) {
      for (std::size_t n = 0; n < state_dim; ++n) alog[d * state_dim + n] = std::log(static_cast<double>(n + 1));
    }
    b.a_log = Tensor({dim, state_dim}, std::move(alog), true);
    b.skip = Tensor::full({dim}, 1.0, true);
    b.output = Linear::init(rng, dim, dim);
    b.joint_order = std::move(joint_order);
    return b;
  }

  std::size_t state_dim() const { return a_log.shape()[1]; }

  Tensor transition() const { return scale(exp(a_log), -1.0); }

  // Scan over lanes [S, L, D]; returns the residual output of the same shape.
  Tensor scan_lanes(const Tensor& lanes) const {
    const Tensor u = norm(lanes);
    const Tensor delta = softplus(step(u));
    const Tensor y = add(ssm_scan(u, delta, transition(), input_proj(u), readout_proj(u)), mul(u, skip));
    return add(lanes, output(y));
  }

  Tensor operator()(const Tensor& x) const {
    if (x.dim() != 4) throw DimensionError("ssm block: expected [B,T,J,D], got " + shape_str(x.shape()));
    const std::size_t B = x.shape()[0], T = x.shape()[1], J = x.shape()[2], D = x.shape()[3];
    if (axis == Axis::temporal) {
      const Tensor lanes = reshape(swap_time_joint(x), {B * J, T, D});
      return swap_time_joint(reshape(scan_lanes(lanes), {B, J, T, D}));
    }
    const bool reorder = !joint_order.empty() && !is_identity(joint_order);
    const Tensor ordered = reorder ? index_select(x, 2, joint_order) : x;
    const Tensor y = reshape(scan_lanes(reshape(ordered, {B * T, J, D})), {B, T, J, D});
    return reorder ? index_select(y, 2, inverse(joint_order)) : y;
  }

  void collect(ParameterList& out, const std::string& name) const {
    norm.collect(out, name + ".norm");
    step.collect(out, name + ".step", "ssm");
    input_proj.collect(out, name + ".input_proj", "ssm");
    readout_proj.collect(out, name + ".readout_proj", "ssm");
    append(out, name + ".a_log", "ssm", a_log);
    append(out, name + ".skip", "ssm", skip);
    output.collect(out, name + ".output", "ssm");
  }

  static bool is_identity(const std::vector<std::size_t>& p) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (p[i] != i) return false;
    }
    return true;
  }
  static std::vector<std::size_t> inverse(const std::vector<std::size_t>& p) {
    std::vector<std::size_t> inv(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) inv[p[i]] = i;
    return inv;
  }
};

// ---------------------------------------------------------------------------
// Streams.

using Block = std::variant<SsmBlock, AttnBlock>;

inline Tensor apply_block(const Block& b, const Tensor& x) {
  return std::visit([&](const auto& blk) { return blk(x); }, b);
}

// Two blocks applied in sequence: spatial-first (S then T) or temporal-first.
struct Stream {
  StreamKind kind = StreamKind::attention;
  bool spatial_first = true;
  Block first;
  Block second;

  static Stream init(Rng& rng, StreamKind kind, bool spatial_first, std::size_t dim, std::size_t heads,
                     std::size_t state_dim, const std::vector<std::size_t>& joint_order) {
    auto make = [&](Axis axis) -> Block {
      if (kind == StreamKind::mamba) return SsmBlock::init(rng, axis, dim, state_dim, joint_order);
      return AttnBlock::init(rng, axis, dim, heads);
    };
    Stream s;
    s.kind = kind;
    s.spatial_first = spatial_first;
    s.first = make(spatial_first ? Axis::spatial : Axis::temporal);
    s.second = make(spatial_first ? Axis::temporal : Axis::spatial);
    return s;
  }

  Tensor operator()(const Tensor& x) const { return apply_block(second, apply_block(first, x)); }

  void collect(ParameterList& out, const std::string& name) const {
    auto visit = [&](const Block& b, const std::string& n) { std::visit([&](const auto& blk) { blk.collect(out, n); }, b); };
    visit(first, name + ".first");
    visit(second, name + ".second");
  }
};

// X^m = M_t(M_s(X)): spatial-first selective SSM stream.
inline Stream make_mamba_stream(Rng& rng, std::size_t dim, std::size_t state_dim,
                                const std::vector<std::size_t>& joint_order) {
  return Stream::init(rng, StreamKind::mamba, true, dim, 1, state_dim, joint_order);
}

// X^a = T_s(T_t(X)): temporal-first attention stream.
inline Stream make_attn_stream(Rng& rng, std::size_t dim, std::size_t heads) {
  return Stream::init(rng, StreamKind::attention, false, dim, heads, kDefaultStateDim, {});
}

// alpha = softmax([X1; X2] W_gate) per position; X = alpha_0 X1 + alpha_1 X2.
struct StreamGate {
  Tensor weight;  // 2D x 2

  static StreamGate init(Rng& rng, std::size_t dim) {
    const double bound = 1.0 / std::sqrt(2.0 * static_cast<double>(dim));
    return {rand_uniform({2 * dim, 2}, rng, -bound, bound, true)};
  }

  Tensor weights(const Tensor& x1, const Tensor& x2) const { return softmax(matmul(concat({x1, x2}, -1), weight), -1); }

  void collect(ParameterList& out, const std::string& name) const { append(out, name + ".weight", "stream_gate", weight); }
};

inline Tensor fuse_with_weights(const Tensor& x1, const Tensor& x2, const Tensor& alpha) {
  const Tensor a0 = slice(alpha, -1, 0, 1);
  const Tensor a1 = slice(alpha, -1, 1, 1);
  return add(mul(a0, x1), mul(a1, x2));
}

inline Tensor fuse_streams(const Tensor& x1, const Tensor& x2, const StreamGate& gate) {
  if (x1.shape() != x2.shape()) {
    throw DimensionError("fuse_streams: shapes " + shape_str(x1.shape()) + " and " + shape_str(x2.shape()) + " differ");
  }
  if (gate.weight.shape() != Shape{2 * x1.shape().back(), 2}) {
    throw DimensionError("fuse_streams: gate " + shape_str(gate.weight.shape()) + " incompatible with D=" +
                         std::to_string(x1.shape().back()));
  }
  return fuse_with_weights(x1, x2, gate.weights(x1, x2));
}

}  // namespace prgcn
