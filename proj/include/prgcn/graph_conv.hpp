#pragma once

// Adjacency construction and graph convolutions over skeleton / time graphs.

#include <cmath>
#include <string>
#include <vector>

#include "prgcn/layers.hpp"
#include "prgcn/skeleton.hpp"

namespace prgcn {

struct AdjacencySet {
  Tensor raw;       // J x J binary bone adjacency, zero diagonal
  Tensor spatial;   // J x J, D^-1/2 (A + I) D^-1/2
  Tensor temporal;  // T' x T', same normalization of the frame chain
};

// Symmetric normalization of a 0/1 adjacency after adding self loops.
inline Tensor normalize_adjacency(const std::vector<double>& raw, std::size_t n) {
  std::vector<double> a(raw);
  for (std::size_t i = 0; i < n; ++i) a[i * n + i] += 1.0;
  std::vector<double> inv_sqrt_deg(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double deg = 0.0;
    for (std::size_t j = 0; j < n; ++j) deg += a[i * n + j];
    inv_sqrt_deg[i] = 1.0 / std::sqrt(deg);
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) a[i * n + j] *= inv_sqrt_deg[i] * inv_sqrt_deg[j];
  }
  return Tensor({n, n}, std::move(a));
}

inline std::vector<double> chain_adjacency(std::size_t n) {
  std::vector<double> a(n * n, 0.0);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    a[i * n + i + 1] = 1.0;
    a[(i + 1) * n + i] = 1.0;
  }
  return a;
}

inline AdjacencySet build_adjacency(const Skeleton& skeleton, std::size_t pooled_frames) {
  skeleton.validate();
  if (pooled_frames == 0) throw DimensionError("build_adjacency: pooled length must be >= 1");
  const std::size_t J = skeleton.joint_count;
  const auto raw = skeleton.raw_adjacency();
  return {Tensor({J, J}, raw), normalize_adjacency(raw, J),
          normalize_adjacency(chain_adjacency(pooled_frames), pooled_frames)};
}

// A' = lambda * A + (1 - lambda) * S_new, with A broadcast over batch and time.
inline Tensor fuse_adjacency(const Tensor& adjacency, const Tensor& s_new, const Tensor& lambda) {
  if (adjacency.dim() != 2 || s_new.dim() < 2 ||
      s_new.shape()[s_new.dim() - 1] != adjacency.shape()[1] || s_new.shape()[s_new.dim() - 2] != adjacency.shape()[0]) {
    throw DimensionError("fuse_adjacency: A " + shape_str(adjacency.shape()) + " incompatible with S_new " +
                         shape_str(s_new.shape()));
  }
  if (lambda.numel() != 1) throw DimensionError("fuse_adjacency: lambda must be a scalar");
  const Tensor lam = reshape(lambda, {});
  return add(mul(lam, adjacency), mul(rsub_scalar(1.0, lam), s_new));
}

// Weights of one graph convolution: act(LayerNorm(A X W + b)).
struct GConvParams {
  Linear proj;
  LayerNorm norm;

  static GConvParams init(Rng& rng, std::size_t dim) { return {Linear::init(rng, dim, dim), LayerNorm::init(dim)}; }

  void collect(ParameterList& out, const std::string& name, const std::string& group) const {
    proj.collect(out, name + ".proj", group);
    norm.collect(out, name + ".norm", group);
  }
};

// Contracts over the joint axis: x [..., J, D], adjacency [J, J] or [..., J, J].
inline Tensor gconv_joints(const Tensor& x, const Tensor& adjacency, const GConvParams& p) {
  if (x.dim() < 2 || adjacency.dim() < 2 || adjacency.shape().back() != x.shape()[x.dim() - 2]) {
    throw DimensionError("gconv: adjacency " + shape_str(adjacency.shape()) + " incompatible with features " +
                         shape_str(x.shape()));
  }
  return gelu(p.norm(p.proj(matmul(adjacency, x))));
}

// Contracts over the (pooled) time axis of x [B, T', J, D] with adjacency [T', T'].
inline Tensor gconv_time(const Tensor& x, const Tensor& adjacency, const GConvParams& p) {
  if (x.dim() != 4 || adjacency.shape() != Shape{x.shape()[1], x.shape()[1]}) {
    throw DimensionError("gconv_time: adjacency " + shape_str(adjacency.shape()) + " incompatible with features " +
                         shape_str(x.shape()));
  }
  const Tensor by_joint = permute(x, {0, 2, 1, 3});
  const Tensor mixed = permute(matmul(adjacency, by_joint), {0, 2, 1, 3});
  return gelu(p.norm(p.proj(mixed)));
}

// Memory-driven convolution: per (b, t'), GELU(LayerNorm(A' X W + b)).
inline Tensor memory_gconv(const Tensor& x_enhanced, const Tensor& fused_adjacency, const GConvParams& p) {
  if (x_enhanced.dim() != 4 || fused_adjacency.dim() != 4 ||
      fused_adjacency.shape()[0] != x_enhanced.shape()[0] || fused_adjacency.shape()[1] != x_enhanced.shape()[1] ||
      fused_adjacency.shape()[2] != x_enhanced.shape()[2] || fused_adjacency.shape()[3] != x_enhanced.shape()[2]) {
    throw DimensionError("memory_gconv: A' " + shape_str(fused_adjacency.shape()) + " incompatible with X " +
                         shape_str(x_enhanced.shape()));
  }
  return gconv_joints(x_enhanced, fused_adjacency, p);
}

}  // namespace prgcn
