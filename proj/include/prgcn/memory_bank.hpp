#pragma once

// Graph memory bank: K learnable J x J prototype graphs, a retrieval network
// producing mixture weights over them, and an update gate that blends the
// retrieved graph with the state carried from the previous layer.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>

#include "prgcn/graph_conv.hpp"
#include "prgcn/layers.hpp"

namespace prgcn {

struct GraphMemoryBank {
  Tensor prototypes;  // K x J x J
  Linear retrieval_hidden;  // D -> D/2
  Linear retrieval_out;     // D/2 -> K
  Linear gate;              // D -> 1

  std::size_t prototype_count() const { return prototypes.shape()[0]; }
  std::size_t joint_count() const { return prototypes.shape()[1]; }
  std::size_t feature_dim() const { return retrieval_hidden.in_features(); }

  // Retrieval logits phi(f) for pooled descriptors f [..., D].
  Tensor retrieval_logits(const Tensor& f) const { return retrieval_out(gelu(retrieval_hidden(f))); }

  // g = sigmoid(psi(f)), shaped [..., 1, 1] for broadcasting over J x J.
  Tensor gate_value(const Tensor& f) const {
    Shape s = f.shape();
    s.back() = 1;
    s.push_back(1);
    return reshape(sigmoid(gate(f)), s);
  }

  void collect(ParameterList& out, const std::string& name) const {
    append(out, name + ".prototypes", "prototypes", prototypes);
    retrieval_hidden.collect(out, name + ".retrieval.hidden", "retrieval_net");
    retrieval_out.collect(out, name + ".retrieval.out", "retrieval_net");
    gate.collect(out, name + ".gate", "gate_net");
  }
};

inline GraphMemoryBank init_bank(std::uint64_t seed, std::size_t prototypes, std::size_t joints, std::size_t dim) {
  if (prototypes < 1 || joints < 1 || dim < 1) throw std::invalid_argument("init_bank: K, J and D must be >= 1");
  Rng rng = make_rng(seed, 0xba4c);
  GraphMemoryBank bank;
  bank.prototypes = randn({prototypes, joints, joints}, rng, 1.0, true);
  const std::size_t hidden = std::max<std::size_t>(1, dim / 2);
  bank.retrieval_hidden = Linear::init(rng, dim, hidden);
  bank.retrieval_out = Linear::init(rng, hidden, prototypes);
  bank.gate = Linear::init(rng, dim, 1);
  return bank;
}

// Pooled state S carried between layers; absent before the first layer.
using MemoryState = std::optional<Tensor>;

// alpha * G_s(X') + (1 - alpha) * G_t(X'), alpha a scalar in (0, 1).
inline Tensor dual_path_enhance(const Tensor& pooled, const Tensor& spatial_adjacency, const Tensor& temporal_adjacency,
                                const Tensor& alpha, const GConvParams& spatial, const GConvParams& temporal) {
  if (pooled.dim() != 4) throw DimensionError("dual_path_enhance: expected [B,T',J,D], got " + shape_str(pooled.shape()));
  if (alpha.numel() != 1) throw DimensionError("dual_path_enhance: alpha must be a scalar");
  const Tensor a = reshape(alpha, {});
  const Tensor gs = gconv_joints(pooled, spatial_adjacency, spatial);
  const Tensor gt = gconv_time(pooled, temporal_adjacency, temporal);
  return add(mul(a, gs), mul(rsub_scalar(1.0, a), gt));
}

struct Retrieval {
  Tensor descriptor;  // f: [B, T', D]
  Tensor weights;     // w: [B, T', K]
  Tensor pattern;     // M_r: [B, T', J, J]
};

// f = mean over joints, w = softmax(phi(f)), M_r = sum_k w_k M_k.
inline Retrieval retrieve(const GraphMemoryBank& bank, const Tensor& x_enhanced) {
  if (x_enhanced.dim() != 4 || x_enhanced.shape()[3] != bank.feature_dim() || x_enhanced.shape()[2] != bank.joint_count()) {
    throw DimensionError("retrieve: features " + shape_str(x_enhanced.shape()) + " incompatible with bank (J=" +
                         std::to_string(bank.joint_count()) + ", D=" + std::to_string(bank.feature_dim()) + ")");
  }
  const std::size_t B = x_enhanced.shape()[0], Tp = x_enhanced.shape()[1];
  const std::size_t K = bank.prototype_count(), J = bank.joint_count();
  Retrieval r;
  r.descriptor = mean(x_enhanced, 2);
  r.weights = softmax(bank.retrieval_logits(r.descriptor), -1);
  r.pattern = reshape(matmul(r.weights, reshape(bank.prototypes, {K, J * J})), {B, Tp, J, J});
  return r;
}

// S_new = M_r when there is no previous state, else g * M_r + (1 - g) * S_prev.
inline Tensor smooth_with_gate(const Tensor& pattern, const MemoryState& previous, const Tensor& gate) {
  if (!previous) return pattern;
  if (previous->shape() != pattern.shape()) {
    throw DimensionError("smooth: previous state " + shape_str(previous->shape()) + " does not match retrieved pattern " +
                         shape_str(pattern.shape()));
  }
  return add(mul(gate, pattern), mul(rsub_scalar(1.0, gate), *previous));
}

inline Tensor smooth(const GraphMemoryBank& bank, const Tensor& descriptor, const Tensor& pattern,
                     const MemoryState& previous) {
  if (!previous) return pattern;
  return smooth_with_gate(pattern, previous, bank.gate_value(descriptor));
}

}  // namespace prgcn
