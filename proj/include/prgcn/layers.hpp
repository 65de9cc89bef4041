#pragma once

// Parameter containers shared by every block.

#include <cmath>
#include <string>
#include <vector>

#include "prgcn/ops.hpp"
#include "prgcn/random.hpp"

namespace prgcn {

struct NamedParameter {
  std::string name;
  std::string group;
  Tensor tensor;
};

using ParameterList = std::vector<NamedParameter>;

inline void append(ParameterList& out, const std::string& name, const std::string& group, const Tensor& t) {
  out.push_back({name, group, t});
}

// Affine map x W + b with W stored as [in, out].
struct Linear {
  Tensor weight;
  Tensor bias;  // undefined when the map has no bias

  static Linear init(Rng& rng, std::size_t in, std::size_t out, bool with_bias = true) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Linear l;
    l.weight = rand_uniform({in, out}, rng, -bound, bound, true);
    if (with_bias) l.bias = Tensor::zeros({out}, true);
    return l;
  }

  std::size_t in_features() const { return weight.shape()[0]; }
  std::size_t out_features() const { return weight.shape()[1]; }

  Tensor operator()(const Tensor& x) const { return bias.defined() ? linear(x, weight, bias) : matmul(x, weight); }

  void collect(ParameterList& out, const std::string& name, const std::string& group) const {
    append(out, name + ".weight", group, weight);
    if (bias.defined()) append(out, name + ".bias", group, bias);
  }
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  static LayerNorm init(std::size_t dim) { return {Tensor::full({dim}, 1.0, true), Tensor::zeros({dim}, true)}; }

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }

  void collect(ParameterList& out, const std::string& name, const std::string& group = "layer_norm") const {
    append(out, name + ".gamma", group, gamma);
    append(out, name + ".beta", group, beta);
  }
};

// Position-wise D -> hidden -> D with GELU.
struct FeedForward {
  Linear up;
  Linear down;

  static FeedForward init(Rng& rng, std::size_t dim, std::size_t hidden) {
    return {Linear::init(rng, dim, hidden), Linear::init(rng, hidden, dim)};
  }

  Tensor operator()(const Tensor& x) const { return down(gelu(up(x))); }

  void collect(ParameterList& out, const std::string& name, const std::string& group) const {
    up.collect(out, name + ".up", group);
    down.collect(out, name + ".down", group);
  }
};

inline void zero_fill(Tensor& t) {
  for (double& v : t.mutable_data()) v = 0.0;
}

}  // namespace prgcn
