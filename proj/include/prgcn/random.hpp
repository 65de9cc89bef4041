#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "prgcn/tensor.hpp"

namespace prgcn {

using Rng = std::mt19937_64;

// Independent stream derived from a base seed and a stream index.
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32), 0x5eedu};
  return Rng(seq);
}

inline Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

inline Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = false) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

}  // namespace prgcn
