#pragma once

// AdamW with decoupled weight decay and the exponential epoch schedule.

#include <cmath>
#include <string>
#include <vector>

#include "prgcn/layers.hpp"

namespace prgcn {

struct AdamWOptions {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

inline double lr_schedule(std::size_t epoch, double base_lr, double decay = 0.99) {
  return base_lr * std::pow(decay, static_cast<double>(epoch));
}

class AdamW {
 public:
  AdamW(const ParameterList& params, AdamWOptions opts) : params_(params), opts_(opts) {
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor.numel(), 0.0);
      v_.emplace_back(p.tensor.numel(), 0.0);
    }
  }

  const AdamWOptions& options() const { return opts_; }
  void set_lr(double lr) { opts_.lr = lr; }
  std::size_t step_count() const { return step_; }
  const std::vector<double>& first_moment(std::size_t i) const { return m_.at(i); }
  const std::vector<double>& second_moment(std::size_t i) const { return v_.at(i); }

  // Parameters without a gradient buffer are skipped (no decay either).
  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const Tensor& t = params_[i].tensor;
      if (!t.has_grad()) continue;
      for (double g : t.grad()) {
        if (!std::isfinite(g)) throw NumericalError("optimizer: non-finite gradient in parameter " + params_[i].name);
      }
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(step_));
    const double decay = 1.0 - opts_.lr * opts_.weight_decay;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor t = params_[i].tensor;
      if (!t.has_grad()) continue;
      auto w = t.mutable_data();
      auto g = t.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < w.size(); ++k) {
        w[k] *= decay;
        m[k] = opts_.beta1 * m[k] + (1.0 - opts_.beta1) * g[k];
        v[k] = opts_.beta2 * v[k] + (1.0 - opts_.beta2) * g[k] * g[k];
        const double denom = std::sqrt(v[k] / bc2) + opts_.eps;
        w[k] -= opts_.lr * (m[k] / bc1) / denom;
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) {
      Tensor t = p.tensor;
      t.zero_grad();
    }
  }

 private:
  ParameterList params_;
  AdamWOptions opts_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t step_ = 0;
};

}  // namespace prgcn
