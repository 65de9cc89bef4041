#pragma once

// Analytic multiply-accumulate counts for one forward pass of a single clip
// (batch 1). Elementwise work (norms, activations, residual adds) is ignored;
// every term is a contraction.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "prgcn/model.hpp"

namespace prgcn {

struct MacTerm {
  std::string name;
  double macs = 0.0;
};

struct MacReport {
  std::vector<MacTerm> terms;
  double total = 0.0;
  double per_frame = 0.0;

  double term(const std::string& name) const {
    double s = 0.0;
    for (const auto& t : terms) {
      if (t.name == name) s += t.macs;
    }
    return s;
  }
};

// QK^T plus AV for one axis: lanes independent sequences of length L.
inline double attention_mixing_macs(double lanes, double length, double dim) { return 2.0 * lanes * length * length * dim; }

// Discretized recurrence: h update (abar*h + bbar*x) and readout C h.
inline double ssm_scan_macs(double lanes, double length, double dim, double state) {
  return 3.0 * lanes * length * dim * state;
}

inline MacReport count_macs(const ModelConfig& c) {
  c.validate();
  const double T = static_cast<double>(c.frames), J = static_cast<double>(c.joints), D = static_cast<double>(c.dim);
  const double Tp = static_cast<double>(c.pooled_frames()), K = static_cast<double>(c.prototypes);
  const double N = static_cast<double>(c.state_dim);
  const double tokens = T * J, ptokens = Tp * J;
  MacReport r;
  auto add = [&](std::string name, double v) { r.terms.push_back({std::move(name), v}); };

  auto block = [&](StreamKind kind, Axis axis) {
    const double lanes = axis == Axis::temporal ? J : T;
    const double length = axis == Axis::temporal ? T : J;
    const std::string tag = std::string(axis_name(axis)) + "_";
    if (kind == StreamKind::attention) {
      add(tag + "attention_projections", 4.0 * tokens * D * D);
      add(tag + "attention_mixing", attention_mixing_macs(lanes, length, D));
      add(tag + "attention_ffn", 4.0 * tokens * D * D);
    } else {
      add(tag + "ssm_projections", 2.0 * tokens * D * D + 2.0 * tokens * D * N);
      add(tag + "ssm_scan", ssm_scan_macs(lanes, length, D, N));
    }
  };

  add("embed", tokens * 2.0 * D);
  for (std::size_t l = 0; l < c.layers; ++l) {
    if (c.toggles.dual_stream) {
      block(c.streams.first, Axis::spatial);
      block(c.streams.first, Axis::temporal);
      if (c.toggles.enhanced) add("stream_gate", tokens * 2.0 * D * 2.0);
    }
    block(c.streams.second, Axis::temporal);
    block(c.streams.second, Axis::spatial);
    if (c.toggles.proxy) {
      add("proxy_projections", 2.0 * (ptokens * D * D * 2.0 + tokens * D * D * 2.0));
      add("proxy_mixing", 2.0 * 2.0 * J * Tp * T * D);
    }
    if (c.toggles.pattern_reuse) {
      if (c.toggles.enhanced) {
        add("enhance_spatial", Tp * J * J * D + ptokens * D * D);
        add("enhance_temporal", J * Tp * Tp * D + ptokens * D * D);
      }
      const double hidden = std::max(1.0, std::floor(D / 2.0));
      add("retrieval", Tp * (D * hidden + hidden * K) + Tp * K * J * J);
      if (l > 0) add("update_gate", Tp * D + Tp * J * J);
      add("memory_gconv", Tp * J * J * D + ptokens * D * D + Tp * J * J);
    }
  }
  add("head", tokens * D * D + tokens * D * 3.0);

  for (const auto& t : r.terms) r.total += t.macs;
  r.per_frame = r.total / T;
  return r;
}

}  // namespace prgcn
