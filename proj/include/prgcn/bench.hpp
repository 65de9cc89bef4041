#pragma once

// Wall-time and MAC measurements of one temporal block over a [1, T, J, D]
// clip, used to check how sequence-mixing cost grows with T.

#include <chrono>
#include <functional>
#include <stdexcept>
#include <string>

#include "prgcn/macs.hpp"
#include "prgcn/streams.hpp"
#include "prgcn/train.hpp"

namespace prgcn {

struct BenchRow {
  std::string block;  // "attn" or "ssm"
  std::size_t frames = 0;
  double macs = 0.0;         // whole block
  double mixing_macs = 0.0;  // sequence-mixing core only
  double wall_seconds = 0.0;
  double mixing_wall_seconds = 0.0;
};

struct BenchOptions {
  std::size_t dim = 32;
  std::size_t heads = 4;
  std::size_t joints = 17;
  std::size_t state_dim = kDefaultStateDim;
  std::size_t repeats = 3;
};

// Best of `repeats` timed calls after one warm-up.
inline double best_wall_time(const std::function<Tensor()>& run, std::size_t repeats) {
  run();
  double best = 1e300;
  for (std::size_t r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    const Tensor y = run();
    best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    if (!std::isfinite(y.data()[0])) throw NumericalError("bench: non-finite block output");
  }
  return best;
}

// The mixing columns isolate QK^T/softmax/AV or the recurrence from the
// per-token projections, whose cost is linear in T for both blocks.
inline BenchRow bench_temporal_block(const std::string& block, std::size_t T, const BenchOptions& o) {
  if (block != "attn" && block != "ssm") throw std::invalid_argument("bench: unknown block '" + block + "' (expected attn|ssm)");
  if (o.dim % o.heads != 0) throw std::invalid_argument("bench: dim must be divisible by heads");
  keep_heap_resident();  // otherwise large score buffers are page-faulted in on every call
  Rng rng = make_rng(0, T);
  const Tensor x = randn({1, T, o.joints, o.dim}, rng);
  const double J = static_cast<double>(o.joints), Td = static_cast<double>(T), D = static_cast<double>(o.dim);
  const double tokens = Td * J;
  BenchRow row;
  row.block = block;
  row.frames = T;
  std::function<Tensor()> run, core;
  if (block == "attn") {
    const AttnBlock b = AttnBlock::init(rng, Axis::temporal, o.dim, o.heads);
    row.mixing_macs = attention_mixing_macs(J, Td, D);
    row.macs = 8.0 * tokens * D * D + row.mixing_macs;
    run = [b, x] { return b(x); };
    // Lane by lane, so each score matrix stays cache-resident and the timing
    // reflects arithmetic rather than memory traffic.
    std::vector<Tensor> qkv;
    for (std::size_t i = 0; i < 3 * o.joints * o.heads; ++i) qkv.push_back(randn({1, T, o.dim / o.heads}, rng));
    core = [qkv] {
      Tensor last;
      for (std::size_t i = 0; i < qkv.size(); i += 3) last = attention(qkv[i], qkv[i + 1], qkv[i + 2]);
      return last;
    };
  } else {
    const SsmBlock b = SsmBlock::init(rng, Axis::temporal, o.dim, o.state_dim);
    const double N = static_cast<double>(o.state_dim);
    row.mixing_macs = ssm_scan_macs(J, Td, D, N);
    row.macs = 2.0 * tokens * D * D + 2.0 * tokens * D * N + row.mixing_macs;
    run = [b, x] { return b(x); };
    const Tensor u = randn({o.joints, T, o.dim}, rng);
    const Tensor delta = rand_uniform({o.joints, T, o.dim}, rng, 1e-3, 1e-1);
    const Tensor Bm = randn({o.joints, T, o.state_dim}, rng), Cm = randn({o.joints, T, o.state_dim}, rng);
    const Tensor A = b.transition();
    core = [u, delta, A, Bm, Cm] { return ssm_scan(u, delta, A, Bm, Cm); };
  }
  row.wall_seconds = best_wall_time(run, o.repeats);
  row.mixing_wall_seconds = best_wall_time(core, o.repeats);
  return row;
}

}  // namespace prgcn
