#pragma once

// Dataset assembly, the training loop, batched inference, and the
// finite-difference gradient checker.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "prgcn/config.hpp"
#include "prgcn/metrics.hpp"
#include "prgcn/model.hpp"
#include "prgcn/optim.hpp"
#include "prgcn/skeleton.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace prgcn {

// Each training step frees and reallocates the same large tape buffers. By
// default glibc hands those back to the kernel via mmap/trim and pays page
// faults on every step; keeping them on the heap roughly halves step time.
inline void keep_heap_resident() {
#if defined(__GLIBC__)
  static const bool once = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)once;
#endif
}

struct Dataset {
  std::vector<PoseSequence> train;
  std::vector<PoseSequence> eval;
};

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) { return make_rng(seed, index)(); }

inline constexpr std::uint64_t kEvalSeedOffset = 1'000'000;

// Motion kinds cycle walk, sit, reach, idle so every split sees all four.
inline std::vector<PoseSequence> synthesize_split(std::uint64_t seed, std::uint64_t first_index, std::size_t count,
                                                  std::size_t frames, std::size_t joints, double pixel_noise) {
  const Skeleton sk = build_skeleton(joints);
  const BoneConstraints bones = default_bone_lengths(sk);
  GeneratorOptions opts;
  opts.pixel_noise = pixel_noise;
  constexpr MotionKind kinds[] = {MotionKind::walk, MotionKind::sit, MotionKind::reach, MotionKind::idle};
  std::vector<PoseSequence> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(
        generate_synthetic_sequence(derive_seed(seed, first_index + i), sk, bones, frames, kinds[i % 4], opts));
  }
  return out;
}

inline Dataset make_synthetic_dataset(std::uint64_t seed, std::size_t train_count, std::size_t eval_count,
                                      std::size_t frames, std::size_t joints, double pixel_noise = 0.01) {
  return {synthesize_split(seed, 0, train_count, frames, joints, pixel_noise),
          synthesize_split(seed, kEvalSeedOffset, eval_count, frames, joints, pixel_noise)};
}

struct Batch {
  Tensor input;   // [B, T, J, 2], normalized
  Tensor target;  // [B, T, J, 3], mm
};

inline Batch make_batch(const std::vector<PoseSequence>& seqs, const std::vector<std::size_t>& idx) {
  if (idx.empty()) throw std::invalid_argument("make_batch: empty batch");
  const std::size_t T = seqs[idx[0]].frames, J = seqs[idx[0]].joints;
  std::vector<double> in, tg;
  in.reserve(idx.size() * T * J * 2);
  tg.reserve(idx.size() * T * J * 3);
  for (std::size_t i : idx) {
    const auto& s = seqs.at(i);
    if (s.frames != T || s.joints != J) throw DimensionError("make_batch: sequences differ in frames or joints");
    in.insert(in.end(), s.input_2d.begin(), s.input_2d.end());
    tg.insert(tg.end(), s.target_3d.begin(), s.target_3d.end());
  }
  const std::size_t B = idx.size();
  return {Tensor({B, T, J, 2}, std::move(in)), Tensor({B, T, J, 3}, std::move(tg))};
}

inline std::vector<PoseSequence> normalize_with(const NormalizationStats& st, const std::vector<PoseSequence>& seqs) {
  std::vector<PoseSequence> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) out.push_back(apply_normalization(st, s));
  return out;
}

inline void check_against_config(const ModelConfig& c, const std::vector<PoseSequence>& seqs, const char* what) {
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    if (seqs[i].frames != c.frames || seqs[i].joints != c.joints) {
      throw std::invalid_argument(std::string(what) + " sequence " + std::to_string(i) + " has " +
                                  std::to_string(seqs[i].frames) + " frames x " + std::to_string(seqs[i].joints) +
                                  " joints; model expects " + std::to_string(c.frames) + " x " +
                                  std::to_string(c.joints));
    }
  }
}

// Predictions (frames x J x 3, mm) for raw sequences, in input order. Batches
// are formed in order so results depend only on batch_size.
inline std::vector<std::vector<double>> predict(const PrgcnModel& model, const NormalizationStats& stats,
                                                const std::vector<PoseSequence>& seqs, std::size_t batch_size) {
  check_against_config(model.config, seqs, "predict:");
  const auto norm = normalize_with(stats, seqs);
  std::vector<std::vector<double>> out;
  out.reserve(seqs.size());
  for (std::size_t start = 0; start < norm.size(); start += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, norm.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const Tensor pred = model.forward(make_batch(norm, idx).input);
    const std::size_t per = pred.numel() / idx.size();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      out.emplace_back(pred.data().begin() + static_cast<long>(b * per),
                       pred.data().begin() + static_cast<long>((b + 1) * per));
    }
  }
  return out;
}

inline std::vector<std::vector<double>> targets_of(const std::vector<PoseSequence>& seqs) {
  std::vector<std::vector<double>> out;
  for (const auto& s : seqs) out.push_back(s.target_3d);
  return out;
}

// Mean Shannon entropy (nats) of the retrieval weights over layers, clips and
// pooled frames. Zero when the memory path is off.
inline double retrieval_entropy(const PrgcnModel& model, const Tensor& input) {
  std::vector<LayerTrace> trace;
  ForwardOptions opts;
  opts.trace = &trace;
  model.forward(input, opts);
  double total = 0.0;
  std::size_t rows = 0;
  for (const auto& layer : trace) {
    const std::size_t K = layer.weights.shape().back();
    const auto w = layer.weights.data();
    for (std::size_t r = 0; r < w.size() / K; ++r) {
      double h = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        const double p = w[r * K + k];
        if (p > 0.0) h -= p * std::log(p);
      }
      total += h;
      ++rows;
    }
  }
  return rows == 0 ? 0.0 : total / static_cast<double>(rows);
}

// Mean root-relative pose over every frame of a split (J x 3).
inline std::vector<double> mean_pose(const std::vector<PoseSequence>& seqs) {
  if (seqs.empty()) throw std::invalid_argument("mean_pose: empty split");
  const std::size_t J = seqs.front().joints;
  std::vector<double> mean(J * 3, 0.0);
  std::size_t frames = 0;
  for (const auto& s : seqs) {
    for (std::size_t t = 0; t < s.frames; ++t) {
      for (std::size_t k = 0; k < J * 3; ++k) mean[k] += s.target_3d[t * J * 3 + k];
    }
    frames += s.frames;
  }
  for (double& m : mean) m /= static_cast<double>(frames);
  return mean;
}

// Mean error of predicting the training split's mean pose for every frame.
inline double constant_pose_baseline(const std::vector<PoseSequence>& train, const std::vector<PoseSequence>& eval) {
  if (train.empty() || eval.empty()) throw std::invalid_argument("constant_pose_baseline: empty split");
  const std::size_t J = train.front().joints;
  const std::vector<double> mean = mean_pose(train);
  double err = 0.0;
  std::size_t count = 0;
  for (const auto& s : eval) {
    for (std::size_t t = 0; t < s.frames; ++t) {
      for (std::size_t j = 0; j < J; ++j) {
        err += detail::joint_error(&s.target_3d[(t * J + j) * 3], &mean[j * 3]);
        ++count;
      }
    }
  }
  return err / static_cast<double>(count);
}

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_mpjpe = 0.0;
  double eval_mpjpe = 0.0;
  double eval_pmpjpe = 0.0;
  double retrieval_entropy = 0.0;

  bool operator==(const EpochLog&) const = default;
};

inline constexpr const char* kEpochLogHeader = "epoch,lr,train_loss,train_mpjpe,eval_mpjpe,eval_pmpjpe,retrieval_entropy";

inline std::string epoch_log_csv(const std::vector<EpochLog>& log) {
  std::string out = std::string(kEpochLogHeader) + "\n";
  char buf[512];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", e.epoch, e.lr, e.train_loss,
                  e.train_mpjpe, e.eval_mpjpe, e.eval_pmpjpe, e.retrieval_entropy);
    out += buf;
  }
  return out;
}

struct TrainResult {
  PrgcnModel model;
  NormalizationStats stats;
  std::vector<EpochLog> log;
};

using EpochCallback = std::function<void(const EpochLog&)>;

inline TrainResult train(const ModelConfig& config, const TrainSettings& settings, const Dataset& data,
                         std::uint64_t seed, const EpochCallback& on_epoch = {}) {
  config.validate();
  if (data.train.empty()) throw std::invalid_argument("train: empty training split");
  if (data.eval.empty()) throw std::invalid_argument("train: empty evaluation split");
  if (settings.batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  check_against_config(config, data.train, "train:");
  check_against_config(config, data.eval, "eval:");
  keep_heap_resident();

  TrainResult res;
  res.stats = compute_normalization(data.train);
  const auto train_norm = normalize_with(res.stats, data.train);
  const auto eval_norm = normalize_with(res.stats, data.eval);
  res.model = PrgcnModel::init(config, seed);
  res.model.set_reference_pose(mean_pose(data.train));
  const ParameterList params = res.model.parameters();
  AdamW opt(params, settings.adamw());

  std::vector<std::size_t> probe_idx(std::min(std::max<std::size_t>(1, settings.probe_size), eval_norm.size()));
  std::iota(probe_idx.begin(), probe_idx.end(), 0);
  const Tensor probe = make_batch(eval_norm, probe_idx).input;
  const auto eval_targets = targets_of(data.eval);

  Rng shuffle_rng = make_rng(seed, 0x5f1e);
  std::vector<std::size_t> order(train_norm.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < settings.epochs; ++epoch) {
    EpochLog log;
    log.epoch = epoch + 1;
    log.lr = lr_schedule(epoch, settings.lr, settings.lr_decay);
    opt.set_lr(log.lr);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0, err_sum = 0.0;
    std::size_t batches = 0, joints_seen = 0;
    for (std::size_t start = 0; start < order.size(); start += settings.batch_size) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<long>(start),
                                         order.begin() + static_cast<long>(std::min(order.size(), start + settings.batch_size)));
      const Batch batch = make_batch(train_norm, idx);
      try {
        Tape tape;
        const Tensor pred = res.model.forward(batch.input);
        const LossParts parts = pose_loss(pred, batch.target, config.lambda_v);
        tape.backward(parts.total);
        opt.step();
        opt.zero_grad();
        loss_sum += parts.total.item();
        const auto errs = joint_errors(pred.data(), batch.target.data(), config.joints);
        for (double e : errs) err_sum += e;
        joints_seen += errs.size();
      } catch (const NumericalError& e) {
        throw NumericalError("training diverged at epoch " + std::to_string(epoch + 1) + ", batch " +
                             std::to_string(batches) + ": " + e.what());
      }
      ++batches;
    }
    log.train_loss = loss_sum / static_cast<double>(batches);
    log.train_mpjpe = err_sum / static_cast<double>(joints_seen);

    const auto preds = predict(res.model, res.stats, data.eval, settings.batch_size);
    const MetricReport rep = evaluate_poses(preds, eval_targets, config.joints);
    log.eval_mpjpe = rep.mpjpe_mm;
    log.eval_pmpjpe = rep.p_mpjpe_mm;
    log.retrieval_entropy = retrieval_entropy(res.model, probe);
    res.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Gradient checking.

struct GroupCheck {
  std::string group;
  double max_rel_error = 0.0;  // worst tensor in the group
  std::string worst_parameter;
  std::size_t entries = 0;
};

// ||a - b|| / max(||a||, ||b||, floor). Gradients that vanish analytically
// (e.g. attention key biases, which softmax cancels) leave only rounding noise
// on both sides, so they are compared in absolute terms below the floor.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-6) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

// Compares analytic gradients of `objective` with five-point central
// differences over every entry of every parameter, one group-norm error per
// tensor. The fourth-order stencil lets h stay large enough that rounding in
// the objective does not dominate.
inline std::vector<GroupCheck> gradcheck(const ParameterList& params, const std::function<Tensor()>& objective,
                                         double h = 1e-4) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
  {
    Tape tape;
    tape.backward(objective());
  }
  std::vector<GroupCheck> groups;
  for (const auto& p : params) {
    Tensor t = p.tensor;
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    std::vector<double> numeric(t.numel());
    auto w = t.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double orig = w[i];
      auto at = [&](double offset) {
        w[i] = orig + offset;
        return objective().item();
      };
      const double f2 = at(2.0 * h), f1 = at(h), m1 = at(-h), m2 = at(-2.0 * h);
      w[i] = orig;
      numeric[i] = (8.0 * (f1 - m1) - (f2 - m2)) / (12.0 * h);
    }
    t.zero_grad();
    const double err = relative_error(analytic, numeric);
    auto it = std::find_if(groups.begin(), groups.end(), [&](const GroupCheck& g) { return g.group == p.group; });
    if (it == groups.end()) {
      groups.push_back({p.group, err, p.name, t.numel()});
    } else {
      it->entries += t.numel();
      if (err > it->max_rel_error) {
        it->max_rel_error = err;
        it->worst_parameter = p.name;
      }
    }
  }
  return groups;
}

}  // namespace prgcn
