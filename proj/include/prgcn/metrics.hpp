#pragma once

// Pose-error metrics on root-relative millimetre poses stored as flat
// [poses x J x 3] arrays.

#include <Eigen/Dense>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "prgcn/tensor.hpp"

namespace prgcn {

namespace detail {

inline std::size_t pose_count(std::span<const double> pred, std::span<const double> target, std::size_t joints,
                              const char* op) {
  if (joints == 0 || pred.size() != target.size() || pred.size() % (joints * 3) != 0) {
    throw DimensionError(std::string(op) + ": prediction of " + std::to_string(pred.size()) + " values vs target of " +
                         std::to_string(target.size()) + " values with J=" + std::to_string(joints));
  }
  return pred.size() / (joints * 3);
}

inline double joint_error(const double* a, const double* b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

}  // namespace detail

// Euclidean error of every joint, in pose-major order.
inline std::vector<double> joint_errors(std::span<const double> pred, std::span<const double> target,
                                        std::size_t joints) {
  const std::size_t n = detail::pose_count(pred, target, joints, "joint_errors") * joints;
  std::vector<double> e(n);
  for (std::size_t i = 0; i < n; ++i) e[i] = detail::joint_error(pred.data() + 3 * i, target.data() + 3 * i);
  return e;
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

inline double mpjpe(std::span<const double> pred, std::span<const double> target, std::size_t joints) {
  return mean_of(joint_errors(pred, target, joints));
}

struct Alignment {
  std::vector<double> aligned;  // prediction after the similarity transform
  bool degenerate = false;      // alignment skipped
};

// Similarity transform (rotation, scale, translation) of one predicted pose
// that best matches the target in least squares.
inline Alignment procrustes_align(const double* pred, const double* target, std::size_t joints) {
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
  const Eigen::Map<const Mat> Y(pred, static_cast<Eigen::Index>(joints), 3);
  const Eigen::Map<const Mat> X(target, static_cast<Eigen::Index>(joints), 3);
  const Eigen::RowVector3d mu_x = X.colwise().mean();
  const Eigen::RowVector3d mu_y = Y.colwise().mean();
  const Mat x0 = X.rowwise() - mu_x;
  const Mat y0 = Y.rowwise() - mu_y;
  const double nx = x0.norm(), ny = y0.norm();

  Alignment out;
  out.aligned.assign(pred, pred + 3 * joints);
  constexpr double kTiny = 1e-12;
  if (!(nx > kTiny) || !(ny > kTiny)) {
    out.degenerate = true;
    return out;
  }
  const Eigen::Matrix3d h = (x0 / nx).transpose() * (y0 / ny);
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d v = svd.matrixV();
  Eigen::Vector3d s = svd.singularValues();
  const Eigen::Matrix3d u = svd.matrixU();
  Eigen::Matrix3d r = v * u.transpose();
  if (r.determinant() < 0.0) {
    v.col(2) *= -1.0;
    s(2) *= -1.0;
    r = v * u.transpose();
  }
  const double a = s.sum() * nx / ny;
  const Eigen::RowVector3d t = mu_x - a * mu_y * r;
  Eigen::Map<Mat> dst(out.aligned.data(), static_cast<Eigen::Index>(joints), 3);
  dst = ((a * Y * r).rowwise() + t).eval();
  return out;
}

struct ProcrustesResult {
  double error = 0.0;
  std::size_t degenerate = 0;  // poses that fell back to the unaligned error
};

inline ProcrustesResult p_mpjpe_detail(std::span<const double> pred, std::span<const double> target,
                                       std::size_t joints) {
  const std::size_t poses = detail::pose_count(pred, target, joints, "p_mpjpe");
  ProcrustesResult res;
  double total = 0.0;
  for (std::size_t p = 0; p < poses; ++p) {
    const double* tp = target.data() + p * joints * 3;
    const Alignment al = procrustes_align(pred.data() + p * joints * 3, tp, joints);
    res.degenerate += al.degenerate ? 1 : 0;
    for (std::size_t j = 0; j < joints; ++j) total += detail::joint_error(al.aligned.data() + 3 * j, tp + 3 * j);
  }
  res.error = poses == 0 ? 0.0 : total / static_cast<double>(poses * joints);
  return res;
}

inline double p_mpjpe(std::span<const double> pred, std::span<const double> target, std::size_t joints) {
  return p_mpjpe_detail(pred, target, joints).error;
}

// Uniform grid of n thresholds over [0, max_mm], endpoints included.
inline std::vector<double> auc_grid(double max_mm = 150.0, std::size_t n = 31) {
  std::vector<double> g(n);
  for (std::size_t i = 0; i < n; ++i) g[i] = n == 1 ? max_mm : max_mm * static_cast<double>(i) / static_cast<double>(n - 1);
  return g;
}

// Percentage of joint errors at or below the threshold.
inline double pck(const std::vector<double>& errors, double threshold) {
  if (errors.empty()) return 0.0;
  std::size_t hit = 0;
  for (double e : errors) hit += e <= threshold ? 1 : 0;
  return 100.0 * static_cast<double>(hit) / static_cast<double>(errors.size());
}

struct PckAuc {
  double pck = 0.0;
  double auc = 0.0;
};

inline PckAuc pck_auc(std::span<const double> pred, std::span<const double> target, std::size_t joints,
                      double threshold = 150.0, const std::vector<double>& grid = auc_grid()) {
  const auto errors = joint_errors(pred, target, joints);
  PckAuc r;
  r.pck = pck(errors, threshold);
  double s = 0.0;
  for (double th : grid) s += pck(errors, th);
  r.auc = grid.empty() ? 0.0 : s / static_cast<double>(grid.size());
  return r;
}

struct SequenceMetrics {
  double mpjpe_mm = 0.0;
  double p_mpjpe_mm = 0.0;
};

struct MetricReport {
  double mpjpe_mm = 0.0;
  double p_mpjpe_mm = 0.0;
  double pck150_pct = 0.0;
  double auc_pct = 0.0;
  std::size_t degenerate_alignments = 0;
  std::vector<SequenceMetrics> per_sequence;
};

// Each sequence holds frames x J x 3 values; aggregates weight every joint equally.
inline MetricReport evaluate_poses(const std::vector<std::vector<double>>& preds,
                                   const std::vector<std::vector<double>>& targets, std::size_t joints) {
  if (preds.size() != targets.size()) {
    throw DimensionError("evaluate_poses: " + std::to_string(preds.size()) + " predictions vs " +
                         std::to_string(targets.size()) + " targets");
  }
  MetricReport rep;
  std::vector<double> all_pred, all_target;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto pa = p_mpjpe_detail(preds[i], targets[i], joints);
    rep.per_sequence.push_back({mpjpe(preds[i], targets[i], joints), pa.error});
    rep.degenerate_alignments += pa.degenerate;
    all_pred.insert(all_pred.end(), preds[i].begin(), preds[i].end());
    all_target.insert(all_target.end(), targets[i].begin(), targets[i].end());
  }
  rep.mpjpe_mm = mpjpe(all_pred, all_target, joints);
  rep.p_mpjpe_mm = p_mpjpe(all_pred, all_target, joints);
  const auto pa = pck_auc(all_pred, all_target, joints);
  rep.pck150_pct = pa.pck;
  rep.auc_pct = pa.auc;
  return rep;
}

}  // namespace prgcn
