#pragma once

// Skeleton topology, pose sequences, synthetic motion and input normalization.

#include <Eigen/Geometry>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "prgcn/random.hpp"

namespace prgcn {

struct Bone {
  std::size_t parent;
  std::size_t child;
};

// Kinematic tree rooted at joint 0 (the pelvis).
struct Skeleton {
  std::size_t joint_count = 0;
  std::vector<Bone> bones;
  std::vector<std::string> joint_names;
  // Unit direction of each bone in the rest pose (body frame, y up), one per bone.
  std::vector<std::array<double, 3>> rest_directions;

  // Throws std::invalid_argument unless the bones form a tree rooted at 0.
  void validate() const {
    if (joint_count == 0) throw std::invalid_argument("skeleton: no joints");
    if (bones.size() + 1 != joint_count) {
      throw std::invalid_argument("skeleton: expected " + std::to_string(joint_count - 1) + " bones, got " +
                                  std::to_string(bones.size()));
    }
    std::vector<int> parent(joint_count, -1);
    for (const Bone& b : bones) {
      if (b.parent >= joint_count || b.child >= joint_count || b.child == 0 || b.parent == b.child) {
        throw std::invalid_argument("skeleton: invalid bone (" + std::to_string(b.parent) + ", " +
                                    std::to_string(b.child) + ")");
      }
      if (parent[b.child] != -1) throw std::invalid_argument("skeleton: joint " + std::to_string(b.child) + " has two parents");
      parent[b.child] = static_cast<int>(b.parent);
    }
    for (std::size_t j = 1; j < joint_count; ++j) {
      std::size_t cur = j;
      std::size_t steps = 0;
      while (cur != 0) {
        if (parent[cur] < 0 || ++steps > joint_count) throw std::invalid_argument("skeleton: joint " + std::to_string(j) + " not connected to root");
        cur = static_cast<std::size_t>(parent[cur]);
      }
    }
    if (!joint_names.empty() && joint_names.size() != joint_count) throw std::invalid_argument("skeleton: joint name count mismatch");
    if (rest_directions.size() != bones.size()) throw std::invalid_argument("skeleton: rest direction count mismatch");
  }

  std::vector<std::vector<std::size_t>> children() const {
    std::vector<std::vector<std::size_t>> c(joint_count);
    for (const Bone& b : bones) c[b.parent].push_back(b.child);
    for (auto& v : c) std::sort(v.begin(), v.end());
    return c;
  }

  // Preorder depth-first traversal from the root, children in index order.
  std::vector<std::size_t> dfs_order() const {
    const auto c = children();
    std::vector<std::size_t> order;
    std::vector<std::size_t> stack{0};
    while (!stack.empty()) {
      const std::size_t j = stack.back();
      stack.pop_back();
      order.push_back(j);
      for (auto it = c[j].rbegin(); it != c[j].rend(); ++it) stack.push_back(*it);
    }
    return order;
  }

  // Symmetric 0/1 bone adjacency without self loops, row-major J x J.
  std::vector<double> raw_adjacency() const {
    std::vector<double> a(joint_count * joint_count, 0.0);
    for (const Bone& b : bones) {
      a[b.parent * joint_count + b.child] = 1.0;
      a[b.child * joint_count + b.parent] = 1.0;
    }
    return a;
  }

  std::optional<std::size_t> find_joint(std::string_view name) const {
    for (std::size_t j = 0; j < joint_names.size(); ++j) {
      if (joint_names[j] == name) return j;
    }
    return std::nullopt;
  }
};

// 17-joint layout used by the common lifting benchmarks.
inline Skeleton build_default_skeleton() {
  Skeleton s;
  s.joint_count = 17;
  s.joint_names = {"pelvis",    "r_hip",     "r_knee",  "r_ankle", "l_hip",   "l_knee",
                   "l_ankle",   "spine",     "thorax",  "neck",    "head",    "l_shoulder",
                   "l_elbow",   "l_wrist",   "r_shoulder", "r_elbow", "r_wrist"};
  const std::array<double, 3> up{0, 1, 0}, down{0, -1, 0}, left{1, 0, 0}, right{-1, 0, 0};
  s.bones = {{0, 1}, {1, 2}, {2, 3}, {0, 4}, {4, 5}, {5, 6}, {0, 7}, {7, 8},
             {8, 9}, {9, 10}, {8, 11}, {11, 12}, {12, 13}, {8, 14}, {14, 15}, {15, 16}};
  s.rest_directions = {right, down, down, left, down, down, up, up, up, up, left, down, down, right, down, down};
  return s;
}

// Compact tree for arbitrary joint counts: joint j > 0 hangs off (j - 1) / 2.
inline Skeleton build_heap_skeleton(std::size_t joints) {
  if (joints == 0) throw std::invalid_argument("skeleton: joint count must be >= 1");
  Skeleton s;
  s.joint_count = joints;
  for (std::size_t j = 0; j < joints; ++j) s.joint_names.push_back("joint_" + std::to_string(j));
  for (std::size_t j = 1; j < joints; ++j) {
    s.bones.push_back({(j - 1) / 2, j});
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(j) / static_cast<double>(joints);
    s.rest_directions.push_back({std::cos(angle), std::sin(angle), 0.0});
  }
  return s;
}

inline Skeleton build_skeleton(std::size_t joints) {
  return joints == 17 ? build_default_skeleton() : build_heap_skeleton(joints);
}

// Per-bone lengths in millimeters, indexed like Skeleton::bones.
struct BoneConstraints {
  std::vector<double> lengths;

  void validate(const Skeleton& s) const {
    if (lengths.size() != s.bones.size()) throw std::invalid_argument("bone constraints: length count mismatch");
    for (double l : lengths) {
      if (!(l > 0.0)) throw std::invalid_argument("bone constraints: lengths must be positive");
    }
  }
};

inline BoneConstraints default_bone_lengths(const Skeleton& s) {
  BoneConstraints c;
  if (s.joint_count == 17 && s.find_joint("pelvis")) {
    c.lengths = {132, 442, 454, 132, 442, 454, 233, 257, 121, 115, 151, 278, 251, 151, 278, 251};
  } else {
    c.lengths.assign(s.bones.size(), 200.0);
  }
  return c;
}

struct Camera {
  double focal = 2.3;  // normalized screen units
  double cx = 0.0;
  double cy = 0.0;

  bool operator==(const Camera&) const = default;
};

// Paired 2D input and root-relative 3D target for one clip.
struct PoseSequence {
  std::size_t frames = 0;
  std::size_t joints = 0;
  int fps = 50;
  Camera camera;
  std::vector<double> input_2d;   // frames x joints x 2
  std::vector<double> target_3d;  // frames x joints x 3, millimeters, root at origin
  // Camera-space root translation per frame (frames x 3, mm); empty when unknown.
  std::vector<double> root_position;

  double& p2d(std::size_t t, std::size_t j, std::size_t c) { return input_2d[(t * joints + j) * 2 + c]; }
  double p2d(std::size_t t, std::size_t j, std::size_t c) const { return input_2d[(t * joints + j) * 2 + c]; }
  double& p3d(std::size_t t, std::size_t j, std::size_t c) { return target_3d[(t * joints + j) * 3 + c]; }
  double p3d(std::size_t t, std::size_t j, std::size_t c) const { return target_3d[(t * joints + j) * 3 + c]; }

  bool operator==(const PoseSequence&) const = default;
};

// Pinhole projection of a root-relative pose placed at the stored root position.
inline std::array<double, 2> project_point(const Camera& cam, const std::array<double, 3>& p) {
  return {cam.focal * p[0] / p[2] + cam.cx, cam.focal * p[1] / p[2] + cam.cy};
}

inline std::vector<double> reproject(const PoseSequence& seq) {
  if (seq.root_position.size() != seq.frames * 3) throw std::invalid_argument("reproject: sequence has no root trajectory");
  std::vector<double> out(seq.frames * seq.joints * 2);
  for (std::size_t t = 0; t < seq.frames; ++t) {
    for (std::size_t j = 0; j < seq.joints; ++j) {
      const std::array<double, 3> p{seq.p3d(t, j, 0) + seq.root_position[t * 3],
                                    seq.p3d(t, j, 1) + seq.root_position[t * 3 + 1],
                                    seq.p3d(t, j, 2) + seq.root_position[t * 3 + 2]};
      const auto uv = project_point(seq.camera, p);
      out[(t * seq.joints + j) * 2] = uv[0];
      out[(t * seq.joints + j) * 2 + 1] = uv[1];
    }
  }
  return out;
}

inline double bone_length(const PoseSequence& seq, std::size_t t, const Bone& b) {
  double s = 0.0;
  for (std::size_t c = 0; c < 3; ++c) {
    const double d = seq.p3d(t, b.child, c) - seq.p3d(t, b.parent, c);
    s += d * d;
  }
  return std::sqrt(s);
}

enum class MotionKind { walk, sit, reach, idle };

inline MotionKind parse_motion_kind(std::string_view name) {
  if (name == "walk") return MotionKind::walk;
  if (name == "sit") return MotionKind::sit;
  if (name == "reach") return MotionKind::reach;
  if (name == "idle") return MotionKind::idle;
  throw std::invalid_argument("unknown motion kind '" + std::string(name) + "' (expected walk|sit|reach|idle)");
}

inline const char* motion_kind_name(MotionKind k) {
  switch (k) {
    case MotionKind::walk: return "walk";
    case MotionKind::sit: return "sit";
    case MotionKind::reach: return "reach";
    case MotionKind::idle: return "idle";
  }
  return "?";
}

struct GeneratorOptions {
  double pixel_noise = 0.01;  // stddev of additive 2D noise, normalized units
  int fps = 50;
  Camera camera;
};

namespace detail {

// Smooth 0 -> 1 ramp centred at `mid` with width `w`.
inline double ramp(double t, double mid, double w) { return 0.5 * (1.0 + std::tanh((t - mid) / w)); }

struct JointAngles {
  double flex = 0.0;   // about body x
  double twist = 0.0;  // about body y
  double abduct = 0.0; // about body z
};

inline Eigen::Matrix3d angles_to_rotation(const JointAngles& a) {
  return (Eigen::AngleAxisd(a.twist, Eigen::Vector3d::UnitY()) * Eigen::AngleAxisd(a.flex, Eigen::Vector3d::UnitX()) *
          Eigen::AngleAxisd(a.abduct, Eigen::Vector3d::UnitZ()))
      .toRotationMatrix();
}

struct MotionProgram {
  MotionKind kind;
  double freq, phase, amp, onset, side;
  double yaw, pitch;
};

inline MotionProgram sample_program(MotionKind kind, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  MotionProgram p{};
  p.kind = kind;
  p.freq = 0.7 + 0.6 * u(rng);
  p.phase = 2.0 * std::numbers::pi * u(rng);
  p.amp = 0.75 + 0.5 * u(rng);
  p.onset = u(rng);
  p.side = u(rng) < 0.5 ? -1.0 : 1.0;
  p.yaw = (u(rng) - 0.5) * std::numbers::pi / 2.0;
  p.pitch = (u(rng) - 0.5) * 0.2;
  return p;
}

// Local joint angles (radians) of one named joint at time `t` seconds, where
// `progress` is t normalized to [0, 1] over the clip.
inline JointAngles joint_angles(const MotionProgram& p, std::string_view name, double t, double progress) {
  const double w = 2.0 * std::numbers::pi * p.freq;
  const double s = std::sin(w * t + p.phase);
  const double c = std::cos(w * t + p.phase);
  JointAngles a;
  const bool right = name.starts_with("r_");
  const double mirror = right ? -1.0 : 1.0;
  switch (p.kind) {
    case MotionKind::walk: {
      const double leg = right ? s : -s;
      if (name.ends_with("hip")) a.flex = 0.45 * p.amp * leg;
      if (name.ends_with("knee")) a.flex = -0.55 * p.amp * (0.5 + 0.5 * (right ? c : -c));
      if (name.ends_with("shoulder")) { a.flex = -0.35 * p.amp * leg; a.abduct = 0.15 * mirror; }
      if (name.ends_with("elbow")) a.flex = 0.3 + 0.2 * p.amp * (0.5 + 0.5 * leg);
      if (name == "spine") a.twist = 0.12 * p.amp * s;
      if (name == "head") a.twist = 0.05 * c;
      break;
    }
    case MotionKind::sit: {
      const double down = ramp(progress, 0.2 + 0.4 * p.onset, 0.12);
      const double wobble = 0.04 * s;
      if (name.ends_with("hip")) a.flex = (1.35 * p.amp * down) + wobble;
      if (name.ends_with("knee")) a.flex = -1.5 * p.amp * down;
      if (name == "spine") a.flex = 0.35 * down + wobble;
      if (name.ends_with("shoulder")) { a.flex = 0.5 * down; a.abduct = 0.2 * mirror; }
      if (name.ends_with("elbow")) a.flex = 0.8 * down;
      if (name == "neck") a.flex = -0.2 * down;
      break;
    }
    case MotionKind::reach: {
      const double lift = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * progress * (0.5 + 0.5 * p.freq) + p.phase * 0.1);
      const bool active_side = (p.side > 0) != right;
      if (name.ends_with("shoulder") && active_side) { a.flex = 2.0 * p.amp * lift; a.abduct = 0.3 * mirror * lift; }
      if (name.ends_with("elbow") && active_side) a.flex = 0.9 * (1.0 - lift);
      if (name.ends_with("elbow") && !active_side) a.flex = 0.3;
      if (name == "spine") { a.flex = 0.25 * lift; a.twist = 0.2 * p.side * lift; }
      if (name.ends_with("knee")) a.flex = -0.15 * lift;
      if (name.ends_with("hip")) a.flex = 0.1 * lift;
      break;
    }
    case MotionKind::idle: {
      const double sway = 0.06 * p.amp;
      if (name.ends_with("hip")) a.abduct = sway * s * mirror;
      if (name == "spine") { a.flex = 0.5 * sway * c; a.twist = sway * s; }
      if (name.ends_with("shoulder")) a.abduct = 0.1 * mirror + 0.5 * sway * c;
      if (name.ends_with("elbow")) a.flex = 0.2 + sway * s;
      if (name == "neck") a.twist = sway * c;
      break;
    }
  }
  if (name.starts_with("joint_")) {
    a.flex = 0.3 * p.amp * s;
    a.abduct = 0.2 * c;
  }
  return a;
}

}  // namespace detail

// Synthesizes a clip by forward kinematics from sinusoidal joint-angle
// programs, then projects it through a pinhole camera with the root placed
// 3-6 m in front of the lens. Bone lengths are exact by construction.
inline PoseSequence generate_synthetic_sequence(std::uint64_t seed, const Skeleton& skeleton,
                                                const BoneConstraints& bones, std::size_t frames, MotionKind kind,
                                                const GeneratorOptions& opts = {}) {
  if (frames < 1) throw std::invalid_argument("generate_synthetic_sequence: frames must be >= 1");
  skeleton.validate();
  bones.validate(skeleton);
  Rng rng = make_rng(seed, 0x6e6e);
  const detail::MotionProgram program = detail::sample_program(kind, rng);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double depth = 3000.0 + 3000.0 * u(rng);
  const double ox = (u(rng) - 0.5) * 600.0;
  const double oy = (u(rng) - 0.5) * 400.0;

  PoseSequence seq;
  seq.frames = frames;
  seq.joints = skeleton.joint_count;
  seq.fps = opts.fps;
  seq.camera = opts.camera;
  seq.input_2d.assign(frames * seq.joints * 2, 0.0);
  seq.target_3d.assign(frames * seq.joints * 3, 0.0);
  seq.root_position.assign(frames * 3, 0.0);

  const auto children = skeleton.children();
  std::vector<std::size_t> bone_of_child(skeleton.joint_count, 0);
  for (std::size_t b = 0; b < skeleton.bones.size(); ++b) bone_of_child[skeleton.bones[b].child] = b;
  const std::string unnamed;
  // Body frame is y-up; camera frame is y-down with z into the scene.
  Eigen::Matrix3d body_to_camera = Eigen::Matrix3d::Identity();
  body_to_camera(1, 1) = -1.0;
  body_to_camera(2, 2) = -1.0;

  std::normal_distribution<double> noise(0.0, opts.pixel_noise > 0.0 ? opts.pixel_noise : 1.0);
  for (std::size_t t = 0; t < frames; ++t) {
    const double time = static_cast<double>(t) / static_cast<double>(opts.fps);
    const double progress = frames > 1 ? static_cast<double>(t) / static_cast<double>(frames - 1) : 0.0;
    std::vector<Eigen::Matrix3d> global(skeleton.joint_count);
    std::vector<Eigen::Vector3d> pos(skeleton.joint_count, Eigen::Vector3d::Zero());
    const Eigen::Matrix3d root_rot =
        (Eigen::AngleAxisd(program.yaw + 0.05 * std::sin(time), Eigen::Vector3d::UnitY()) *
         Eigen::AngleAxisd(program.pitch, Eigen::Vector3d::UnitX()))
            .toRotationMatrix();
    global[0] = root_rot;
    for (std::size_t j : skeleton.dfs_order()) {
      const std::string& name = skeleton.joint_names.empty() ? unnamed : skeleton.joint_names[j];
      if (j != 0) {
        const Eigen::Matrix3d local = detail::angles_to_rotation(detail::joint_angles(program, name, time, progress));
        std::size_t parent = skeleton.bones[bone_of_child[j]].parent;
        global[j] = global[parent] * local;
      }
      for (std::size_t c : children[j]) {
        const std::size_t b = bone_of_child[c];
        const auto& dir = skeleton.rest_directions[b];
        const Eigen::Vector3d offset = Eigen::Vector3d(dir[0], dir[1], dir[2]).normalized() * bones.lengths[b];
        pos[c] = pos[j] + global[j] * offset;
      }
    }
    for (std::size_t j = 0; j < skeleton.joint_count; ++j) {
      const Eigen::Vector3d p = body_to_camera * pos[j];
      for (std::size_t c = 0; c < 3; ++c) seq.p3d(t, j, c) = j == 0 ? 0.0 : p[static_cast<long>(c)];
    }
    seq.root_position[t * 3] = ox;
    seq.root_position[t * 3 + 1] = oy;
    seq.root_position[t * 3 + 2] = depth;
  }
  seq.input_2d = reproject(seq);
  if (opts.pixel_noise > 0.0) {
    for (double& v : seq.input_2d) v += noise(rng);
  }
  return seq;
}

// Per joint-coordinate affine normalization of the 2D inputs.
struct NormalizationStats {
  std::size_t joints = 0;
  std::vector<double> mean;  // joints x 2
  std::vector<double> stddev;
  std::vector<bool> degenerate;  // zero variance replaced by 1

  bool any_degenerate() const {
    for (bool d : degenerate) {
      if (d) return true;
    }
    return false;
  }
};

inline NormalizationStats compute_normalization(const std::vector<PoseSequence>& batch) {
  if (batch.empty()) throw std::invalid_argument("normalize_inputs: empty batch");
  const std::size_t J = batch.front().joints;
  NormalizationStats st;
  st.joints = J;
  st.mean.assign(J * 2, 0.0);
  st.stddev.assign(J * 2, 1.0);
  st.degenerate.assign(J * 2, false);
  std::vector<double> var(J * 2, 0.0);
  std::size_t count = 0;
  for (const auto& s : batch) {
    if (s.joints != J) throw std::invalid_argument("normalize_inputs: joint count mismatch in batch");
    count += s.frames;
    for (std::size_t t = 0; t < s.frames; ++t) {
      for (std::size_t k = 0; k < J * 2; ++k) st.mean[k] += s.input_2d[t * J * 2 + k];
    }
  }
  for (double& m : st.mean) m /= static_cast<double>(count);
  for (const auto& s : batch) {
    for (std::size_t t = 0; t < s.frames; ++t) {
      for (std::size_t k = 0; k < J * 2; ++k) {
        const double d = s.input_2d[t * J * 2 + k] - st.mean[k];
        var[k] += d * d;
      }
    }
  }
  for (std::size_t k = 0; k < J * 2; ++k) {
    const double v = var[k] / static_cast<double>(count);
    if (v > 0.0) {
      st.stddev[k] = std::sqrt(v);
    } else {
      st.stddev[k] = 1.0;
      st.degenerate[k] = true;
    }
  }
  return st;
}

inline PoseSequence apply_normalization(const NormalizationStats& st, PoseSequence seq) {
  if (seq.joints != st.joints) throw std::invalid_argument("apply_normalization: joint count mismatch");
  const std::size_t J = seq.joints;
  for (std::size_t t = 0; t < seq.frames; ++t) {
    for (std::size_t k = 0; k < J * 2; ++k) {
      double& v = seq.input_2d[t * J * 2 + k];
      v = (v - st.mean[k]) / st.stddev[k];
    }
  }
  return seq;
}

inline PoseSequence invert_normalization(const NormalizationStats& st, PoseSequence seq) {
  const std::size_t J = seq.joints;
  for (std::size_t t = 0; t < seq.frames; ++t) {
    for (std::size_t k = 0; k < J * 2; ++k) {
      double& v = seq.input_2d[t * J * 2 + k];
      v = v * st.stddev[k] + st.mean[k];
    }
  }
  return seq;
}

struct NormalizedBatch {
  std::vector<PoseSequence> sequences;
  NormalizationStats stats;
};

// Zero mean, unit variance per joint and coordinate over batch x time.
inline NormalizedBatch normalize_inputs(const std::vector<PoseSequence>& batch) {
  NormalizedBatch out;
  out.stats = compute_normalization(batch);
  out.sequences.reserve(batch.size());
  for (const auto& s : batch) out.sequences.push_back(apply_normalization(out.stats, s));
  return out;
}

}  // namespace prgcn
