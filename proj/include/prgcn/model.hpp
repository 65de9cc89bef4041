#pragma once

// Full lifting network: embedding stem, N stacked layers (dual-stream
// encoder, graph memory at proxy resolution, bidirectional proxy
// cross-attention), and the two-stage regression head.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "prgcn/graph_conv.hpp"
#include "prgcn/memory_bank.hpp"
#include "prgcn/skeleton.hpp"
#include "prgcn/streams.hpp"

namespace prgcn {

// Kinds of Stream 1 (spatial-first) and Stream 2 (temporal-first).
struct StreamConfig {
  StreamKind first = StreamKind::mamba;
  StreamKind second = StreamKind::attention;

  bool operator==(const StreamConfig&) const = default;
};

inline std::string stream_config_name(const StreamConfig& s) {
  return std::string(stream_kind_name(s.first)) + "+" + stream_kind_name(s.second);
}

inline StreamConfig parse_stream_config(std::string_view text) {
  auto kind = [&](std::string_view part) {
    if (part == "mamba") return StreamKind::mamba;
    if (part == "attention") return StreamKind::attention;
    throw std::invalid_argument("stream_config: unknown stream kind '" + std::string(part) +
                                "' (expected mamba or attention)");
  };
  const auto plus = text.find('+');
  if (plus == std::string_view::npos) {
    throw std::invalid_argument("stream_config: expected '<kind>+<kind>', got '" + std::string(text) + "'");
  }
  return {kind(text.substr(0, plus)), kind(text.substr(plus + 1))};
}

struct Toggles {
  bool proxy = true;
  bool dual_stream = true;
  bool pattern_reuse = true;
  bool enhanced = true;

  bool operator==(const Toggles&) const = default;
};

struct ModelConfig {
  std::size_t frames = 27;
  std::size_t joints = 17;
  std::size_t dim = 32;
  std::size_t heads = 4;
  std::size_t layers = 3;
  std::size_t prototypes = 8;
  std::size_t compression_ratio = 3;
  std::size_t state_dim = kDefaultStateDim;
  StreamConfig streams{};
  Toggles toggles{};
  double lambda_v = 0.5;
  double output_scale = 1000.0;  // head output units -> millimetres

  bool operator==(const ModelConfig&) const = default;

  std::size_t pooled_frames() const { return (frames + compression_ratio - 1) / compression_ratio; }

  void validate() const {
    auto fail = [](const std::string& msg) { throw std::invalid_argument("model config: " + msg); };
    if (frames < 1) fail("frames must be >= 1");
    if (joints < 1) fail("joints must be >= 1");
    if (dim < 1 || heads < 1) fail("dim and heads must be >= 1");
    if (dim % heads != 0) fail("dim " + std::to_string(dim) + " not divisible by heads " + std::to_string(heads));
    if (layers < 1) fail("layers must be >= 1");
    if (prototypes < 1) fail("prototypes must be >= 1");
    if (compression_ratio < 1) fail("compression_ratio must be >= 1");
    if (state_dim < 1) fail("state_dim must be >= 1");
    if (toggles.enhanced && !toggles.pattern_reuse) fail("toggle 'enhanced' requires 'pattern_reuse'");
    if (!(lambda_v >= 0.0) || !std::isfinite(lambda_v)) fail("lambda_v must be finite and >= 0");
    if (!(output_scale > 0.0) || !std::isfinite(output_scale)) fail("output_scale must be finite and > 0");
  }
};

// Desk-scale and paper-scale presets.
inline ModelConfig desk_config() { return {}; }

inline ModelConfig paper_config() {
  ModelConfig c;
  c.frames = 243;
  c.dim = 128;
  c.heads = 8;
  c.layers = 16;
  c.prototypes = 48;
  return c;
}

inline ModelConfig tiny_config() {
  ModelConfig c;
  c.frames = 6;
  c.joints = 5;
  c.dim = 8;
  c.heads = 2;
  c.layers = 2;
  c.prototypes = 3;
  c.state_dim = 4;
  return c;
}

// ---------------------------------------------------------------------------
// Proxy cross-attention.

// Per-joint temporal cross-attention with pre-norm on both sides and a
// residual on the query stream. Sequences are [B, L, J, D].
struct CrossAttention {
  LayerNorm norm_query;
  LayerNorm norm_context;
  MultiHeadAttention attn;

  static CrossAttention init(Rng& rng, std::size_t dim, std::size_t heads) {
    return {LayerNorm::init(dim), LayerNorm::init(dim), MultiHeadAttention::init(rng, dim, heads)};
  }

  // Update alone, without the residual.
  Tensor delta(const Tensor& query, const Tensor& context) const {
    const Tensor q = swap_time_joint(norm_query(query));
    const Tensor c = swap_time_joint(norm_context(context));
    return swap_time_joint(attn(q, c));
  }

  Tensor operator()(const Tensor& query, const Tensor& context) const { return add(query, delta(query, context)); }

  void collect(ParameterList& out, const std::string& name) const {
    norm_query.collect(out, name + ".norm_query");
    norm_context.collect(out, name + ".norm_context");
    attn.collect(out, name + ".attn", "proxy");
  }
};

struct ProxyUpdate {
  Tensor proxies;
  Tensor sequence;
};

// Sequence retrieval (proxies attend to X) then context propagation (X attends
// to the refreshed proxies).
inline ProxyUpdate proxy_aggregate(const Tensor& x, const Tensor& proxies, const CrossAttention& retrieval,
                                   const CrossAttention& propagation) {
  if (x.dim() != 4 || proxies.dim() != 4 || x.shape()[0] != proxies.shape()[0] || x.shape()[2] != proxies.shape()[2] ||
      x.shape()[3] != proxies.shape()[3] || proxies.shape()[1] > x.shape()[1]) {
    throw DimensionError("proxy_aggregate: sequence " + shape_str(x.shape()) + " incompatible with proxies " +
                         shape_str(proxies.shape()));
  }
  ProxyUpdate u;
  u.proxies = retrieval(proxies, x);
  u.sequence = propagation(x, u.proxies);
  return u;
}

// ---------------------------------------------------------------------------
// Layers.

struct MemoryPath {
  GConvParams spatial;   // G_s of the dual-path enhancement
  GConvParams temporal;  // G_t
  GConvParams fused;     // convolution over A'
  Tensor alpha_param;    // alpha = sigmoid(alpha_param)
  Tensor lambda_param;   // lambda = sigmoid(lambda_param)

  static MemoryPath init(Rng& rng, std::size_t dim) {
    MemoryPath m;
    m.spatial = GConvParams::init(rng, dim);
    m.temporal = GConvParams::init(rng, dim);
    m.fused = GConvParams::init(rng, dim);
    m.alpha_param = Tensor::scalar(0.0, true);
    m.lambda_param = Tensor::scalar(0.0, true);
    return m;
  }

  void collect(ParameterList& out, const std::string& name) const {
    spatial.collect(out, name + ".enhance_spatial", "gconv");
    temporal.collect(out, name + ".enhance_temporal", "gconv");
    fused.collect(out, name + ".fused", "gconv");
    append(out, name + ".alpha_param", "alpha_enhance", alpha_param);
    append(out, name + ".lambda_param", "lambda", lambda_param);
  }
};

struct Layer {
  Stream stream1;  // spatial-first
  Stream stream2;  // temporal-first
  StreamGate gate;
  CrossAttention retrieval;
  CrossAttention propagation;
  MemoryPath memory;

  void collect(ParameterList& out, const std::string& name) const {
    stream1.collect(out, name + ".stream1");
    stream2.collect(out, name + ".stream2");
    gate.collect(out, name + ".stream_gate");
    retrieval.collect(out, name + ".proxy_retrieval");
    propagation.collect(out, name + ".proxy_propagation");
    memory.collect(out, name + ".memory");
  }
};

// Values that replace learned quantities during a forward pass (ablation and
// endpoint tests). Unset fields keep the learned value.
struct ForwardOverrides {
  std::optional<double> lambda;        // fusion weight of A'
  std::optional<double> alpha;         // dual-path enhancement weight
  std::optional<double> stream_alpha;  // alpha_0 of the stream gate
  std::optional<double> gate;          // update gate g
};

struct LayerTrace {
  MemoryState s_prev;
  Tensor s_new;
  Tensor weights;  // retrieval weights w [B, T', K]
  Tensor fused_adjacency;
};

struct ForwardOptions {
  ForwardOverrides overrides{};
  MemoryState initial_state{};  // cross-window carry-over; absent by default
  std::vector<LayerTrace>* trace = nullptr;
  MemoryState* final_state = nullptr;
};

struct PrgcnModel {
  ModelConfig config;
  Skeleton skeleton;
  AdjacencySet adjacency;
  Linear embed;          // 2 -> D, shared across joints
  Tensor joint_embed;    // J x D
  Tensor proxy_tokens;   // T' x D
  GraphMemoryBank bank;  // shared by every layer
  std::vector<Layer> layers;
  LayerNorm final_norm;
  Linear head_hidden;  // D -> D
  Linear head_out;     // D -> 3
  Tensor pose_offset;  // J x 3, added to the head output (head units)

  static PrgcnModel init(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    PrgcnModel m;
    m.config = config;
    m.skeleton = build_skeleton(config.joints);
    m.adjacency = build_adjacency(m.skeleton, config.pooled_frames());
    Rng rng = make_rng(seed, 0x5eed);
    const std::size_t D = config.dim;
    m.embed = Linear::init(rng, 2, D);
    m.joint_embed = randn({config.joints, D}, rng, 0.02, true);
    m.proxy_tokens = randn({config.pooled_frames(), D}, rng, 0.02, true);
    m.bank = init_bank(seed, config.prototypes, config.joints, D);
    const auto order = m.skeleton.dfs_order();
    for (std::size_t l = 0; l < config.layers; ++l) {
      Layer layer;
      layer.stream1 = Stream::init(rng, config.streams.first, true, D, config.heads, config.state_dim, order);
      layer.stream2 = Stream::init(rng, config.streams.second, false, D, config.heads, config.state_dim, order);
      layer.gate = StreamGate::init(rng, D);
      layer.retrieval = CrossAttention::init(rng, D, config.heads);
      layer.propagation = CrossAttention::init(rng, D, config.heads);
      layer.memory = MemoryPath::init(rng, D);
      m.layers.push_back(std::move(layer));
    }
    m.final_norm = LayerNorm::init(D);
    m.head_hidden = Linear::init(rng, D, D);
    m.head_out = Linear::init(rng, D, 3);
    // Start near the mean pose: small final-stage weights.
    for (double& w : m.head_out.weight.mutable_data()) w *= 0.1;
    m.pose_offset = Tensor::zeros({config.joints, 3}, true);
    return m;
  }

  // Every learnable tensor in a fixed order, tagged with its group. Parts
  // switched off by the toggles are still listed so checkpoints line up.
  ParameterList parameters() const {
    ParameterList out;
    embed.collect(out, "embed", "embed");
    append(out, "joint_embed", "embed", joint_embed);
    append(out, "proxy_tokens", "proxy", proxy_tokens);
    bank.collect(out, "bank");
    for (std::size_t l = 0; l < layers.size(); ++l) layers[l].collect(out, "layer" + std::to_string(l));
    final_norm.collect(out, "final_norm");
    head_hidden.collect(out, "head.hidden", "head");
    head_out.collect(out, "head.out", "head");
    append(out, "head.pose_offset", "head", pose_offset);
    return out;
  }

  // Parameters that receive gradient under the current toggles.
  ParameterList active_parameters() const {
    const Toggles& t = config.toggles;
    ParameterList out;
    for (auto& p : parameters()) {
      const std::string& n = p.name;
      auto has = [&](std::string_view s) { return n.find(s) != std::string::npos; };
      if (!t.proxy && (has(".proxy_") || n == "proxy_tokens")) continue;
      if (!t.dual_stream && (has(".stream1.") || has(".stream_gate."))) continue;
      if (!t.enhanced && (has(".stream_gate.") || has(".enhance_") || has(".alpha_param"))) continue;
      if (!t.pattern_reuse && (n.rfind("bank.", 0) == 0 || has(".memory."))) continue;
      if (t.pattern_reuse && layers.size() == 1 && has(".gate.")) continue;  // no previous state to smooth
      out.push_back(std::move(p));
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.numel();
    return n;
  }

  Tensor regression_head(const Tensor& x) const { return add(head_out(gelu(head_hidden(x))), pose_offset); }

  // Starts the head at a reference pose (root-relative millimetres, J x 3),
  // typically the training mean, so early steps learn residuals.
  void set_reference_pose(const std::vector<double>& pose_mm) {
    if (pose_mm.size() != config.joints * 3) throw DimensionError("set_reference_pose: expected J x 3 values");
    auto w = pose_offset.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = pose_mm[i] / config.output_scale;
  }

  Tensor unpool(const Tensor& pooled) const {
    const std::size_t T = config.frames, Tp = pooled.shape()[1];
    std::vector<std::size_t> bins(T);
    for (std::size_t t = 0; t < T; ++t) bins[t] = adaptive_bin_of(t, T, Tp);
    return index_select(pooled, 1, bins);
  }

  // Input [B, T, J, 2] (normalized 2D) -> root-relative 3D in millimetres.
  Tensor forward(const Tensor& input, const ForwardOptions& opts = {}) const {
    const ModelConfig& c = config;
    if (input.dim() != 4 || input.shape()[1] != c.frames || input.shape()[2] != c.joints || input.shape()[3] != 2) {
      throw DimensionError("forward: input " + shape_str(input.shape()) + " does not match config [B, " +
                           std::to_string(c.frames) + ", " + std::to_string(c.joints) + ", 2]");
    }
    const Toggles& tg = c.toggles;
    const std::size_t Tp = c.pooled_frames();
    const ForwardOverrides& ov = opts.overrides;

    Tensor x = add(embed(input), joint_embed);
    Tensor proxies;
    if (tg.proxy) proxies = add(adaptive_avg_pool(x, 1, Tp), reshape(proxy_tokens, {Tp, 1, c.dim}));
    MemoryState state = opts.initial_state;

    for (const Layer& layer : layers) {
      Tensor xl;
      const Tensor x2 = layer.stream2(x);
      if (tg.dual_stream) {
        const Tensor x1 = layer.stream1(x);
        if (!tg.enhanced) {
          xl = scale(add(x1, x2), 0.5);
        } else if (ov.stream_alpha) {
          xl = add(scale(x1, *ov.stream_alpha), scale(x2, 1.0 - *ov.stream_alpha));
        } else {
          xl = fuse_streams(x1, x2, layer.gate);
        }
      } else {
        xl = x2;
      }

      if (tg.proxy) proxies = layer.retrieval(proxies, xl);

      if (tg.pattern_reuse) {
        const MemoryPath& mp = layer.memory;
        const Tensor pooled = tg.proxy ? proxies : adaptive_avg_pool(xl, 1, Tp);
        Tensor enhanced = pooled;
        if (tg.enhanced) {
          const Tensor alpha = ov.alpha ? Tensor::scalar(*ov.alpha) : sigmoid(mp.alpha_param);
          enhanced = dual_path_enhance(pooled, adjacency.spatial, adjacency.temporal, alpha, mp.spatial, mp.temporal);
        }
        const Retrieval r = retrieve(bank, enhanced);
        Tensor s_new;
        if (!state) {
          s_new = r.pattern;
        } else if (ov.gate) {
          s_new = smooth_with_gate(r.pattern, state, Tensor::scalar(*ov.gate));
        } else {
          s_new = smooth(bank, r.descriptor, r.pattern, state);
        }
        const Tensor lambda = ov.lambda ? Tensor::scalar(*ov.lambda) : sigmoid(mp.lambda_param);
        const Tensor fused = fuse_adjacency(adjacency.spatial, s_new, lambda);
        const Tensor x_mem = memory_gconv(enhanced, fused, mp.fused);
        if (opts.trace) opts.trace->push_back({state, s_new, r.weights, fused});
        state = s_new;
        if (tg.proxy) {
          proxies = add(proxies, x_mem);
        } else {
          xl = add(xl, unpool(x_mem));
        }
      }

      if (tg.proxy) xl = layer.propagation(xl, proxies);
      x = xl;
    }
    if (opts.final_state) *opts.final_state = state;

    const Tensor raw = scale(regression_head(final_norm(x)), c.output_scale);
    return sub(raw, slice(raw, 2, 0, 1));
  }
};

// ---------------------------------------------------------------------------
// Objective.

struct LossParts {
  Tensor total;
  Tensor position;
  Tensor velocity;
};

// L = L_pos + lambda_v * L_vel over [B, T, J, 3] poses.
inline LossParts pose_loss(const Tensor& pred, const Tensor& target, double lambda_v) {
  if (pred.shape() != target.shape() || pred.dim() < 3 || pred.shape().back() != 3) {
    throw DimensionError("loss: prediction " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
  }
  const long time_axis = static_cast<long>(pred.dim()) - 3;
  const std::size_t T = pred.shape()[static_cast<std::size_t>(time_axis)];
  LossParts parts;
  const Tensor err = sub(pred, target);
  parts.position = mean_all(norm_last(err));
  if (T < 2) {
    parts.velocity = Tensor::scalar(0.0);
  } else {
    const Tensor vel = sub(slice(err, time_axis, 1, T - 1), slice(err, time_axis, 0, T - 1));
    parts.velocity = mean_all(norm_last(vel));
  }
  parts.total = add(parts.position, scale(parts.velocity, lambda_v));
  return parts;
}

inline Tensor loss(const Tensor& pred, const Tensor& target, double lambda_v) {
  return pose_loss(pred, target, lambda_v).total;
}

}  // namespace prgcn
