#pragma once

// Run configuration files. Every object is read strictly: unknown keys are
// rejected with their path, missing keys keep the defaults below.

#include <cstdint>
#include <cstdlib>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "prgcn/model.hpp"
#include "prgcn/optim.hpp"

namespace prgcn {

using json = nlohmann::json;

inline constexpr int kConfigSchemaVersion = 1;

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct TrainSettings {
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  double lr_decay = 0.99;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::size_t probe_size = 8;

  AdamWOptions adamw() const { return {lr, beta1, beta2, eps, weight_decay}; }
  bool operator==(const TrainSettings&) const = default;
};

struct DataSettings {
  std::string train_path;  // empty: synthesize
  std::string eval_path;
  std::size_t train_count = 200;
  std::size_t eval_count = 40;
  double pixel_noise = 0.01;

  bool operator==(const DataSettings&) const = default;
};

struct RunConfig {
  int schema_version = kConfigSchemaVersion;
  std::uint64_t seed = 0;
  ModelConfig model{};
  TrainSettings train{};
  DataSettings data{};
  std::string output_dir = "run";
};

namespace detail {

// Reads the keys of one object, remembering which were consumed so leftovers
// can be reported.
class StrictObject {
 public:
  StrictObject(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  template <class T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) throw ConfigError("expected a boolean");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!it->is_string()) throw ConfigError("expected a string");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) throw ConfigError("expected a number");
      } else if constexpr (std::is_integral_v<T>) {
        if (!it->is_number_integer()) throw ConfigError("expected an integer");
        if (std::is_unsigned_v<T> && it->template get<long long>() < 0) throw ConfigError("expected a non-negative integer");
      }
      out = it->template get<T>();
    } catch (const ConfigError& e) {
      throw ConfigError(where(key) + ": " + e.what());
    } catch (const json::exception& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  void object(const char* key, const std::function<void(StrictObject&)>& fn) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    StrictObject child(*it, where(key));
    fn(child);
    child.finish();
  }

  bool has(const char* key) const { return j_.contains(key); }
  std::string where(const std::string& key = "") const {
    if (key.empty()) return path_.empty() ? "<root>" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError(where(k) + ": unknown key");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline json model_config_to_json(const ModelConfig& c) {
  return {{"frames", c.frames},
          {"joints", c.joints},
          {"dim", c.dim},
          {"heads", c.heads},
          {"layers", c.layers},
          {"prototypes", c.prototypes},
          {"compression_ratio", c.compression_ratio},
          {"state_dim", c.state_dim},
          {"stream_config", stream_config_name(c.streams)},
          {"toggles",
           {{"proxy", c.toggles.proxy},
            {"dual_stream", c.toggles.dual_stream},
            {"pattern_reuse", c.toggles.pattern_reuse},
            {"enhanced", c.toggles.enhanced}}},
          {"lambda_v", c.lambda_v},
          {"output_scale", c.output_scale}};
}

inline void read_model_config(detail::StrictObject& o, ModelConfig& c) {
  o.read("frames", c.frames);
  o.read("joints", c.joints);
  o.read("dim", c.dim);
  o.read("heads", c.heads);
  o.read("layers", c.layers);
  o.read("prototypes", c.prototypes);
  o.read("compression_ratio", c.compression_ratio);
  o.read("state_dim", c.state_dim);
  std::string streams;
  o.read("stream_config", streams);
  if (!streams.empty()) {
    try {
      c.streams = parse_stream_config(streams);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(o.where("stream_config") + ": " + e.what());
    }
  }
  o.object("toggles", [&](detail::StrictObject& t) {
    t.read("proxy", c.toggles.proxy);
    t.read("dual_stream", c.toggles.dual_stream);
    t.read("pattern_reuse", c.toggles.pattern_reuse);
    t.read("enhanced", c.toggles.enhanced);
  });
  o.read("lambda_v", c.lambda_v);
  o.read("output_scale", c.output_scale);
}

inline ModelConfig model_config_from_json(const json& j, const std::string& path = "model") {
  ModelConfig c;
  detail::StrictObject o(j, path);
  read_model_config(o, c);
  o.finish();
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return c;
}

inline json run_config_to_json(const RunConfig& r) {
  const auto& t = r.train;
  const auto& d = r.data;
  return {{"schema_version", r.schema_version},
          {"seed", r.seed},
          {"model", model_config_to_json(r.model)},
          {"train",
           {{"epochs", t.epochs},
            {"batch_size", t.batch_size},
            {"lr", t.lr},
            {"lr_decay", t.lr_decay},
            {"beta1", t.beta1},
            {"beta2", t.beta2},
            {"eps", t.eps},
            {"weight_decay", t.weight_decay},
            {"probe_size", t.probe_size}}},
          {"data",
           {{"train_path", d.train_path},
            {"eval_path", d.eval_path},
            {"train_count", d.train_count},
            {"eval_count", d.eval_count},
            {"pixel_noise", d.pixel_noise}}},
          {"output_dir", r.output_dir}};
}

// Parses a run configuration. PRGCN_SEED, when set, replaces the seed.
inline RunConfig run_config_from_json(const json& j, bool apply_env = true) {
  RunConfig r;
  detail::StrictObject o(j, "");
  if (!o.has("schema_version")) throw ConfigError("schema_version: required key missing");
  o.read("schema_version", r.schema_version);
  if (r.schema_version != kConfigSchemaVersion) {
    throw ConfigError("schema_version: unsupported version " + std::to_string(r.schema_version) + " (expected " +
                      std::to_string(kConfigSchemaVersion) + ")");
  }
  o.read("seed", r.seed);
  o.object("model", [&](detail::StrictObject& m) { read_model_config(m, r.model); });
  o.object("train", [&](detail::StrictObject& t) {
    t.read("epochs", r.train.epochs);
    t.read("batch_size", r.train.batch_size);
    t.read("lr", r.train.lr);
    t.read("lr_decay", r.train.lr_decay);
    t.read("beta1", r.train.beta1);
    t.read("beta2", r.train.beta2);
    t.read("eps", r.train.eps);
    t.read("weight_decay", r.train.weight_decay);
    t.read("probe_size", r.train.probe_size);
  });
  o.object("data", [&](detail::StrictObject& d) {
    d.read("train_path", r.data.train_path);
    d.read("eval_path", r.data.eval_path);
    d.read("train_count", r.data.train_count);
    d.read("eval_count", r.data.eval_count);
    d.read("pixel_noise", r.data.pixel_noise);
  });
  o.read("output_dir", r.output_dir);
  o.finish();

  try {
    r.model.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  if (r.train.batch_size < 1) throw ConfigError("train.batch_size: must be >= 1");
  if (!(r.train.lr >= 0.0)) throw ConfigError("train.lr: must be >= 0");
  if (r.data.train_path.empty() && r.data.train_count < 1) throw ConfigError("data.train_count: must be >= 1");
  if (!(r.data.pixel_noise >= 0.0)) throw ConfigError("data.pixel_noise: must be >= 0");

  if (apply_env) {
    if (const char* env = std::getenv("PRGCN_SEED"); env && *env) {
      char* end = nullptr;
      const unsigned long long v = std::strtoull(env, &end, 10);
      if (*end != '\0') throw ConfigError(std::string("PRGCN_SEED: not an unsigned integer: ") + env);
      r.seed = v;
    }
  }
  return r;
}

}  // namespace prgcn
