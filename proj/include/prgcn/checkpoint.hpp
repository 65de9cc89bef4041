#pragma once

// Checkpoints: a JSON manifest (config, normalization, parameter table) next
// to a flat little-endian float64 blob holding every parameter in order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "prgcn/config.hpp"
#include "prgcn/model.hpp"
#include "prgcn/skeleton.hpp"

namespace prgcn {

inline constexpr const char* kCheckpointFormat = "prgcn-checkpoint";
inline constexpr int kCheckpointVersion = 1;

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  PrgcnModel model;
  NormalizationStats stats;
  std::uint64_t seed = 0;
  std::size_t batch_size = 8;
};

inline json stats_to_json(const NormalizationStats& s) {
  std::vector<int> degenerate(s.degenerate.begin(), s.degenerate.end());
  return {{"joints", s.joints}, {"mean", s.mean}, {"stddev", s.stddev}, {"degenerate", degenerate}};
}

inline NormalizationStats stats_from_json(const json& j) {
  NormalizationStats s;
  s.joints = j.at("joints").get<std::size_t>();
  s.mean = j.at("mean").get<std::vector<double>>();
  s.stddev = j.at("stddev").get<std::vector<double>>();
  for (int d : j.at("degenerate").get<std::vector<int>>()) s.degenerate.push_back(d != 0);
  if (s.mean.size() != s.joints * 2 || s.stddev.size() != s.joints * 2 || s.degenerate.size() != s.joints * 2) {
    throw CheckpointError("checkpoint: normalization arrays do not match joint count");
  }
  return s;
}

inline std::filesystem::path blob_path_for(const std::filesystem::path& manifest) {
  std::filesystem::path p = manifest;
  p.replace_extension(".bin");
  return p;
}

inline void save_checkpoint(const std::string& manifest_path, const Checkpoint& ck) {
  static_assert(std::endian::native == std::endian::little, "checkpoint blobs are little-endian");
  const std::filesystem::path manifest(manifest_path);
  const std::filesystem::path blob = blob_path_for(manifest);
  json params = json::array();
  std::vector<double> flat;
  for (const auto& p : ck.model.parameters()) {
    params.push_back({{"name", p.name}, {"group", p.group}, {"shape", p.tensor.shape()}, {"offset", flat.size()}});
    flat.insert(flat.end(), p.tensor.data().begin(), p.tensor.data().end());
  }
  const json m = {{"format", kCheckpointFormat},
                  {"version", kCheckpointVersion},
                  {"seed", ck.seed},
                  {"batch_size", ck.batch_size},
                  {"model", model_config_to_json(ck.model.config)},
                  {"normalization", stats_to_json(ck.stats)},
                  {"parameter_count", flat.size()},
                  {"parameters", params},
                  {"blob", blob.filename().string()}};
  {
    std::ofstream out(blob, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("checkpoint: cannot write " + blob.string());
    out.write(reinterpret_cast<const char*>(flat.data()), static_cast<std::streamsize>(flat.size() * sizeof(double)));
    if (!out) throw CheckpointError("checkpoint: write failed for " + blob.string());
  }
  std::ofstream out(manifest, std::ios::trunc);
  if (!out) throw CheckpointError("checkpoint: cannot write " + manifest.string());
  out << m.dump(2) << '\n';
}

inline Checkpoint load_checkpoint(const std::string& manifest_path) {
  const std::filesystem::path manifest(manifest_path);
  std::ifstream in(manifest);
  if (!in) throw CheckpointError("checkpoint: cannot open " + manifest.string());
  json m;
  try {
    m = json::parse(in);
  } catch (const json::exception& e) {
    throw CheckpointError("checkpoint: malformed manifest " + manifest.string() + ": " + e.what());
  }
  if (m.value("format", std::string()) != kCheckpointFormat) throw CheckpointError("checkpoint: not a checkpoint manifest");
  if (m.value("version", 0) != kCheckpointVersion) {
    throw CheckpointError("checkpoint: unsupported version " + m.value("version", json()).dump());
  }
  Checkpoint ck;
  try {
    ck.seed = m.at("seed").get<std::uint64_t>();
    ck.batch_size = m.at("batch_size").get<std::size_t>();
    ck.model = PrgcnModel::init(model_config_from_json(m.at("model")), ck.seed);
    ck.stats = stats_from_json(m.at("normalization"));
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }
  if (ck.stats.joints != ck.model.config.joints) throw CheckpointError("checkpoint: normalization/config joint mismatch");

  const std::filesystem::path blob = manifest.parent_path() / m.at("blob").get<std::string>();
  std::ifstream bin(blob, std::ios::binary);
  if (!bin) throw CheckpointError("checkpoint: cannot open " + blob.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  const std::size_t expected = m.at("parameter_count").get<std::size_t>();
  if (bytes.size() != expected * sizeof(double)) {
    throw CheckpointError("checkpoint: blob holds " + std::to_string(bytes.size()) + " bytes, manifest expects " +
                          std::to_string(expected * sizeof(double)));
  }
  std::vector<double> flat(expected);
  std::memcpy(flat.data(), bytes.data(), bytes.size());

  const auto& table = m.at("parameters");
  auto params = ck.model.parameters();
  if (table.size() != params.size()) {
    throw CheckpointError("checkpoint: " + std::to_string(table.size()) + " stored parameters, config builds " +
                          std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = table[i];
    Tensor t = params[i].tensor;
    if (e.at("name").get<std::string>() != params[i].name || e.at("shape").get<Shape>() != t.shape()) {
      throw CheckpointError("checkpoint: parameter " + std::to_string(i) + " is " + e.at("name").get<std::string>() +
                            " " + e.at("shape").dump() + ", config expects " + params[i].name + " " +
                            shape_str(t.shape()));
    }
    const std::size_t off = e.at("offset").get<std::size_t>();
    if (off + t.numel() > flat.size()) throw CheckpointError("checkpoint: parameter " + params[i].name + " out of range");
    std::copy_n(flat.begin() + static_cast<long>(off), t.numel(), t.mutable_data().begin());
  }
  return ck;
}

}  // namespace prgcn
