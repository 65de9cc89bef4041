#pragma once

// On-disk datasets: a directory of per-sequence files plus manifest.json
// recording how they were produced.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "prgcn/sequence_io.hpp"
#include "prgcn/skeleton.hpp"
#include "prgcn/train.hpp"

namespace prgcn {

inline constexpr const char* kDatasetFormat = "prgcn-dataset";
inline constexpr int kDatasetVersion = 1;
inline constexpr const char* kManifestName = "manifest.json";

struct GenerateRequest {
  std::uint64_t seed = 0;
  std::uint64_t first_index = 0;  // kEvalSeedOffset reproduces a training run's eval split
  std::size_t count = 1;
  std::size_t frames = 27;
  std::size_t joints = 17;
  std::optional<MotionKind> motion;  // empty: cycle through all kinds
  double pixel_noise = 0.01;
};

inline std::vector<PoseSequence> generate_sequences(const GenerateRequest& r) {
  if (!r.motion) return synthesize_split(r.seed, r.first_index, r.count, r.frames, r.joints, r.pixel_noise);
  const Skeleton sk = build_skeleton(r.joints);
  const BoneConstraints bones = default_bone_lengths(sk);
  GeneratorOptions opts;
  opts.pixel_noise = r.pixel_noise;
  std::vector<PoseSequence> out;
  for (std::size_t i = 0; i < r.count; ++i) {
    out.push_back(generate_synthetic_sequence(derive_seed(r.seed, r.first_index + i), sk, bones, r.frames, *r.motion, opts));
  }
  return out;
}

inline std::string sequence_file_name(std::size_t i, SequenceFormat format) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "seq_%05zu.%s", i, format == SequenceFormat::csv ? "csv" : "json");
  return buf;
}

// Writes one file per sequence and the manifest. `generator` is stored
// verbatim; pass null for data that did not come from the generator.
inline void write_dataset(const std::string& dir, const std::vector<PoseSequence>& seqs, SequenceFormat format,
                          const nlohmann::json& generator) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create directory '" + dir + "': " + ec.message());
  nlohmann::json files = nlohmann::json::array();
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const std::string name = sequence_file_name(i, format);
    save_sequence((std::filesystem::path(dir) / name).string(), seqs[i], format);
    files.push_back(name);
  }
  const std::size_t frames = seqs.empty() ? 0 : seqs.front().frames;
  const nlohmann::json manifest = {{"format", kDatasetFormat},
                                   {"version", kDatasetVersion},
                                   {"count", seqs.size()},
                                   {"frames", frames},
                                   {"joints", seqs.empty() ? 0 : seqs.front().joints},
                                   {"file_format", format == SequenceFormat::csv ? "csv" : "json"},
                                   {"velocity_loss_applicable", frames >= 2},
                                   {"generator", generator},
                                   {"files", files}};
  detail::write_file((std::filesystem::path(dir) / kManifestName).string(), manifest.dump(2) + "\n");
}

inline SequenceFormat format_from_extension(const std::filesystem::path& p) {
  return p.extension() == ".csv" ? SequenceFormat::csv : SequenceFormat::json;
}

// Accepts a dataset directory, its manifest, or a single JSON/CSV sequence file.
inline std::vector<PoseSequence> load_dataset(const std::string& path) {
  namespace fs = std::filesystem;
  fs::path p(path);
  if (fs::is_directory(p)) p /= kManifestName;
  if (!fs::exists(p)) throw std::runtime_error("dataset '" + path + "' does not exist");
  if (p.extension() == ".json") {
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(detail::read_file(p.string()));
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(p.string() + ": invalid JSON: " + e.what());
    }
    if (doc.is_object() && doc.value("format", std::string()) == kDatasetFormat) {
      if (doc.value("version", 0) != kDatasetVersion) throw ParseError(p.string() + ": unsupported dataset version");
      std::vector<PoseSequence> out;
      for (const auto& f : doc.at("files")) {
        const fs::path file = p.parent_path() / f.get<std::string>();
        auto part = load_sequences(file.string(), format_from_extension(file));
        out.insert(out.end(), part.begin(), part.end());
      }
      return out;
    }
  }
  return load_sequences(p.string(), format_from_extension(p));
}

}  // namespace prgcn
