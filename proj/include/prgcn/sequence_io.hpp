#pragma once

// JSON and CSV serialization of pose sequences.
//
// JSON: {"fps":int,"camera":{"f":num,"cx":num,"cy":num},
//        "frames":[{"p2d":[[x,y]...],"p3d":[[x,y,z]...],"root":[x,y,z]}...]}
// "root" is optional. A file may hold one such object or an array of them.
//
// CSV: one sequence per file.
//   # fps=<int>,f=<num>,cx=<num>,cy=<num>
//   #root,<t>,<x>,<y>,<z>          (optional, one per frame)
//   t,j,u,v,X,Y,Z
//   <one row per (t, j), t-major>

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "prgcn/skeleton.hpp"

namespace prgcn {

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class SequenceFormat { json, csv };

inline SequenceFormat parse_sequence_format(std::string_view s) {
  if (s == "json") return SequenceFormat::json;
  if (s == "csv") return SequenceFormat::csv;
  throw std::invalid_argument("unknown sequence format '" + std::string(s) + "' (expected json|csv)");
}

namespace detail {

inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(std::string_view field, std::size_t line, std::string_view name) {
  double v = 0.0;
  const auto* first = field.data();
  const auto* last = field.data() + field.size();
  const auto res = std::from_chars(first, last, v);
  if (res.ec != std::errc() || res.ptr != last) {
    throw ParseError("line " + std::to_string(line) + ": field '" + std::string(name) + "' is not a number: '" +
                     std::string(field) + "'");
  }
  return v;
}

inline std::size_t parse_index(std::string_view field, std::size_t line, std::string_view name) {
  std::size_t v = 0;
  const auto res = std::from_chars(field.data(), field.data() + field.size(), v);
  if (res.ec != std::errc() || res.ptr != field.data() + field.size()) {
    throw ParseError("line " + std::to_string(line) + ": field '" + std::string(name) + "' is not an index: '" +
                     std::string(field) + "'");
  }
  return v;
}

inline std::vector<std::string_view> split_commas(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t p = s.find(',', start);
    out.push_back(s.substr(start, p == std::string_view::npos ? std::string_view::npos : p - start));
    if (p == std::string_view::npos) break;
    start = p + 1;
  }
  return out;
}

using nlohmann::json;

inline json sequence_to_json(const PoseSequence& s) {
  json frames = json::array();
  for (std::size_t t = 0; t < s.frames; ++t) {
    json p2d = json::array();
    json p3d = json::array();
    for (std::size_t j = 0; j < s.joints; ++j) {
      p2d.push_back({s.p2d(t, j, 0), s.p2d(t, j, 1)});
      p3d.push_back({s.p3d(t, j, 0), s.p3d(t, j, 1), s.p3d(t, j, 2)});
    }
    json frame = {{"p2d", std::move(p2d)}, {"p3d", std::move(p3d)}};
    if (!s.root_position.empty()) {
      frame["root"] = {s.root_position[t * 3], s.root_position[t * 3 + 1], s.root_position[t * 3 + 2]};
    }
    frames.push_back(std::move(frame));
  }
  return {{"fps", s.fps},
          {"camera", {{"f", s.camera.focal}, {"cx", s.camera.cx}, {"cy", s.camera.cy}}},
          {"frames", std::move(frames)}};
}

inline double json_number(const json& j, const std::string& where) {
  if (!j.is_number()) throw ParseError(where + ": expected a number");
  return j.get<double>();
}

inline const json& json_field(const json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw ParseError(where + ": missing field '" + key + "'");
  return j.at(key);
}

inline PoseSequence sequence_from_json(const json& j, const std::string& where) {
  PoseSequence s;
  const json& fps = json_field(j, "fps", where);
  if (!fps.is_number_integer()) throw ParseError(where + ".fps: expected an integer");
  s.fps = fps.get<int>();
  const json& cam = json_field(j, "camera", where);
  s.camera.focal = json_number(json_field(cam, "f", where + ".camera"), where + ".camera.f");
  s.camera.cx = json_number(json_field(cam, "cx", where + ".camera"), where + ".camera.cx");
  s.camera.cy = json_number(json_field(cam, "cy", where + ".camera"), where + ".camera.cy");
  const json& frames = json_field(j, "frames", where);
  if (!frames.is_array() || frames.empty()) throw ParseError(where + ".frames: expected a non-empty array");
  s.frames = frames.size();
  bool has_root = false;
  for (std::size_t t = 0; t < frames.size(); ++t) {
    const std::string fw = where + ".frames[" + std::to_string(t) + "]";
    const json& p2d = json_field(frames[t], "p2d", fw);
    const json& p3d = json_field(frames[t], "p3d", fw);
    if (!p2d.is_array() || !p3d.is_array() || p2d.size() != p3d.size() || p2d.empty()) {
      throw ParseError(fw + ": p2d and p3d must be non-empty arrays of equal length");
    }
    if (t == 0) {
      s.joints = p2d.size();
      has_root = frames[t].contains("root");
    } else if (p2d.size() != s.joints) {
      throw ParseError(fw + ": joint count " + std::to_string(p2d.size()) + " differs from frame 0");
    }
    for (std::size_t jj = 0; jj < s.joints; ++jj) {
      const std::string jw = fw + ".p2d[" + std::to_string(jj) + "]";
      if (!p2d[jj].is_array() || p2d[jj].size() != 2) throw ParseError(jw + ": expected [x, y]");
      if (!p3d[jj].is_array() || p3d[jj].size() != 3) throw ParseError(fw + ".p3d[" + std::to_string(jj) + "]: expected [x, y, z]");
      for (std::size_t c = 0; c < 2; ++c) s.input_2d.push_back(json_number(p2d[jj][c], jw));
      for (std::size_t c = 0; c < 3; ++c) s.target_3d.push_back(json_number(p3d[jj][c], fw + ".p3d"));
    }
    if (frames[t].contains("root") != has_root) throw ParseError(fw + ": 'root' must be present on all frames or none");
    if (has_root) {
      const json& r = frames[t].at("root");
      if (!r.is_array() || r.size() != 3) throw ParseError(fw + ".root: expected [x, y, z]");
      for (std::size_t c = 0; c < 3; ++c) s.root_position.push_back(json_number(r[c], fw + ".root"));
    }
  }
  return s;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << content;
  if (!out) throw std::runtime_error("failed writing '" + path + "'");
}

inline std::string sequence_to_csv(const PoseSequence& s) {
  std::string out = "# fps=" + std::to_string(s.fps) + ",f=" + fmt_double(s.camera.focal) +
                    ",cx=" + fmt_double(s.camera.cx) + ",cy=" + fmt_double(s.camera.cy) + "\n";
  if (!s.root_position.empty()) {
    for (std::size_t t = 0; t < s.frames; ++t) {
      out += "#root," + std::to_string(t) + "," + fmt_double(s.root_position[t * 3]) + "," +
             fmt_double(s.root_position[t * 3 + 1]) + "," + fmt_double(s.root_position[t * 3 + 2]) + "\n";
    }
  }
  out += "t,j,u,v,X,Y,Z\n";
  for (std::size_t t = 0; t < s.frames; ++t) {
    for (std::size_t j = 0; j < s.joints; ++j) {
      out += std::to_string(t) + "," + std::to_string(j) + "," + fmt_double(s.p2d(t, j, 0)) + "," +
             fmt_double(s.p2d(t, j, 1)) + "," + fmt_double(s.p3d(t, j, 0)) + "," + fmt_double(s.p3d(t, j, 1)) + "," +
             fmt_double(s.p3d(t, j, 2)) + "\n";
    }
  }
  return out;
}

inline PoseSequence sequence_from_csv(const std::string& text) {
  PoseSequence s;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  bool header_seen = false, meta_seen = false;
  struct Row {
    std::size_t t, j;
    double v[5];
  };
  std::vector<Row> rows;
  std::vector<std::pair<std::size_t, std::array<double, 3>>> roots;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.rfind("#root,", 0) == 0) {
      const auto f = split_commas(std::string_view(line).substr(6));
      if (f.size() != 4) throw ParseError("line " + std::to_string(lineno) + ": root row expects 4 fields, got " + std::to_string(f.size()));
      roots.push_back({parse_index(f[0], lineno, "t"),
                       {parse_double(f[1], lineno, "x"), parse_double(f[2], lineno, "y"), parse_double(f[3], lineno, "z")}});
      continue;
    }
    if (line[0] == '#') {
      std::string_view meta = std::string_view(line).substr(1);
      while (!meta.empty() && meta.front() == ' ') meta.remove_prefix(1);
      for (auto kv : split_commas(meta)) {
        const auto eq = kv.find('=');
        if (eq == std::string_view::npos) throw ParseError("line " + std::to_string(lineno) + ": malformed metadata '" + std::string(kv) + "'");
        const auto key = kv.substr(0, eq);
        const auto val = kv.substr(eq + 1);
        if (key == "fps") s.fps = static_cast<int>(parse_index(val, lineno, "fps"));
        else if (key == "f") s.camera.focal = parse_double(val, lineno, "f");
        else if (key == "cx") s.camera.cx = parse_double(val, lineno, "cx");
        else if (key == "cy") s.camera.cy = parse_double(val, lineno, "cy");
        else throw ParseError("line " + std::to_string(lineno) + ": unknown metadata key '" + std::string(key) + "'");
      }
      meta_seen = true;
      continue;
    }
    if (!header_seen) {
      if (line != "t,j,u,v,X,Y,Z") throw ParseError("line " + std::to_string(lineno) + ": expected header 't,j,u,v,X,Y,Z'");
      header_seen = true;
      continue;
    }
    const auto f = split_commas(line);
    if (f.size() != 7) {
      throw ParseError("line " + std::to_string(lineno) + ": row has " + std::to_string(f.size()) +
                       " fields, expected 7 (t,j,u,v,X,Y,Z)");
    }
    static constexpr const char* names[] = {"u", "v", "X", "Y", "Z"};
    Row r{parse_index(f[0], lineno, "t"), parse_index(f[1], lineno, "j"), {}};
    for (std::size_t k = 0; k < 5; ++k) r.v[k] = parse_double(f[k + 2], lineno, names[k]);
    rows.push_back(r);
  }
  if (!meta_seen) throw ParseError("missing '# fps=...' metadata line");
  if (!header_seen || rows.empty()) throw ParseError("no data rows");
  std::size_t J = 0;
  while (J < rows.size() && rows[J].t == 0) ++J;
  if (J == 0 || rows.size() % J != 0) {
    throw ParseError("row count " + std::to_string(rows.size()) + " is not a whole number of frames");
  }
  s.joints = J;
  s.frames = rows.size() / J;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].t != i / J || rows[i].j != i % J) {
      throw ParseError("data row " + std::to_string(i + 1) + ": expected (t=" + std::to_string(i / J) + ", j=" +
                       std::to_string(i % J) + ")");
    }
    s.input_2d.push_back(rows[i].v[0]);
    s.input_2d.push_back(rows[i].v[1]);
    for (std::size_t k = 2; k < 5; ++k) s.target_3d.push_back(rows[i].v[k]);
  }
  if (!roots.empty()) {
    if (roots.size() != s.frames) throw ParseError("root rows: expected " + std::to_string(s.frames) + ", got " + std::to_string(roots.size()));
    s.root_position.assign(s.frames * 3, 0.0);
    for (const auto& [t, r] : roots) {
      if (t >= s.frames) throw ParseError("root row for frame " + std::to_string(t) + " out of range");
      for (std::size_t c = 0; c < 3; ++c) s.root_position[t * 3 + c] = r[c];
    }
  }
  return s;
}

}  // namespace detail

inline void save_sequences(const std::string& path, const std::vector<PoseSequence>& seqs, SequenceFormat format) {
  if (format == SequenceFormat::csv) {
    if (seqs.size() != 1) throw std::invalid_argument("save_sequences: CSV holds exactly one sequence");
    detail::write_file(path, detail::sequence_to_csv(seqs.front()));
    return;
  }
  nlohmann::json doc;
  if (seqs.size() == 1) {
    doc = detail::sequence_to_json(seqs.front());
  } else {
    doc = nlohmann::json::array();
    for (const auto& s : seqs) doc.push_back(detail::sequence_to_json(s));
  }
  detail::write_file(path, doc.dump() + "\n");
}

inline void save_sequence(const std::string& path, const PoseSequence& seq, SequenceFormat format) {
  save_sequences(path, {seq}, format);
}

inline std::vector<PoseSequence> parse_sequences(const std::string& text, SequenceFormat format) {
  if (format == SequenceFormat::csv) return {detail::sequence_from_csv(text)};
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("invalid JSON: ") + e.what());
  }
  std::vector<PoseSequence> out;
  if (doc.is_array()) {
    for (std::size_t i = 0; i < doc.size(); ++i) out.push_back(detail::sequence_from_json(doc[i], "[" + std::to_string(i) + "]"));
  } else {
    out.push_back(detail::sequence_from_json(doc, "$"));
  }
  return out;
}

inline std::vector<PoseSequence> load_sequences(const std::string& path, SequenceFormat format) {
  const std::string text = detail::read_file(path);
  try {
    return parse_sequences(text, format);
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what());
  }
}

}  // namespace prgcn
