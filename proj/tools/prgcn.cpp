// prgcn: data generation, training, evaluation and diagnostics.
//
// Exit codes: 0 success, 1 invalid input or configuration, 2 numerical
// failure (non-finite values, divergence, gradient check failure).

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "prgcn/bench.hpp"
#include "prgcn/checkpoint.hpp"
#include "prgcn/config.hpp"
#include "prgcn/dataset_io.hpp"
#include "prgcn/macs.hpp"
#include "prgcn/train.hpp"

namespace fs = std::filesystem;
using namespace prgcn;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInvalid = 1;
constexpr int kExitNumerical = 2;

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create directory '" + dir.string() + "': " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) { detail::write_file(path.string(), text); }

std::vector<std::size_t> parse_size_list(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t pos = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != item.size() || item.empty() || v == 0) throw std::invalid_argument("expected positive integers, got '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw std::invalid_argument("empty list");
  return out;
}

// ---------------------------------------------------------------------------
// data-gen

struct DataGenArgs {
  std::uint64_t seed = 0;
  std::size_t count = 1;
  std::size_t frames = 27;
  std::size_t joints = 17;
  std::string motion = "mixed";
  double noise = 0.01;
  bool eval_split = false;
  std::string format = "json";
  std::string out;
};

int cmd_data_gen(const DataGenArgs& a) {
  GenerateRequest r;
  r.seed = a.seed;
  r.first_index = a.eval_split ? kEvalSeedOffset : 0;
  r.count = a.count;
  r.frames = a.frames;
  r.joints = a.joints;
  if (a.motion != "mixed") r.motion = parse_motion_kind(a.motion);
  r.pixel_noise = a.noise;
  const SequenceFormat format = parse_sequence_format(a.format);
  const auto seqs = generate_sequences(r);
  const nlohmann::json generator = {{"seed", a.seed},        {"first_index", r.first_index}, {"count", a.count},
                                    {"frames", a.frames},    {"joints", a.joints},           {"motion", a.motion},
                                    {"pixel_noise", a.noise}};
  write_dataset(a.out, seqs, format, generator);
  std::printf("wrote %zu sequences (%zu frames, %zu joints) to %s\n", seqs.size(), a.frames, a.joints, a.out.c_str());
  if (a.frames < 2) std::printf("note: single-frame clips, the velocity loss term is inapplicable\n");
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train

Dataset load_run_data(const RunConfig& rc) {
  Dataset d;
  const Dataset synth = make_synthetic_dataset(rc.seed, rc.data.train_path.empty() ? rc.data.train_count : 0,
                                               rc.data.eval_path.empty() ? rc.data.eval_count : 0, rc.model.frames,
                                               rc.model.joints, rc.data.pixel_noise);
  d.train = rc.data.train_path.empty() ? synth.train : load_dataset(rc.data.train_path);
  d.eval = rc.data.eval_path.empty() ? synth.eval : load_dataset(rc.data.eval_path);
  return d;
}

int cmd_train(const std::string& config_path, const std::string& out_override) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_file(config_path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(config_path + ": invalid JSON: " + e.what());
  }
  RunConfig rc = run_config_from_json(j);
  if (!out_override.empty()) rc.output_dir = out_override;
  const fs::path out(rc.output_dir);
  ensure_dir(out);

  const Dataset data = load_run_data(rc);
  const double baseline = constant_pose_baseline(data.train, data.eval);
  std::printf("train %zu / eval %zu sequences, seed %llu, constant-pose baseline %.3f mm\n", data.train.size(),
              data.eval.size(), static_cast<unsigned long long>(rc.seed), baseline);
  std::printf("%6s %12s %12s %12s %12s %10s\n", "epoch", "train_loss", "train_mpjpe", "eval_mpjpe", "eval_pmpjpe",
              "entropy");
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult res = train(rc.model, rc.train, data, rc.seed, [](const EpochLog& e) {
    std::printf("%6zu %12.4f %12.4f %12.4f %12.4f %10.5f\n", e.epoch, e.train_loss, e.train_mpjpe, e.eval_mpjpe,
                e.eval_pmpjpe, e.retrieval_entropy);
    std::fflush(stdout);
  });
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  save_checkpoint((out / "checkpoint.json").string(), {res.model, res.stats, rc.seed, rc.train.batch_size});
  write_text(out / "epochs.csv", epoch_log_csv(res.log));
  write_text(out / "config.json", run_config_to_json(rc).dump(2) + "\n");
  write_dataset((out / "eval_split").string(), data.eval, SequenceFormat::json, nullptr);
  std::printf("done in %.1f s; wrote %s/{checkpoint.json,checkpoint.bin,epochs.csv,config.json,eval_split/}\n", secs,
              rc.output_dir.c_str());
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval

nlohmann::json report_to_json(const MetricReport& r) {
  nlohmann::json per = nlohmann::json::array();
  for (std::size_t i = 0; i < r.per_sequence.size(); ++i) {
    per.push_back({{"index", i}, {"mpjpe_mm", r.per_sequence[i].mpjpe_mm}, {"p_mpjpe_mm", r.per_sequence[i].p_mpjpe_mm}});
  }
  return {{"mpjpe_mm", r.mpjpe_mm},
          {"p_mpjpe_mm", r.p_mpjpe_mm},
          {"pck150_pct", r.pck150_pct},
          {"auc_pct", r.auc_pct},
          {"degenerate_alignments", r.degenerate_alignments},
          {"per_sequence", per}};
}

int cmd_eval(const std::string& checkpoint, const std::string& data_path, const std::string& report_path, bool oracle) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const auto seqs = load_dataset(data_path);
  if (seqs.empty()) throw std::invalid_argument("eval: dataset is empty");
  check_against_config(ck.model.config, seqs, "eval:");
  const auto targets = targets_of(seqs);
  const auto preds = oracle ? targets : predict(ck.model, ck.stats, seqs, ck.batch_size);
  const MetricReport rep = evaluate_poses(preds, targets, ck.model.config.joints);

  std::printf("%-22s %14s\n", "metric", "value");
  std::printf("%-22s %14.4f\n", "MPJPE (mm)", rep.mpjpe_mm);
  std::printf("%-22s %14.4f\n", "P-MPJPE (mm)", rep.p_mpjpe_mm);
  std::printf("%-22s %14.4f\n", "PCK@150mm (%)", rep.pck150_pct);
  std::printf("%-22s %14.4f\n", "AUC 0-150mm (%)", rep.auc_pct);
  std::printf("%-22s %14zu\n", "sequences", seqs.size());
  if (rep.degenerate_alignments > 0) std::printf("%-22s %14zu\n", "degenerate alignments", rep.degenerate_alignments);
  nlohmann::json j = report_to_json(rep);
  j["oracle"] = oracle;
  if (!report_path.empty()) write_text(report_path, j.dump(2) + "\n");
  return kExitOk;
}

// ---------------------------------------------------------------------------
// gradcheck

int cmd_gradcheck(const std::string& scale, std::uint64_t seed, double tolerance) {
  if (scale != "tiny") throw std::invalid_argument("gradcheck: unknown scale '" + scale + "' (expected tiny)");
  ModelConfig c = tiny_config();
  // Unit output scale keeps the loss O(1) so differences are well conditioned.
  c.output_scale = 1.0;
  const PrgcnModel m = PrgcnModel::init(c, seed);
  Rng rng = make_rng(seed, 0x9c);
  const Tensor x = randn({2, c.frames, c.joints, 2}, rng);
  const Tensor y = randn({2, c.frames, c.joints, 3}, rng);
  const auto groups = gradcheck(m.active_parameters(), [&] { return loss(m.forward(x), y, c.lambda_v); });
  bool ok = true;
  std::printf("%-16s %10s %14s  %s\n", "group", "entries", "max_rel_error", "worst parameter");
  for (const auto& g : groups) {
    const bool pass = g.max_rel_error < tolerance;
    ok = ok && pass;
    std::printf("%-16s %10zu %14.3e  %s%s\n", g.group.c_str(), g.entries, g.max_rel_error, g.worst_parameter.c_str(),
                pass ? "" : "  FAIL");
  }
  std::printf("%s (tolerance %.1e)\n", ok ? "gradcheck passed" : "gradcheck FAILED", tolerance);
  return ok ? kExitOk : kExitNumerical;
}

// ---------------------------------------------------------------------------
// bench

int cmd_bench(const std::string& block, const std::string& sweep, const BenchOptions& opts, const std::string& out_path) {
  if (block != "attn" && block != "ssm") throw std::invalid_argument("bench: unknown block '" + block + "' (expected attn|ssm)");
  const auto lengths = parse_size_list(sweep);
  std::string csv = "block,T,macs,mixing_macs,wall_seconds,mixing_wall_seconds\n";
  for (std::size_t T : lengths) {
    const BenchRow r = bench_temporal_block(block, T, opts);
    char buf[200];
    std::snprintf(buf, sizeof buf, "%s,%zu,%.0f,%.0f,%.6f,%.6f\n", r.block.c_str(), r.frames, r.macs, r.mixing_macs,
                  r.wall_seconds, r.mixing_wall_seconds);
    csv += buf;
  }
  if (out_path.empty()) {
    std::fputs(csv.c_str(), stdout);
  } else {
    write_text(out_path, csv);
    std::printf("wrote %s\n", out_path.c_str());
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// proto-export

int cmd_proto_export(const std::string& checkpoint, const std::string& out_dir) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const Tensor& protos = ck.model.bank.prototypes;
  const std::size_t K = protos.shape()[0], J = protos.shape()[1];
  const fs::path out(out_dir);
  ensure_dir(out);
  const auto v = protos.data();
  nlohmann::json files = nlohmann::json::array();
  for (std::size_t k = 0; k < K; ++k) {
    char name[32];
    std::snprintf(name, sizeof name, "prototype_%02zu.csv", k);
    std::string csv;
    for (std::size_t r = 0; r < J; ++r) {
      for (std::size_t c = 0; c < J; ++c) {
        csv += detail::fmt_double(v[(k * J + r) * J + c]);
        csv += c + 1 < J ? "," : "\n";
      }
    }
    write_text(out / name, csv);
    files.push_back(name);
  }
  nlohmann::json joints = nlohmann::json::array();
  for (const auto& n : ck.model.skeleton.joint_names) joints.push_back(n);
  const nlohmann::json manifest = {{"prototypes", K},   {"rows", J},           {"cols", J},
                                   {"joints", joints},  {"files", files},      {"checkpoint", checkpoint},
                                   {"layout", "row r, column c holds the learned affinity from joint r to joint c"}};
  write_text(out / "manifest.json", manifest.dump(2) + "\n");
  std::printf("wrote %zu prototype matrices (%zux%zu) to %s\n", K, J, J, out_dir.c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Proxy-token graph-memory 2D-to-3D pose lifting"};
  app.require_subcommand(1);

  DataGenArgs dg;
  auto* gen = app.add_subcommand("data-gen", "Generate synthetic 2D/3D pose sequences");
  gen->add_option("--seed", dg.seed, "Generator seed");
  gen->add_option("--count", dg.count, "Number of sequences")->check(CLI::PositiveNumber);
  gen->add_option("--frames", dg.frames, "Frames per sequence")->check(CLI::PositiveNumber);
  gen->add_option("--joints", dg.joints, "Joints per pose")->check(CLI::PositiveNumber);
  gen->add_option("--motion", dg.motion, "walk|sit|reach|idle|mixed");
  gen->add_option("--noise", dg.noise, "Stddev of 2D noise (normalized image units)")->check(CLI::NonNegativeNumber);
  gen->add_flag("--eval-split", dg.eval_split, "Use the seed indices of a training run's eval split");
  gen->add_option("--format", dg.format, "json|csv");
  gen->add_option("--out", dg.out, "Output directory")->required();

  std::string config_path, train_out;
  auto* tr = app.add_subcommand("train", "Train from a run configuration");
  tr->add_option("--config", config_path, "Run configuration JSON")->required();
  tr->add_option("--out", train_out, "Output directory (overrides output_dir)");

  std::string ck_path, data_path, report_path;
  bool oracle = false;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  ev->add_option("--checkpoint", ck_path, "Checkpoint manifest")->required();
  ev->add_option("--data", data_path, "Dataset directory, manifest, or sequence file")->required();
  ev->add_option("--report", report_path, "Write the metric report JSON here");
  ev->add_flag("--oracle", oracle, "Replace predictions with the targets");

  std::string gc_scale = "tiny";
  std::uint64_t gc_seed = 0;
  double gc_tol = 1e-4;
  auto* gc = app.add_subcommand("gradcheck", "Compare analytic gradients with central differences");
  gc->add_option("--scale", gc_scale, "Model scale (tiny)");
  gc->add_option("--seed", gc_seed, "Initialization seed");
  gc->add_option("--tolerance", gc_tol, "Maximum relative error per group");

  std::string bench_block, bench_sweep = "64,128,256,512", bench_out;
  BenchOptions bench_opts;
  auto* bn = app.add_subcommand("bench", "MAC counts and wall time of one temporal block over a length sweep");
  bn->add_option("--block", bench_block, "attn|ssm")->required();
  bn->add_option("--sweep", bench_sweep, "Comma-separated sequence lengths");
  bn->add_option("--dim", bench_opts.dim)->check(CLI::PositiveNumber);
  bn->add_option("--heads", bench_opts.heads)->check(CLI::PositiveNumber);
  bn->add_option("--joints", bench_opts.joints)->check(CLI::PositiveNumber);
  bn->add_option("--state-dim", bench_opts.state_dim)->check(CLI::PositiveNumber);
  bn->add_option("--repeats", bench_opts.repeats)->check(CLI::PositiveNumber);
  bn->add_option("--out", bench_out, "Write the CSV here instead of stdout");

  std::string pe_ck, pe_out;
  auto* pe = app.add_subcommand("proto-export", "Export memory prototypes as CSV matrices");
  pe->add_option("--checkpoint", pe_ck, "Checkpoint manifest")->required();
  pe->add_option("--out", pe_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInvalid;
  }

  try {
    if (*gen) return cmd_data_gen(dg);
    if (*tr) return cmd_train(config_path, train_out);
    if (*ev) return cmd_eval(ck_path, data_path, report_path, oracle);
    if (*gc) return cmd_gradcheck(gc_scale, gc_seed, gc_tol);
    if (*bn) return cmd_bench(bench_block, bench_sweep, bench_opts, bench_out);
    if (*pe) return cmd_proto_export(pe_ck, pe_out);
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitInvalid;
  }
  return kExitInvalid;
}
