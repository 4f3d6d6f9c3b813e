// tal: synthetic data, training, inference, evaluation and self-checks.
//
// Exit codes: 0 success, 2 usage/configuration, 3 numeric failure, 4 I/O.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "tal/checks/checks.hpp"
#include "tal/cli/run_config.hpp"
#include "tal/data/dataset.hpp"
#include "tal/diff/checkpoint.hpp"
#include "tal/errors.hpp"
#include "tal/log.hpp"
#include "tal/model/model.hpp"
#include "tal/training/trainer.hpp"

namespace fs = std::filesystem;
using namespace tal;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitIo = 4;
constexpr const char* kConfigSnapshot = "config.json";

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

// Command-line overrides of the ablation switches.
struct Ablation {
  bool no_gate = false;
  bool no_decouple = false;
  bool no_refine_cls = false;
  bool no_refine_reg = false;
  std::string branches;
  std::string fusion;

  void add_to(CLI::App* cmd) {
    cmd->add_flag("--no-gate", no_gate, "Sum the granularity branches without gating");
    cmd->add_option("--branches", branches, "Active encoder branches, e.g. instant,local");
    cmd->add_flag("--no-decouple", no_decouple, "Plain heads on every level");
    cmd->add_flag("--no-refine-cls", no_refine_cls, "Disable classification refinement");
    cmd->add_flag("--no-refine-reg", no_refine_reg, "Disable boundary refinement");
    cmd->add_option("--fusion", fusion, "attention | add | concat");
  }

  void apply(RunConfig& c) const {
    if (no_gate) c.model.encoder.gate_enabled = false;
    if (!branches.empty()) c.model.encoder.branches = BranchMask::parse(branches);
    if (no_decouple) c.model.decoder.decouple = false;
    if (no_refine_cls) c.model.decoder.refine_cls = false;
    if (no_refine_reg) c.model.decoder.refine_reg = false;
    if (!fusion.empty()) c.model.decoder.fusion = parse_fusion(fusion);
  }
};

// A run directory's snapshot, unless an explicit config is given.
RunConfig resolve_config(const std::string& config_path, const fs::path& checkpoint) {
  if (!config_path.empty()) return RunConfig::load(config_path);
  const fs::path snapshot = checkpoint.parent_path() / kConfigSnapshot;
  if (fs::exists(snapshot)) return RunConfig::load(snapshot.string());
  log::warn("no config given and no " + snapshot.string() + "; using defaults");
  return RunConfig{};
}

diff::ParamSet load_params(const RunConfig& cfg, const fs::path& checkpoint) {
  diff::ParamSet params = train::strip_optimizer(diff::load_checkpoint(checkpoint));
  validate_params(cfg.model, params);
  return params;
}

std::optional<diff::Op> parse_op(std::string_view name) {
  for (int i = 0; i <= static_cast<int>(diff::Op::Sum); ++i) {
    const auto op = static_cast<diff::Op>(i);
    if (diff::op_name(op) == name) return op;
  }
  return std::nullopt;
}

int cmd_synth(const std::string& spec_path, const fs::path& out, std::optional<std::uint64_t> seed) {
  data::SyntheticSpec spec;
  if (!spec_path.empty()) spec = data::spec_from_json_text(read_text(spec_path));
  if (seed) spec.seed = *seed;
  spec.validate();
  const fs::path manifest = data::generate(spec, out);
  write_text(out / "spec.json", data::spec_to_json_text(spec));
  std::printf("wrote %zu videos to %s\n", spec.num_videos, manifest.string().c_str());
  return kExitOk;
}

int cmd_train(const std::string& config_path, const fs::path& manifest, const fs::path& out, bool resume,
              const Ablation& ablation, std::optional<std::uint64_t> seed, std::optional<std::size_t> epochs) {
  const fs::path snapshot = out / kConfigSnapshot;
  const bool have_snapshot = resume && fs::exists(snapshot);
  RunConfig cfg = !config_path.empty() ? RunConfig::load(config_path)
                  : have_snapshot      ? RunConfig::load(snapshot.string())
                                       : RunConfig{};
  ablation.apply(cfg);
  if (seed) cfg.training.seed = *seed;
  if (epochs) cfg.training.epochs = *epochs;
  cfg.validate();
  if (have_snapshot) {
    // Only the epoch budget may change when resuming.
    RunConfig previous = RunConfig::load(snapshot.string());
    previous.training.epochs = cfg.training.epochs;
    if (previous.to_json_text() != cfg.to_json_text()) {
      throw ConfigError("resume: configuration differs from " + snapshot.string());
    }
  }
  const data::Dataset dataset = data::load(manifest);
  train::check_dataset(cfg.model, dataset, cfg.training.train_split);
  fs::create_directories(out);
  write_text(out / kConfigSnapshot, cfg.to_json_text());

  train::TrainOptions options;
  options.out_dir = out;
  options.resume = resume;
  options.inference = cfg.inference;
  options.protocol = cfg.eval;
  options.on_epoch = [&](const train::EpochMetrics& m) {
    std::printf("epoch %3zu  loss %.5f  (vfl+ %.5f  vfl- %.5f  iou %.5f)  lr %.3g", m.epoch, m.loss.total,
                m.loss.vfl_pos, m.loss.vfl_neg, m.loss.iou, m.lr);
    if (m.eval_map) std::printf("  mAP %.4f", *m.eval_map);
    std::printf("\n");
    std::fflush(stdout);
  };
  const auto result = train::train(cfg.model, cfg.training, dataset, options);
  std::printf("finished at step %zu; checkpoints in %s\n", result.state.step, out.string().c_str());
  return kExitOk;
}

int cmd_eval(const std::string& config_path, const fs::path& checkpoint, const fs::path& manifest,
             const std::string& split, const std::string& thresholds, std::size_t jobs, const std::string& report_path) {
  RunConfig cfg = resolve_config(config_path, checkpoint);
  if (!thresholds.empty()) cfg.eval.thresholds = eval::EvalProtocol::parse_thresholds(thresholds);
  cfg.validate();
  const diff::ParamSet params = load_params(cfg, checkpoint);
  const data::Dataset dataset = data::load(manifest);
  train::check_dataset(cfg.model, dataset, split);
  const auto report = train::evaluate_split(cfg.model, params, dataset, split, cfg.inference, cfg.eval, jobs);
  std::printf("%s", eval::format_table(report).c_str());
  if (!report_path.empty()) write_text(report_path, eval::to_json_text(report));
  return kExitOk;
}

int cmd_infer(const std::string& config_path, const fs::path& checkpoint, const fs::path& manifest,
              const std::string& split, std::size_t jobs, const std::string& out_path) {
  RunConfig cfg = resolve_config(config_path, checkpoint);
  cfg.validate();
  const diff::ParamSet params = load_params(cfg, checkpoint);
  const data::Dataset dataset = data::load(manifest);
  train::check_dataset(cfg.model, dataset, split);
  const auto results = train::detect_split(cfg.model, params, dataset, split, cfg.inference, jobs);
  std::ostringstream text;
  for (const auto& r : results) infer::write_detections(text, r.video, r.predictions, dataset.class_names);
  if (out_path.empty() || out_path == "-") {
    std::cout << text.str();
  } else {
    write_text(out_path, text.str());
    std::size_t n = 0;
    for (const auto& r : results) n += r.predictions.size();
    std::printf("wrote %zu detections for %zu videos to %s\n", n, results.size(), out_path.c_str());
  }
  return kExitOk;
}

int report_checks(const checks::Report& report, const char* what) {
  std::printf("%s", report.format().c_str());
  std::printf("%s: %s in %.1f s\n", what, report.passed() ? "all passed" : "FAILED", report.seconds);
  return report.passed() ? kExitOk : kExitNumeric;
}

int cmd_gradcheck(std::size_t points, std::uint64_t seed, const std::string& fault) {
  checks::GradientOptions opt;
  opt.points = points;
  opt.seed = seed;
  if (!fault.empty()) {
    const auto eq = fault.find('=');
    const auto op = parse_op(fault.substr(0, eq));
    if (!op) throw ConfigError("--inject-fault: unknown op '" + fault.substr(0, eq) + "'");
    double factor = 1.5;
    if (eq != std::string::npos) {
      try {
        factor = std::stod(fault.substr(eq + 1));
      } catch (const std::exception&) {
        throw ConfigError("--inject-fault: bad factor in '" + fault + "'");
      }
    }
    opt.fault = std::make_pair(*op, factor);
    log::warn("injecting backward fault: " + std::string(diff::op_name(*op)) + " gradients scaled by " +
              std::to_string(factor));
  }
  return report_checks(checks::gradient_suite(opt), "gradcheck");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Temporal action localization toolkit"};
  app.require_subcommand(1);
  std::string log_level;
  app.add_option("--log", log_level, "error | warn | info | debug (overrides TAL_LOG)");

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  std::string spec_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  synth->add_option("--spec", spec_path, "Synthetic spec (JSON); defaults apply when omitted");
  synth->add_option("--out", out_dir, "Output directory")->required();
  synth->add_option("--seed", seed, "Override the spec seed");

  auto* train_cmd = app.add_subcommand("train", "Train a model");
  std::string config_path, manifest, checkpoint, split = "val", thresholds, report_path, detections_path;
  bool resume = false;
  std::optional<std::size_t> epochs;
  std::size_t jobs = 1;
  Ablation ablation;
  train_cmd->add_option("--config", config_path, "Run configuration (JSON)");
  train_cmd->add_option("--data", manifest, "Dataset manifest")->required();
  train_cmd->add_option("--out", out_dir, "Run directory")->required();
  train_cmd->add_flag("--resume", resume, "Continue from <out>/last.ckpt");
  train_cmd->add_option("--seed", seed, "Override training.seed");
  train_cmd->add_option("--epochs", epochs, "Override training.epochs");
  ablation.add_to(train_cmd);

  auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on a dataset split");
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--data", manifest, "Dataset manifest")->required();
  eval_cmd->add_option("--config", config_path, "Run configuration (default: config.json next to the checkpoint)");
  eval_cmd->add_option("--split", split, "Split to score (train, val or all)");
  eval_cmd->add_option("--thresholds", thresholds, "tIoU grid lo:step:hi or a comma list");
  eval_cmd->add_option("--jobs", jobs, "Worker threads over videos")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--report", report_path, "Write the report as JSON");

  auto* infer_cmd = app.add_subcommand("infer", "Write detections for a dataset split");
  infer_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  infer_cmd->add_option("--data", manifest, "Dataset manifest")->required();
  infer_cmd->add_option("--config", config_path, "Run configuration (default: config.json next to the checkpoint)");
  infer_cmd->add_option("--split", split, "Split to run (train, val or all)");
  infer_cmd->add_option("--jobs", jobs, "Worker threads over videos")->check(CLI::PositiveNumber);
  infer_cmd->add_option("--out", detections_path, "Detections file (JSON lines); '-' for stdout");

  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every op and the composed model");
  std::size_t points = 10;
  std::uint64_t check_seed = 1;
  std::string fault;
  grad_cmd->add_option("--points", points, "Random points per check")->check(CLI::PositiveNumber);
  grad_cmd->add_option("--seed", check_seed, "Random seed");
  grad_cmd->add_option("--inject-fault", fault, "Scale one op's backward pass, e.g. conv=1.01 (negative control)");

  auto* self_cmd = app.add_subcommand("selftest", "Gradient, spectral and oracle suites");
  self_cmd->add_option("--seed", check_seed, "Random seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (!log_level.empty()) log::set_level(log::parse_level(log_level));
    if (*synth) return cmd_synth(spec_path, out_dir, seed);
    if (*train_cmd) return cmd_train(config_path, manifest, out_dir, resume, ablation, seed, epochs);
    if (*eval_cmd) return cmd_eval(config_path, checkpoint, manifest, split, thresholds, jobs, report_path);
    if (*infer_cmd) return cmd_infer(config_path, checkpoint, manifest, split, jobs, detections_path);
    if (*grad_cmd) return cmd_gradcheck(points, check_seed, fault);
    if (*self_cmd) return report_checks(checks::selftest(check_seed), "selftest");
  } catch (const ConfigError& e) {
    log::error(e.what());
    return kExitUsage;
  } catch (const ShapeError& e) {
    log::error(e.what());
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    log::error(e.what());
    return kExitUsage;
  } catch (const NumericError& e) {
    log::error(e.what());
    return kExitNumeric;
  } catch (const IoError& e) {
    log::error(e.what());
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    log::error(e.what());
    return kExitIo;
  } catch (const std::exception& e) {
    log::error(std::string("unexpected: ") + e.what());
    return 1;
  }
  return kExitUsage;
}
