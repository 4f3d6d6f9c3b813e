#include "tal/training/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <random>
#include <thread>

#include "tal/diff/checkpoint.hpp"
#include "tal/errors.hpp"
#include "tal/log.hpp"
#include "tal/model/model.hpp"

namespace tal::train {

namespace fs = std::filesystem;

namespace {

constexpr std::string_view kInputPrefix = "input.";

// Graph per sequence length, built on first use.
class GraphCache {
 public:
  explicit GraphCache(const ModelConfig& cfg) : cfg_(cfg) {}

  ModelGraph& get(std::size_t T) {
    auto it = graphs_.find(T);
    if (it == graphs_.end()) it = graphs_.emplace(T, build_model_graph(cfg_, T)).first;
    return it->second;
  }

 private:
  const ModelConfig& cfg_;
  std::map<std::size_t, ModelGraph> graphs_;
};

StepResult run_step(ModelGraph& model, const diff::ParamSet& params, const data::Video& video,
                    const TrainConfig& cfg) {
  diff::Bindings bindings;
  bindings.attach(params).bind(kFeaturesInput, video.features);
  model.graph.forward(bindings);
  const auto outputs = read_outputs(model);

  const auto gt = seconds_to_frames(video.record.annotations, video.record.feature_fps);
  AssignConfig assign_cfg;
  assign_cfg.center_radius = cfg.center_radius;
  const Assignment assign = assign_targets(gt, model.pyramid.lengths, model.pyramid.strides, assign_cfg);

  StepResult result;
  OutputGradients og;
  result.loss = total_loss(outputs, assign, cfg.loss, &og);

  std::vector<std::pair<diff::NodeId, diff::Array>> seeds;
  for (std::size_t l = 0; l < model.levels.size(); ++l) {
    seeds.emplace_back(model.levels[l].cls_refined, std::move(og.cls[l]));
    seeds.emplace_back(model.levels[l].start_refined, std::move(og.start[l]));
    seeds.emplace_back(model.levels[l].end_refined, std::move(og.end[l]));
  }
  model.graph.backward(seeds);
  for (auto& [name, g] : model.graph.input_gradients()) {
    if (!name.starts_with(kInputPrefix)) result.grads.emplace(name, std::move(g));
  }
  return result;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch)};
  std::mt19937_64 rng(seq);
  // Fisher-Yates with an explicit draw keeps the order independent of the
  // standard library's shuffle implementation.
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

std::string format_metrics(const EpochMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu\t%.6f\t%.6f\t%.6f\t%.6f\t%.6g", m.epoch, m.loss.total, m.loss.vfl_pos,
                m.loss.vfl_neg, m.loss.iou, m.lr);
  std::string line = buf;
  if (m.eval_map) {
    std::snprintf(buf, sizeof buf, "\t%.6f", *m.eval_map);
    line += buf;
  }
  return line;
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("training.epochs must be positive");
  if (warmup_epochs > epochs) throw ConfigError("training.warmup_epochs exceeds training.epochs");
  if (!(base_lr > 0.0) || !std::isfinite(base_lr)) throw ConfigError("training.base_lr must be positive");
  if (!(adamw.weight_decay >= 0.0)) throw ConfigError("training.weight_decay must be >= 0");
  if (!(adamw.clip_norm >= 0.0)) throw ConfigError("training.clip_norm must be >= 0");
  if (!(adamw.beta1 >= 0.0 && adamw.beta1 < 1.0) || !(adamw.beta2 >= 0.0 && adamw.beta2 < 1.0)) {
    throw ConfigError("training betas must lie in [0, 1)");
  }
  if (!(adamw.eps > 0.0)) throw ConfigError("training.eps must be positive");
  if (!(loss.alpha > 0.0) || !(loss.gamma >= 0.0)) throw ConfigError("training loss alpha/gamma out of range");
  if (!(center_radius > 0.0)) throw ConfigError("training.center_radius must be positive");
}

void check_dataset(const ModelConfig& model, const data::Dataset& dataset, const std::string& split) {
  if (dataset.feature_dim != model.encoder.input_dim) {
    throw ConfigError("dataset has feature_dim " + std::to_string(dataset.feature_dim) + " but the model expects " +
                      std::to_string(model.encoder.input_dim));
  }
  if (dataset.num_classes() != model.decoder.num_classes) {
    throw ConfigError("dataset has " + std::to_string(dataset.num_classes()) + " classes but the model predicts " +
                      std::to_string(model.decoder.num_classes));
  }
  const auto videos = dataset.split(split);
  if (videos.empty()) throw ConfigError("dataset split '" + split + "' is empty");
  for (const auto* v : videos) {
    if (v->record.frames < model.encoder.min_length()) {
      throw ConfigError(v->record.id + ": " + std::to_string(v->record.frames) + " frames, the pyramid needs at least " +
                        std::to_string(model.encoder.min_length()));
    }
  }
}

StepResult loss_and_gradients(const ModelConfig& model, const diff::ParamSet& params, const data::Video& video,
                              const TrainConfig& cfg) {
  ModelGraph graph = build_model_graph(model, video.features.cols());
  return run_step(graph, params, video, cfg);
}

std::vector<eval::VideoResult> detect_split(const ModelConfig& model, const diff::ParamSet& params,
                                           const data::Dataset& dataset, const std::string& split,
                                           const infer::InferenceConfig& inference, std::size_t jobs) {
  const auto videos = dataset.split(split);
  std::vector<eval::VideoResult> results(videos.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < videos.size(); i = next++) {
      try {
        const auto& v = *videos[i];
        results[i].video = v.record.id;
        results[i].ground_truth = v.record.annotations;
        results[i].predictions = infer::infer(model, params, v.features, v.record.feature_fps, inference);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(jobs, videos.size()));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  return results;
}

eval::MapReport evaluate_split(const ModelConfig& model, const diff::ParamSet& params, const data::Dataset& dataset,
                               const std::string& split, const infer::InferenceConfig& inference,
                               const eval::EvalProtocol& protocol, std::size_t jobs) {
  eval::EvalProtocol p = protocol;
  if (p.class_names.empty()) p.class_names = dataset.class_names;
  return eval::map_report(detect_split(model, params, dataset, split, inference, jobs), p);
}

TrainResult train(const ModelConfig& model, const TrainConfig& cfg, const data::Dataset& dataset,
                  const TrainOptions& options) {
  model.validate();
  cfg.validate();
  options.inference.validate();
  options.protocol.validate();
  check_dataset(model, dataset, cfg.train_split);
  const auto videos = dataset.split(cfg.train_split);
  const bool have_eval = !dataset.split(cfg.eval_split).empty();

  TrainResult result;
  result.params = init_model_params(model, cfg.seed);
  if (options.resume) {
    if (options.out_dir.empty()) throw ConfigError("resume requires an output directory");
    const auto ckpt = diff::load_checkpoint(options.out_dir / kLastCheckpoint);
    result.state = OptimizerState::restore(ckpt);
    result.params = strip_optimizer(ckpt);
    validate_params(model, result.params);
  }
  const bool writing = !options.out_dir.empty();
  std::ofstream metrics;
  if (writing) {
    std::error_code ec;
    fs::create_directories(options.out_dir, ec);
    if (ec) throw IoError("cannot create " + options.out_dir.string() + ": " + ec.message());
    metrics.open(options.out_dir / kMetricsLog, options.resume ? std::ios::app : std::ios::trunc);
    if (!metrics) throw IoError("cannot write " + (options.out_dir / kMetricsLog).string());
  }

  const std::size_t steps_per_epoch = videos.size();
  const Schedule schedule{cfg.base_lr, cfg.warmup_epochs * steps_per_epoch, cfg.epochs * steps_per_epoch};
  const std::size_t first_epoch = result.state.step / steps_per_epoch;
  if (result.state.step % steps_per_epoch != 0) {
    throw ConfigError("checkpoint step " + std::to_string(result.state.step) + " is not at an epoch boundary");
  }
  double best_score = -std::numeric_limits<double>::infinity();

  GraphCache graphs(model);
  for (std::size_t epoch = first_epoch; epoch < cfg.epochs; ++epoch) {
    EpochMetrics m;
    m.epoch = epoch + 1;
    for (std::size_t idx : epoch_order(videos.size(), cfg.seed, epoch)) {
      const auto& video = *videos[idx];
      StepResult step;
      try {
        step = run_step(graphs.get(video.features.cols()), result.params, video, cfg);
        m.lr = optimizer_step(result.params, step.grads, result.state, schedule, cfg.adamw);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(m.epoch) + ", video " + video.record.id + ": " + e.what());
      }
      const double w = 1.0 / static_cast<double>(steps_per_epoch);
      m.loss.total += w * step.loss.total;
      m.loss.vfl_pos += w * step.loss.vfl_pos;
      m.loss.vfl_neg += w * step.loss.vfl_neg;
      m.loss.iou += w * step.loss.iou;
      m.loss.num_pos += step.loss.num_pos;
      m.loss.num_neg += step.loss.num_neg;
    }

    const bool last = epoch + 1 == cfg.epochs;
    if (have_eval && (last || (cfg.eval_every > 0 && m.epoch % cfg.eval_every == 0))) {
      m.eval_map = evaluate_split(model, result.params, dataset, cfg.eval_split, options.inference, options.protocol)
                       .average;
    }
    // Best by held-out mAP when measured, else by (negated) training loss.
    const double score = m.eval_map ? 1.0 + *m.eval_map : -m.loss.total;
    const bool improved = m.eval_map ? score >= best_score : (score > best_score && !result.best_map);
    if (m.eval_map) result.best_map = std::max(result.best_map.value_or(0.0), *m.eval_map);

    log::info("epoch " + format_metrics(m));
    if (writing) {
      metrics << format_metrics(m) << '\n' << std::flush;
      diff::ParamSet ckpt = result.params;
      result.state.store(ckpt);
      diff::save_checkpoint(options.out_dir / kLastCheckpoint, ckpt);
      if (improved) diff::save_checkpoint(options.out_dir / kBestCheckpoint, result.params);
    }
    if (improved) best_score = score;
    result.history.push_back(m);
    if (options.on_epoch) options.on_epoch(m);
  }
  return result;
}

}  // namespace tal::train
