#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tal/data/dataset.hpp"
#include "tal/diff/params.hpp"
#include "tal/evaluation/evaluation.hpp"
#include "tal/inference/inference.hpp"
#include "tal/model/config.hpp"
#include "tal/training/loss.hpp"
#include "tal/training/optimizer.hpp"

namespace tal::train {

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t warmup_epochs = 5;
  double base_lr = 1e-3;
  AdamWConfig adamw;
  LossConfig loss;
  double center_radius = 1.5;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;  // epochs between held-out evaluations; 0 = final epoch only
  std::string train_split = "train";
  std::string eval_split = "val";

  void validate() const;  // throws ConfigError
};

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  LossBreakdown loss;     // mean over the epoch's videos
  double lr = 0.0;        // at the epoch's last step
  std::optional<double> eval_map;
};

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: nothing written
  bool resume = false;            // continue from out_dir/last.ckpt
  infer::InferenceConfig inference;
  eval::EvalProtocol protocol;
  std::function<void(const EpochMetrics&)> on_epoch;
};

struct TrainResult {
  diff::ParamSet params;
  OptimizerState state;
  std::vector<EpochMetrics> history;
  std::optional<double> best_map;
};

inline constexpr const char* kLastCheckpoint = "last.ckpt";
inline constexpr const char* kBestCheckpoint = "best.ckpt";
inline constexpr const char* kMetricsLog = "metrics.tsv";

/// Throws ConfigError when the dataset cannot feed the model.
void check_dataset(const ModelConfig& model, const data::Dataset& dataset, const std::string& split);

/// Loss and parameter gradients for one video (one optimizer step's worth).
struct StepResult {
  LossBreakdown loss;
  std::map<std::string, diff::Array> grads;
};
StepResult loss_and_gradients(const ModelConfig& model, const diff::ParamSet& params, const data::Video& video,
                              const TrainConfig& cfg);

/// Detections for every video of a split, in dataset order. `jobs` worker
/// threads share the read-only parameters.
std::vector<eval::VideoResult> detect_split(const ModelConfig& model, const diff::ParamSet& params,
                                           const data::Dataset& dataset, const std::string& split,
                                           const infer::InferenceConfig& inference, std::size_t jobs = 1);

/// Runs inference over a split and scores it.
eval::MapReport evaluate_split(const ModelConfig& model, const diff::ParamSet& params, const data::Dataset& dataset,
                               const std::string& split, const infer::InferenceConfig& inference,
                               const eval::EvalProtocol& protocol, std::size_t jobs = 1);

/// Deterministic given (model, cfg, dataset). Writes last/best checkpoints
/// and the metrics log when out_dir is set.
TrainResult train(const ModelConfig& model, const TrainConfig& cfg, const data::Dataset& dataset,
                  const TrainOptions& options = {});

}  // namespace tal::train
