#pragma once

#include <cstddef>
#include <map>
#include <string>

#include "tal/diff/params.hpp"

namespace tal::train {

/// Linear warmup from 0 to base_lr, then cosine annealing to 0. Steps count
/// optimizer updates.
struct Schedule {
  double base_lr = 1e-3;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;

  double lr(std::size_t step) const;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.03;
  double clip_norm = 1.0;  // global gradient norm; 0 disables
};

struct OptimizerState {
  std::size_t step = 0;
  diff::ParamSet m;
  diff::ParamSet v;

  /// Checkpoint entries "opt.step", "opt.m.<path>", "opt.v.<path>".
  void store(diff::ParamSet& out) const;
  /// Inverse of store(); absent entries leave a fresh state.
  static OptimizerState restore(const diff::ParamSet& in);
};

/// Decoupled weight decay applies to weights only (paths ending in ".w").
bool decays(const std::string& path);

/// One AdamW update with the lr of the current step; returns that lr.
/// Throws NumericError on non-finite gradients.
double optimizer_step(diff::ParamSet& params, const std::map<std::string, diff::Array>& grads, OptimizerState& state,
                      const Schedule& schedule, const AdamWConfig& cfg);

/// Splits a checkpoint into model parameters and optimizer entries.
diff::ParamSet strip_optimizer(const diff::ParamSet& checkpoint);

}  // namespace tal::train
