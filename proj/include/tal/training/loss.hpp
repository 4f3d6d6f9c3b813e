#pragma once

#include <cstddef>
#include <limits>
#include <utility>
#include <vector>

#include "tal/diff/array.hpp"
#include "tal/model/decoder.hpp"
#include "tal/types.hpp"

namespace tal::train {

/// Per-level regression bounds (lo, hi] on max(t - s, e - t), in frames.
struct LevelRange {
  double lo = 0.0;
  double hi = std::numeric_limits<double>::infinity();
};

/// (0,4], (4,8], (8,16], ... with the last level open-ended.
std::vector<LevelRange> default_ranges(std::size_t levels);

struct AssignConfig {
  double center_radius = 1.5;  // in strides of the level
  std::vector<LevelRange> ranges;  // empty: default_ranges(levels)
};

struct LevelTargets {
  std::vector<int> label;      // 0 = background, else 1..C
  std::vector<double> start;   // grid units of this level
  std::vector<double> end;
  std::vector<int> source;     // index of the ground-truth action, -1 for background
};

struct Assignment {
  std::vector<LevelTargets> levels;
  std::size_t num_pos = 0;
  std::size_t num_neg = 0;
};

/// Centre-sampled positives. `gt` in frames; lengths/strides per level.
/// An action that wins no instant anywhere falls back to the level-1 cell
/// holding its centre, provided that cell is still background.
Assignment assign_targets(const std::vector<ActionInstance>& gt, const std::vector<std::size_t>& lengths,
                          const std::vector<std::size_t>& strides, const AssignConfig& cfg = {});

inline constexpr double kProbClamp = 1e-7;

struct LossConfig {
  double alpha = 0.75;
  double gamma = 2.0;
};

double varifocal_loss(double p, double q, double alpha, double gamma);
/// d/dp of varifocal_loss; zero where the clamp is active.
double varifocal_grad(double p, double q, double alpha, double gamma);

/// 1 - tiou; degenerate predictions (start >= end) cost 1.
double iou_loss(const Segment& pred, const Segment& target);

struct IouLossGrad {
  double value = 1.0;
  double d_start = 0.0;
  double d_end = 0.0;
};
IouLossGrad iou_loss_grad(const Segment& pred, const Segment& target);

/// tIoU of the refined prediction at every positive instant (0 elsewhere).
/// Used as the VFL target q and weight; never differentiated.
std::vector<std::vector<double>> prediction_quality(const std::vector<decoder::LevelOutputs>& outputs,
                                                    const Assignment& assign);

struct LossBreakdown {
  double total = 0.0;
  double vfl_pos = 0.0;
  double vfl_neg = 0.0;
  double iou = 0.0;
  std::size_t num_pos = 0;
  std::size_t num_neg = 0;
};

/// Gradients w.r.t. the refined outputs, shaped like them.
struct OutputGradients {
  std::vector<diff::Array> cls;
  std::vector<diff::Array> start;
  std::vector<diff::Array> end;
};

/// Loss on refined outputs with quality held fixed. Throws NumericError on
/// a non-finite result.
LossBreakdown total_loss(const std::vector<decoder::LevelOutputs>& outputs, const Assignment& assign,
                         const std::vector<std::vector<double>>& quality, const LossConfig& cfg = {},
                         OutputGradients* grads = nullptr);

LossBreakdown total_loss(const std::vector<decoder::LevelOutputs>& outputs, const Assignment& assign,
                         const LossConfig& cfg = {}, OutputGradients* grads = nullptr);

}  // namespace tal::train
