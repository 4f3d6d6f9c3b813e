#include "tal/training/loss.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "tal/errors.hpp"

namespace tal::train {

namespace {

// Positives keep a strictly positive quality even when the prediction misses.
constexpr double kQualityFloor = 1e-3;

}  // namespace

std::vector<LevelRange> default_ranges(std::size_t levels) {
  std::vector<LevelRange> out(levels);
  for (std::size_t l = 0; l < levels; ++l) {
    out[l].lo = l == 0 ? 0.0 : std::ldexp(1.0, static_cast<int>(l) + 1);
    out[l].hi = std::ldexp(1.0, static_cast<int>(l) + 2);
  }
  if (levels > 0) out.back().hi = std::numeric_limits<double>::infinity();
  return out;
}

Assignment assign_targets(const std::vector<ActionInstance>& gt, const std::vector<std::size_t>& lengths,
                          const std::vector<std::size_t>& strides, const AssignConfig& cfg) {
  if (lengths.size() != strides.size() || lengths.empty()) {
    throw std::invalid_argument("assign_targets: need one stride per level");
  }
  const std::vector<LevelRange> ranges = cfg.ranges.empty() ? default_ranges(lengths.size()) : cfg.ranges;
  if (ranges.size() != lengths.size()) throw std::invalid_argument("assign_targets: one range per level required");

  Assignment out;
  out.levels.resize(lengths.size());
  std::vector<bool> placed(gt.size(), false);
  for (std::size_t l = 0; l < lengths.size(); ++l) {
    auto& lv = out.levels[l];
    const std::size_t T = lengths[l];
    const double stride = static_cast<double>(strides[l]);
    lv.label.assign(T, 0);
    lv.start.assign(T, 0.0);
    lv.end.assign(T, 0.0);
    lv.source.assign(T, -1);
    for (std::size_t t = 0; t < T; ++t) {
      const double pos = static_cast<double>(t) * stride;
      int best = -1;
      double best_len = 0.0;
      for (std::size_t i = 0; i < gt.size(); ++i) {
        const auto& a = gt[i];
        if (!(a.start < pos && pos < a.end)) continue;
        const double centre = 0.5 * (a.start + a.end);
        if (std::abs(pos - centre) > cfg.center_radius * stride) continue;
        const double reach = std::max(pos - a.start, a.end - pos);
        if (!(reach > ranges[l].lo && reach <= ranges[l].hi)) continue;
        const double len = a.end - a.start;
        if (best < 0 || len < best_len) {
          best = static_cast<int>(i);
          best_len = len;
        }
      }
      if (best >= 0) {
        const auto& a = gt[static_cast<std::size_t>(best)];
        lv.label[t] = a.label;
        lv.start[t] = a.start / stride;
        lv.end[t] = a.end / stride;
        lv.source[t] = best;
        placed[static_cast<std::size_t>(best)] = true;
      }
    }
  }

  auto& first = out.levels.front();
  const double stride0 = static_cast<double>(strides.front());
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (placed[i]) continue;
    const auto& a = gt[i];
    const double cell = std::floor(0.5 * (a.start + a.end) / stride0);
    const auto t = static_cast<std::size_t>(std::clamp(cell, 0.0, static_cast<double>(first.label.size() - 1)));
    if (first.label[t] != 0) continue;
    first.label[t] = a.label;
    first.start[t] = a.start / stride0;
    first.end[t] = a.end / stride0;
    first.source[t] = static_cast<int>(i);
  }

  for (const auto& lv : out.levels) {
    for (int c : lv.label) (c > 0 ? out.num_pos : out.num_neg)++;
  }
  return out;
}

double varifocal_loss(double p, double q, double alpha, double gamma) {
  p = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
  if (q > 0.0) return -q * (q * std::log(p) + (1.0 - q) * std::log(1.0 - p));
  return -alpha * std::pow(p, gamma) * std::log(1.0 - p);
}

double varifocal_grad(double p, double q, double alpha, double gamma) {
  if (p < kProbClamp || p > 1.0 - kProbClamp) return 0.0;
  if (q > 0.0) return -q * (q / p - (1.0 - q) / (1.0 - p));
  return -alpha * (gamma * std::pow(p, gamma - 1.0) * std::log(1.0 - p) - std::pow(p, gamma) / (1.0 - p));
}

double iou_loss(const Segment& pred, const Segment& target) {
  if (pred.start >= pred.end) return 1.0;
  return 1.0 - tiou(pred, target);
}

IouLossGrad iou_loss_grad(const Segment& pred, const Segment& target) {
  IouLossGrad g;
  if (pred.start >= pred.end) return g;
  const double lo = std::max(pred.start, target.start);
  const double hi = std::min(pred.end, target.end);
  const double inter = std::max(0.0, hi - lo);
  const double uni = (pred.end - pred.start) + (target.end - target.start) - inter;
  if (uni <= 0.0) return g;
  g.value = 1.0 - inter / uni;
  // d(inter)/d(start|end) where the overlap is determined by the prediction.
  const double di_ds = (inter > 0.0 && pred.start > target.start) ? -1.0 : 0.0;
  const double di_de = (inter > 0.0 && pred.end < target.end) ? 1.0 : 0.0;
  const double du_ds = -1.0 - di_ds;
  const double du_de = 1.0 - di_de;
  g.d_start = -(di_ds * uni - inter * du_ds) / (uni * uni);
  g.d_end = -(di_de * uni - inter * du_de) / (uni * uni);
  return g;
}

std::vector<std::vector<double>> prediction_quality(const std::vector<decoder::LevelOutputs>& outputs,
                                                    const Assignment& assign) {
  if (outputs.size() != assign.levels.size()) throw std::invalid_argument("quality: level count mismatch");
  std::vector<std::vector<double>> q(outputs.size());
  for (std::size_t l = 0; l < outputs.size(); ++l) {
    const auto& lv = assign.levels[l];
    const auto& out = outputs[l];
    q[l].assign(lv.label.size(), 0.0);
    for (std::size_t t = 0; t < lv.label.size(); ++t) {
      if (lv.label[t] == 0) continue;
      const Segment pred{out.start_refined.at(0, t), out.end_refined.at(0, t)};
      const double iou = pred.start < pred.end ? tiou(pred, {lv.start[t], lv.end[t]}) : 0.0;
      q[l][t] = std::max(iou, kQualityFloor);
    }
  }
  return q;
}

LossBreakdown total_loss(const std::vector<decoder::LevelOutputs>& outputs, const Assignment& assign,
                         const std::vector<std::vector<double>>& quality, const LossConfig& cfg,
                         OutputGradients* grads) {
  if (outputs.size() != assign.levels.size() || quality.size() != outputs.size()) {
    throw std::invalid_argument("total_loss: level count mismatch");
  }
  LossBreakdown lb;
  lb.num_pos = assign.num_pos;
  lb.num_neg = assign.num_neg;
  const double inv_pos = 1.0 / static_cast<double>(std::max<std::size_t>(assign.num_pos, 1));
  const double inv_neg = 1.0 / static_cast<double>(std::max<std::size_t>(assign.num_neg, 1));
  if (grads != nullptr) {
    grads->cls.clear();
    grads->start.clear();
    grads->end.clear();
  }

  for (std::size_t l = 0; l < outputs.size(); ++l) {
    const auto& out = outputs[l];
    const auto& lv = assign.levels[l];
    const std::size_t C = out.cls_refined.rows();
    const std::size_t T = out.cls_refined.cols();
    if (lv.label.size() != T || quality[l].size() != T) {
      throw std::invalid_argument("total_loss: level " + std::to_string(l + 1) + " has " + std::to_string(T) +
                                  " instants but the assignment has " + std::to_string(lv.label.size()));
    }
    diff::Array gc, gs, ge;
    if (grads != nullptr) {
      gc = diff::Array({C, T});
      gs = diff::Array({1, T});
      ge = diff::Array({1, T});
    }
    for (std::size_t t = 0; t < T; ++t) {
      const int label = lv.label[t];
      if (label == 0) {
        for (std::size_t c = 0; c < C; ++c) {
          const double p = out.cls_refined.at(c, t);
          lb.vfl_neg += inv_neg * varifocal_loss(p, 0.0, cfg.alpha, cfg.gamma);
          if (grads != nullptr) gc.at(c, t) = inv_neg * varifocal_grad(p, 0.0, cfg.alpha, cfg.gamma);
        }
        continue;
      }
      const double q = quality[l][t];
      for (std::size_t c = 0; c < C; ++c) {
        const double p = out.cls_refined.at(c, t);
        const double qc = static_cast<int>(c) + 1 == label ? q : 0.0;
        lb.vfl_pos += inv_pos * q * varifocal_loss(p, qc, cfg.alpha, cfg.gamma);
        if (grads != nullptr) gc.at(c, t) = inv_pos * q * varifocal_grad(p, qc, cfg.alpha, cfg.gamma);
      }
      const auto ig = iou_loss_grad({out.start_refined.at(0, t), out.end_refined.at(0, t)}, {lv.start[t], lv.end[t]});
      lb.iou += inv_pos * ig.value;
      if (grads != nullptr) {
        gs.at(0, t) = inv_pos * ig.d_start;
        ge.at(0, t) = inv_pos * ig.d_end;
      }
    }
    if (grads != nullptr) {
      grads->cls.push_back(std::move(gc));
      grads->start.push_back(std::move(gs));
      grads->end.push_back(std::move(ge));
    }
  }
  lb.total = lb.vfl_pos + lb.vfl_neg + lb.iou;
  if (!std::isfinite(lb.total)) {
    throw NumericError("non-finite loss (vfl_pos " + std::to_string(lb.vfl_pos) + ", vfl_neg " +
                       std::to_string(lb.vfl_neg) + ", iou " + std::to_string(lb.iou) + ")");
  }
  return lb;
}

LossBreakdown total_loss(const std::vector<decoder::LevelOutputs>& outputs, const Assignment& assign,
                         const LossConfig& cfg, OutputGradients* grads) {
  return total_loss(outputs, assign, prediction_quality(outputs, assign), cfg, grads);
}

}  // namespace tal::train
