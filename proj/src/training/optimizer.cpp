#include "tal/training/optimizer.hpp"

#include <cmath>
#include <numbers>

#include "tal/errors.hpp"

namespace tal::train {

namespace {

constexpr std::string_view kOptPrefix = "opt.";
constexpr std::string_view kMomentPrefix = "opt.m.";
constexpr std::string_view kSecondPrefix = "opt.v.";

}  // namespace

double Schedule::lr(std::size_t step) const {
  if (step < warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (total_steps <= warmup_steps) return base_lr;
  const double progress = std::min(1.0, static_cast<double>(step - warmup_steps) /
                                            static_cast<double>(total_steps - warmup_steps));
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

bool decays(const std::string& path) { return path.size() >= 2 && path.compare(path.size() - 2, 2, ".w") == 0; }

void OptimizerState::store(diff::ParamSet& out) const {
  out.set("opt.step", diff::Array::scalar(static_cast<double>(step)));
  for (const auto& [path, value] : m) out.set(std::string(kMomentPrefix) + path, value);
  for (const auto& [path, value] : v) out.set(std::string(kSecondPrefix) + path, value);
}

OptimizerState OptimizerState::restore(const diff::ParamSet& in) {
  OptimizerState s;
  if (const auto* step = in.find("opt.step")) s.step = static_cast<std::size_t>(step->data()[0]);
  for (const auto& [path, value] : in) {
    if (path.starts_with(kMomentPrefix)) s.m.set(path.substr(kMomentPrefix.size()), value);
    if (path.starts_with(kSecondPrefix)) s.v.set(path.substr(kSecondPrefix.size()), value);
  }
  return s;
}

diff::ParamSet strip_optimizer(const diff::ParamSet& checkpoint) {
  diff::ParamSet out;
  for (const auto& [path, value] : checkpoint) {
    if (!path.starts_with(kOptPrefix)) out.set(path, value);
  }
  return out;
}

double optimizer_step(diff::ParamSet& params, const std::map<std::string, diff::Array>& grads, OptimizerState& state,
                      const Schedule& schedule, const AdamWConfig& cfg) {
  double sq = 0.0;
  for (const auto& [path, g] : grads) {
    for (double x : g.values()) sq += x * x;
  }
  if (!std::isfinite(sq)) throw NumericError("non-finite gradient at step " + std::to_string(state.step));
  const double norm = std::sqrt(sq);
  const double clip = (cfg.clip_norm > 0.0 && norm > cfg.clip_norm) ? cfg.clip_norm / norm : 1.0;

  const double lr = schedule.lr(state.step);
  const double k = static_cast<double>(state.step + 1);
  const double bc1 = 1.0 - std::pow(cfg.beta1, k);
  const double bc2 = 1.0 - std::pow(cfg.beta2, k);
  for (auto& [path, p] : params) {
    auto it = grads.find(path);
    if (it == grads.end()) continue;
    const auto g = it->second.values();
    if (g.size() != p.size()) throw std::invalid_argument("gradient shape mismatch for " + path);
    if (!state.m.contains(path)) state.m.set(path, diff::Array(p.shape()));
    if (!state.v.contains(path)) state.v.set(path, diff::Array(p.shape()));
    auto m = state.m.get(path).values();
    auto v = state.v.get(path).values();
    auto w = p.values();
    const double decay = decays(path) ? lr * cfg.weight_decay : 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] * clip;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      w[i] -= decay * w[i];
      w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.eps);
    }
  }
  ++state.step;
  return lr;
}

}  // namespace tal::train
