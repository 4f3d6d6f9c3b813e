#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "helpers.hpp"
#include "tal/data/dataset.hpp"
#include "tal/diff/checkpoint.hpp"
#include "tal/diff/gradcheck.hpp"
#include "tal/errors.hpp"
#include "tal/model/model.hpp"
#include "tal/training/trainer.hpp"

using namespace tal;
using namespace tal::train;
using diff::Array;

namespace {

// Direct transcription of the loss definitions, used as the oracle.
double vfl_oracle(double p, double q, double alpha, double gamma) {
  if (q > 0.0) return -q * (q * std::log(p) + (1.0 - q) * std::log(1.0 - p));
  return -alpha * std::pow(p, gamma) * std::log(1.0 - p);
}

const std::vector<std::size_t> kLengths{256, 128, 64, 32, 16, 8};
const std::vector<std::size_t> kStrides{1, 2, 4, 8, 16, 32};

decoder::LevelOutputs level_outputs(Array cls, Array start, Array end) {
  decoder::LevelOutputs out;
  out.cls_coarse = out.cls_refined = std::move(cls);
  out.start_coarse = out.start_refined = std::move(start);
  out.end_coarse = out.end_refined = std::move(end);
  return out;
}

data::SyntheticSpec tiny_spec() {
  data::SyntheticSpec s;
  s.num_videos = 4;
  s.min_length = s.max_length = 32;
  s.feature_dim = 4;
  s.num_classes = 2;
  s.min_actions = s.max_actions = 1;
  s.min_action_length = 4;
  s.max_action_length = 8;
  s.val_fraction = 0.25;
  s.seed = 3;
  return s;
}

TrainConfig tiny_train(std::size_t epochs) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.warmup_epochs = 1;
  cfg.base_lr = 1e-2;
  cfg.seed = 4;
  return cfg;
}

}  // namespace

TEST_CASE("tiou") {
  CHECK(tiou({2, 6}, {4, 8}) == doctest::Approx(1.0 / 3.0));
  CHECK(tiou({2, 6}, {2, 6}) == 1.0);
  CHECK(tiou({0, 1}, {2, 3}) == 0.0);
  CHECK(tiou({1, 1}, {1, 1}) == 0.0);
}

TEST_CASE("varifocal loss values") {
  CHECK(varifocal_loss(1.0, 1.0, 0.75, 2.0) < 1e-6);
  CHECK(varifocal_loss(0.0, 0.0, 0.75, 2.0) < 1e-12);
  CHECK(varifocal_loss(0.5, 0.0, 0.75, 2.0) == doctest::Approx(vfl_oracle(0.5, 0.0, 0.75, 2.0)).epsilon(1e-14));
  CHECK(varifocal_loss(0.5, 0.0, 0.75, 2.0) == doctest::Approx(0.12998).epsilon(1e-4));
  CHECK(varifocal_loss(0.3, 0.6, 0.75, 2.0) == doctest::Approx(vfl_oracle(0.3, 0.6, 0.75, 2.0)).epsilon(1e-14));
}

TEST_CASE("varifocal gradient matches finite differences away from the clamp") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  for (int i = 0; i < 50; ++i) {
    const double p = u(rng);
    const double q = i % 2 == 0 ? 0.0 : u(rng);
    const double h = 1e-6;
    const double fd = (varifocal_loss(p + h, q, 0.75, 2.0) - varifocal_loss(p - h, q, 0.75, 2.0)) / (2 * h);
    CHECK(diff::relative_error(varifocal_grad(p, q, 0.75, 2.0), fd) < 1e-6);
  }
  CHECK(varifocal_grad(0.0, 0.5, 0.75, 2.0) == 0.0);
}

TEST_CASE("iou loss values and gradient") {
  CHECK(iou_loss({2, 6}, {2, 6}) == 0.0);
  CHECK(iou_loss({0, 1}, {2, 3}) == 1.0);
  CHECK(iou_loss({2, 6}, {4, 8}) == doctest::Approx(2.0 / 3.0));
  CHECK(iou_loss({5, 5}, {4, 8}) == 1.0);

  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 10.0);
  for (int i = 0; i < 50; ++i) {
    const double s = u(rng), e = s + 0.5 + u(rng);
    const double ts = u(rng);
    const Segment tgt{ts, ts + 1.0 + u(rng)};
    const auto g = iou_loss_grad({s, e}, tgt);
    CHECK(g.value == doctest::Approx(iou_loss({s, e}, tgt)).epsilon(1e-14));
    const double h = 1e-7;
    const double fs = (iou_loss({s + h, e}, tgt) - iou_loss({s - h, e}, tgt)) / (2 * h);
    const double fe = (iou_loss({s, e + h}, tgt) - iou_loss({s, e - h}, tgt)) / (2 * h);
    CHECK(diff::relative_error(g.d_start, fs) < 1e-5);
    CHECK(diff::relative_error(g.d_end, fe) < 1e-5);
  }
}

TEST_CASE("regression ranges") {
  const auto r = default_ranges(6);
  REQUIRE(r.size() == 6);
  CHECK(r[0].lo == 0.0);
  CHECK(r[0].hi == 4.0);
  CHECK(r[1].lo == 4.0);
  CHECK(r[1].hi == 8.0);
  CHECK(r[4].hi == 64.0);
  CHECK(std::isinf(r[5].hi));
}

TEST_CASE("assignment: empty ground truth is all background") {
  const Assignment a = assign_targets({}, kLengths, kStrides);
  CHECK(a.num_pos == 0);
  CHECK(a.num_neg == 256 + 128 + 64 + 32 + 16 + 8);
}

TEST_CASE("assignment: a mid-sized action is positive at exactly one level") {
  const Assignment a = assign_targets({{100, 140, 2}}, kLengths, kStrides);
  for (std::size_t l = 0; l < 6; ++l) {
    std::size_t pos = 0;
    for (int c : a.levels[l].label) pos += c > 0;
    CHECK(pos == (l == 3 ? 3u : 0u));
  }
  CHECK(a.levels[3].label[15] == 2);
  CHECK(a.levels[3].start[15] == 100.0 / 8.0);
  CHECK(a.levels[3].end[15] == 140.0 / 8.0);
}

TEST_CASE("assignment: an action shorter than one cell falls back to the level-1 centre cell") {
  const Assignment a = assign_targets({{10.2, 10.6, 1}}, kLengths, kStrides);
  CHECK(a.num_pos == 1);
  CHECK(a.levels[0].label[10] == 1);
  CHECK(a.levels[0].source[10] == 0);
}

TEST_CASE("assignment invariants on random ground truth") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<ActionInstance> gt;
    const int n = 1 + static_cast<int>(u(rng) * 4);
    for (int i = 0; i < n; ++i) {
      const double len = 0.5 + u(rng) * 120.0;
      const double s = u(rng) * (256.0 - len);
      gt.push_back({s, s + len, 1 + static_cast<int>(u(rng) * 3)});
    }
    const Assignment a = assign_targets(gt, kLengths, kStrides);
    std::size_t pos = 0, neg = 0;
    for (std::size_t l = 0; l < 6; ++l) {
      const auto& lv = a.levels[l];
      const double stride = double(kStrides[l]);
      for (std::size_t t = 0; t < lv.label.size(); ++t) {
        if (lv.label[t] == 0) {
          ++neg;
          CHECK(lv.source[t] == -1);
          continue;
        }
        ++pos;
        REQUIRE(lv.source[t] >= 0);
        const auto& act = gt[static_cast<std::size_t>(lv.source[t])];
        CHECK(lv.label[t] == act.label);
        CHECK(lv.start[t] == act.start / stride);
        CHECK(lv.end[t] == act.end / stride);
        const double p = double(t) * stride;
        const double centre = 0.5 * (act.start + act.end);
        const bool inside = act.start < p && p < act.end && std::abs(p - centre) <= 1.5 * stride;
        const bool fallback = l == 0 && std::floor(centre) == double(t);
        CHECK((inside || fallback));
      }
    }
    CHECK(pos == a.num_pos);
    CHECK(neg == a.num_neg);
  }
}

TEST_CASE("quality is positive exactly on positives") {
  std::mt19937_64 rng(4);
  const Assignment a = assign_targets({{3, 9, 1}}, {16}, {1});
  Array start({1, 16}), end({1, 16});
  for (std::size_t t = 0; t < 16; ++t) {
    start[t] = double(t) - 20.0;  // far from every action
    end[t] = double(t) - 19.0;
  }
  const auto q = prediction_quality({level_outputs(Array({1, 16}, 0.5), start, end)}, a);
  for (std::size_t t = 0; t < 16; ++t) CHECK((q[0][t] > 0.0) == (a.levels[0].label[t] > 0));
}

TEST_CASE("total loss: no positives, perfect predictions, and a hand-assembled value") {
  Assignment none;
  none.levels.push_back({{0, 0}, {0, 0}, {0, 0}, {-1, -1}});
  none.num_neg = 2;
  const auto out0 = level_outputs(Array::matrix(1, 2, {0.3, 0.6}), Array({1, 2}), Array({1, 2}, 1.0));
  const auto lb0 = total_loss({out0}, none);
  CHECK(lb0.vfl_pos == 0.0);
  CHECK(lb0.iou == 0.0);
  CHECK(lb0.total == doctest::Approx((vfl_oracle(0.3, 0, 0.75, 2) + vfl_oracle(0.6, 0, 0.75, 2)) / 2).epsilon(1e-14));

  Assignment one;
  one.levels.push_back({{1, 0}, {2, 0}, {6, 0}, {0, -1}});
  one.num_pos = 1;
  one.num_neg = 1;
  const auto perfect = level_outputs(Array::matrix(1, 2, {1.0, 0.0}), Array::matrix(1, 2, {2, 0}),
                                     Array::matrix(1, 2, {6, 1}));
  CHECK(total_loss({perfect}, one).total < 1e-6);

  const auto half = level_outputs(Array::matrix(1, 2, {0.5, 0.5}), Array::matrix(1, 2, {4, 0}),
                                  Array::matrix(1, 2, {8, 1}));
  const double q = 1.0 / 3.0;
  const double expected = q * vfl_oracle(0.5, q, 0.75, 2) + (1.0 - q) + vfl_oracle(0.5, 0, 0.75, 2);
  const auto lb = total_loss({half}, one);
  CHECK(lb.total == doctest::Approx(expected).epsilon(1e-14));
  CHECK(lb.num_pos == 1);
}

TEST_CASE("total loss rejects non-finite values") {
  Assignment one;
  one.levels.push_back({{1}, {0}, {1}, {0}});
  one.num_pos = 1;
  const auto out = level_outputs(Array::matrix(1, 1, {0.5}), Array::matrix(1, 1, {0}),
                                 Array::matrix(1, 1, {std::numeric_limits<double>::quiet_NaN()}));
  CHECK_THROWS_AS(total_loss({out}, one, std::vector<std::vector<double>>{{0.5}}), NumericError);
}

TEST_CASE("learning-rate schedule") {
  const Schedule s{1e-3, 10, 110};
  CHECK(s.lr(0) == 0.0);
  CHECK(s.lr(5) == doctest::Approx(5e-4));
  CHECK(s.lr(10) == doctest::Approx(1e-3));
  CHECK(s.lr(60) == doctest::Approx(5e-4));
  CHECK(s.lr(110) < 1e-15);
  for (std::size_t k = 0; k <= 120; ++k) CHECK(s.lr(k) >= 0.0);
}

TEST_CASE("AdamW step against the textbook update") {
  diff::ParamSet p;
  p.set("layer.w", Array::vector({1.0, -2.0}));
  p.set("layer.b", Array::vector({0.5}));
  const std::map<std::string, Array> g{{"layer.w", Array::vector({0.3, -0.4})}, {"layer.b", Array::vector({0.1})}};
  AdamWConfig cfg;
  cfg.clip_norm = 0.0;
  cfg.weight_decay = 0.1;
  OptimizerState st;
  const Schedule s{1e-2, 0, 100};
  const double lr = optimizer_step(p, g, st, s, cfg);
  CHECK(lr == 1e-2);
  CHECK(st.step == 1);
  // First step: m_hat = g, v_hat = g^2.
  auto expect = [&](double w, double gi, bool decay) {
    return w - lr * (gi / (std::abs(gi) + cfg.eps) + (decay ? cfg.weight_decay * w : 0.0));
  };
  CHECK(p.get("layer.w")[0] == doctest::Approx(expect(1.0, 0.3, true)).epsilon(1e-14));
  CHECK(p.get("layer.w")[1] == doctest::Approx(expect(-2.0, -0.4, true)).epsilon(1e-14));
  CHECK(p.get("layer.b")[0] == doctest::Approx(expect(0.5, 0.1, false)).epsilon(1e-14));
  CHECK(st.m.get("layer.w").shape() == p.get("layer.w").shape());

  diff::ParamSet ckpt = p;
  st.store(ckpt);
  const OptimizerState back = OptimizerState::restore(ckpt);
  CHECK(back.step == 1);
  CHECK(back.m == st.m);
  CHECK(strip_optimizer(ckpt) == p);
}

TEST_CASE("gradient clipping bounds the global norm") {
  diff::ParamSet p;
  p.set("x.b", Array::vector({0.0, 0.0}));
  AdamWConfig cfg;
  cfg.beta1 = 0.0;
  cfg.beta2 = 0.0;
  cfg.eps = 0.0;
  cfg.clip_norm = 1.0;
  OptimizerState st;
  optimizer_step(p, {{"x.b", Array::vector({30.0, 40.0})}}, st, Schedule{1.0, 0, 10}, cfg);
  CHECK(st.m.get("x.b")[0] == doctest::Approx(0.6));
  CHECK(st.m.get("x.b")[1] == doctest::Approx(0.8));
}

TEST_CASE("non-finite gradients are rejected") {
  diff::ParamSet p;
  p.set("x.w", Array::vector({1.0}));
  OptimizerState st;
  CHECK_THROWS_AS(optimizer_step(p, {{"x.w", Array::vector({std::numeric_limits<double>::infinity()})}}, st,
                                 Schedule{}, AdamWConfig{}),
                  NumericError);
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.warmup_epochs = cfg.epochs + 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.base_lr = -1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("training smoke run writes checkpoints and is deterministic") {
  const ModelConfig model = test::tiny_model();
  const data::Dataset ds = data::synthesize(tiny_spec());
  test::TempDir dir("train");

  TrainOptions opts;
  opts.out_dir = dir.path();
  const TrainResult a = train::train(model, tiny_train(2), ds, opts);
  REQUIRE(a.history.size() == 2);
  for (const auto& m : a.history) CHECK(std::isfinite(m.loss.total));
  CHECK(a.history.back().eval_map.has_value());
  CHECK(a.state.step == 2 * ds.split("train").size());
  CHECK(std::filesystem::exists(dir.path() / kLastCheckpoint));
  CHECK(std::filesystem::exists(dir.path() / kBestCheckpoint));
  CHECK(std::filesystem::exists(dir.path() / kMetricsLog));

  const TrainResult b = train::train(model, tiny_train(2), ds);
  CHECK(b.params == a.params);
  for (std::size_t e = 0; e < 2; ++e) CHECK(b.history[e].loss.total == a.history[e].loss.total);

  const auto last = diff::load_checkpoint(dir.path() / kLastCheckpoint);
  CHECK(OptimizerState::restore(last).step == a.state.step);
  CHECK_NOTHROW(validate_params(model, strip_optimizer(last)));
}

TEST_CASE("resume continues the step counter") {
  const ModelConfig model = test::tiny_model();
  const data::Dataset ds = data::synthesize(tiny_spec());
  const std::size_t steps = ds.split("train").size();
  test::TempDir dir("resume");
  TrainOptions opts;
  opts.out_dir = dir.path();
  train::train(model, tiny_train(1), ds, opts);
  opts.resume = true;
  const TrainResult r = train::train(model, tiny_train(3), ds, opts);
  CHECK(r.state.step == 3 * steps);
  REQUIRE(r.history.size() == 2);
  CHECK(r.history.front().epoch == 2);

  std::ifstream metrics(dir.path() / kMetricsLog);
  std::size_t lines = 0;
  for (std::string line; std::getline(metrics, line);) ++lines;
  CHECK(lines == 3);
}

TEST_CASE("dataset and model mismatches are rejected before training") {
  ModelConfig model = test::tiny_model();
  model.encoder.input_dim = 5;
  const data::Dataset ds = data::synthesize(tiny_spec());
  CHECK_THROWS_AS(train::train(model, tiny_train(1), ds), ConfigError);
}
