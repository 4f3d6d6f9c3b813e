#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "helpers.hpp"
#include "tal/checks/checks.hpp"
#include "tal/errors.hpp"
#include "tal/inference/inference.hpp"
#include "tal/model/model.hpp"

using namespace tal;
using namespace tal::infer;
using diff::Array;

namespace {

decoder::LevelOutputs level(Array cls, Array start, Array end, std::size_t stride) {
  decoder::LevelOutputs out;
  out.cls_coarse = out.cls_refined = std::move(cls);
  out.start_coarse = out.start_refined = std::move(start);
  out.end_coarse = out.end_refined = std::move(end);
  out.stride = stride;
  return out;
}

}  // namespace

TEST_CASE("config validation") {
  InferenceConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.sigma = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = InferenceConfig{};
  cfg.top_k = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("collect: threshold, per-class candidates and unit conversion") {
  const auto lv = level(Array::matrix(2, 3, {0.1, 0.9, 0.05, 0.2, 0.7, 0.1}), Array::matrix(1, 3, {0, 3.0, 1}),
                        Array::matrix(1, 3, {1, 7.0, 2}), 2);
  CHECK(collect({lv}, 0.95, {4.0, 0.0}, 10).empty());

  const auto c = collect({lv}, 0.5, {4.0, 0.0}, 10);
  REQUIRE(c.size() == 2);
  CHECK(c[0].label == 1);
  CHECK(c[0].score == 0.9);
  CHECK(c[1].label == 2);
  for (const auto& s : c) {
    CHECK(s.start == 1.5);
    CHECK(s.end == 3.5);
  }
  CHECK(collect({lv}, 0.0, {4.0, 0.0}, 4).size() == 4);
}

TEST_CASE("collect clamps to the video and drops collapsed segments") {
  const auto lv = level(Array::matrix(1, 2, {0.9, 0.8}), Array::matrix(1, 2, {-4.0, 50.0}),
                        Array::matrix(1, 2, {2.0, 60.0}), 1);
  const auto c = collect({lv}, 0.1, {1.0, 10.0}, 10);
  REQUIRE(c.size() == 1);
  CHECK(c[0].start == 0.0);
  CHECK(c[0].end == 2.0);
}

TEST_CASE("soft-NMS hand cases") {
  CHECK(soft_nms({}, 0.5, 0.001).empty());

  const std::vector<ScoredSegment> disjoint{{0, 1, 1, 0.9, 0}, {2, 3, 1, 0.8, 0}};
  CHECK(soft_nms(disjoint, 0.5, 0.001) == disjoint);

  const auto dup = soft_nms({{0, 1, 1, 0.9, 0}, {0, 1, 1, 0.8, 0}}, 0.5, 0.001);
  REQUIRE(dup.size() == 2);
  CHECK(dup[0].score == 0.9);
  CHECK(std::abs(dup[1].score - 0.8 * std::exp(-2.0)) < 1e-12);
  CHECK(std::abs(dup[1].score - 0.10827) < 1e-5);

  // Other classes are untouched.
  const auto cross = soft_nms({{0, 1, 1, 0.9, 0}, {0, 1, 2, 0.8, 0}}, 0.5, 0.001);
  CHECK(cross[1].score == 0.8);

  const auto floored = soft_nms({{0, 1, 1, 0.9, 0}, {0, 1, 1, 0.0005, 0}}, 0.5, 0.001);
  CHECK(floored.size() == 1);
}

TEST_CASE("soft-NMS agrees with the reference and keeps its invariants") {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 200; ++i) {
    const auto cands = checks::random_candidates(rng, 12, 3);
    const auto out = soft_nms(cands, 0.5, 0.001);
    CHECK(out == checks::reference_soft_nms(cands, 0.5, 0.001));
    CHECK(out.size() <= cands.size());
    for (std::size_t k = 0; k < out.size(); ++k) {
      CHECK(out[k].score >= 0.001);
      if (k > 0) CHECK_FALSE(ranks_before(out[k], out[k - 1]));
    }
  }
}

TEST_CASE("zero-parameter model gives one-half scores and uniform offsets") {
  const ModelConfig cfg = test::tiny_model();
  diff::ParamSet p = init_model_params(cfg, 2);
  for (auto& [path, value] : p) value.fill(0.0);
  std::mt19937_64 rng(3);
  const auto outputs = run_model(cfg, p, test::random_array({4, 32}, rng));
  const double B = double(cfg.decoder.bins);
  for (const auto& lv : outputs) {
    for (double v : lv.cls_refined.values()) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));
    for (std::size_t t = cfg.decoder.bins; t + cfg.decoder.bins < lv.length(); ++t) {
      CHECK(lv.start_refined[t] == doctest::Approx(double(t) - B / 2).epsilon(1e-12));
      CHECK(lv.end_refined[t] == doctest::Approx(double(t) + B / 2).epsilon(1e-12));
    }
  }
}

TEST_CASE("inference is deterministic and respects its contracts") {
  const ModelConfig cfg = test::tiny_model();
  const diff::ParamSet p = init_model_params(cfg, 4);
  std::mt19937_64 rng(5);
  const Array x = test::random_array({4, 40}, rng);
  InferenceConfig ic;
  ic.top_k = 30;
  const auto a = infer::infer(cfg, p, x, 4.0, ic);
  CHECK(a == infer::infer(cfg, p, x, 4.0, ic));
  CHECK_FALSE(a.empty());
  CHECK(a.size() <= 30);
  for (const auto& d : a) {
    CHECK(d.start >= 0.0);
    CHECK(d.start < d.end);
    CHECK(d.end <= 10.0);
    CHECK((d.score >= ic.score_floor && d.score <= 1.0));
  }
  CHECK_THROWS_AS(infer::infer(cfg, p, Array({5, 40}), 4.0, ic), std::invalid_argument);
}

TEST_CASE("detections round-trip through JSON lines") {
  const std::vector<std::string> names{"run", "jump"};
  const std::vector<ScoredSegment> dets{{0.25, 1.5, 2, 0.875, 1}, {3.0, 4.125, 1, 0.5, 2}};
  std::stringstream ss;
  write_detections(ss, "v1", dets, names);
  const std::string text = ss.str();
  CHECK(text.starts_with(R"({"video":"v1","label":"jump","start":0.25,"end":1.5,"score":0.875})"));

  const auto back = read_detections(ss, names);
  REQUIRE(back.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back[i].video == "v1");
    CHECK(back[i].detection.label == dets[i].label);
    CHECK(back[i].detection.start == dets[i].start);
    CHECK(back[i].detection.end == dets[i].end);
    CHECK(back[i].detection.score == dets[i].score);
  }

  std::stringstream bad(R"({"video":"v1","label":"swim","start":0,"end":1,"score":0.5})");
  CHECK_THROWS_AS(read_detections(bad, names), IoError);
}
