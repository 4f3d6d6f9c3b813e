#include <doctest.h>

#include <random>

#include "helpers.hpp"
#include "tal/diff/gradcheck.hpp"
#include "tal/errors.hpp"
#include "tal/model/decoder.hpp"
#include "tal/model/model.hpp"

using namespace tal;
using diff::Array;
using diff::Bindings;
using diff::Graph;

namespace {

diff::ParamSet decoder_params(const ModelConfig& cfg, std::uint64_t seed) {
  diff::ParamSet p;
  std::mt19937_64 rng(seed);
  decoder::init_params(p, cfg.encoder, cfg.decoder, rng);
  return p;
}

}  // namespace

TEST_CASE("channel attention: neutral, saturated and bounded") {
  const ModelConfig cfg = test::tiny_model();
  diff::ParamSet p = decoder_params(cfg, 1);
  std::mt19937_64 rng(2);
  const Array a = test::random_array({8, 6}, rng);
  Array neg = a;
  for (double& v : neg.values()) v = -v;

  diff::ParamSet zero = p;
  zero.get("head.dcm.att.w").fill(0.0);
  zero.get("head.dcm.att.b").fill(0.0);
  CHECK(decoder::channel_attention(a, neg, zero, "head.dcm.att") == Array({8, 1}, 0.5));

  zero.get("head.dcm.att.b").fill(50.0);
  const Array saturated = decoder::channel_attention(a, neg, zero, "head.dcm.att");
  for (double v : saturated.values()) CHECK(v > 1.0 - 1e-15);

  const Array w = decoder::channel_attention(a, test::random_array({8, 6}, rng), p, "head.dcm.att");
  CHECK(w.shape() == diff::Shape{8, 1});
  for (double v : w.values()) CHECK((v > 0.0 && v < 1.0));
}

TEST_CASE("cross-layer fusion with zero neighbour convs leaves the level unchanged") {
  const ModelConfig cfg = test::tiny_model();
  diff::ParamSet p = decoder_params(cfg, 3);
  for (const char* k : {"head.dcm.up.w", "head.dcm.up.b", "head.drm.down.w", "head.drm.down.b"}) p.get(k).fill(0.0);
  std::mt19937_64 rng(4);
  Graph g;
  auto lo = g.input("lo"), mid = g.input("mid"), hi = g.input("hi");
  auto f_cls = decoder::dcm_fuse(g, mid, hi, 8, cfg.decoder);
  auto f_reg = decoder::drm_fuse(g, mid, lo, cfg.decoder);
  Bindings b;
  const Array level = test::random_array({8, 8}, rng);
  b.attach(p).bind("lo", test::random_array({8, 16}, rng)).bind("mid", level).bind("hi", test::random_array({8, 4}, rng));
  g.forward(b);
  CHECK(g.value(f_cls) == level);
  CHECK(g.value(f_reg) == level);
}

TEST_CASE("cross-layer fusion with a unit gate adds the resampled neighbour") {
  const ModelConfig cfg = test::tiny_model();
  diff::ParamSet p = decoder_params(cfg, 5);
  for (const char* k : {"head.dcm.att", "head.drm.att"}) {
    p.get(std::string(k) + ".w").fill(0.0);
    p.get(std::string(k) + ".b").fill(50.0);
  }
  std::mt19937_64 rng(6);
  Graph g;
  auto lo = g.input("lo"), mid = g.input("mid"), hi = g.input("hi");
  auto f_cls = decoder::dcm_fuse(g, mid, hi, 8, cfg.decoder);
  auto f_reg = decoder::drm_fuse(g, mid, lo, cfg.decoder);
  auto up = g.conv_transpose(hi, g.input("head.dcm.up.w"), g.input("head.dcm.up.b"), 8, diff::kDepthwise);
  auto down = g.conv(lo, g.input("head.drm.down.w"), g.input("head.drm.down.b"), 2, diff::kDepthwise);
  auto cls_expected = g.add(mid, up);
  auto reg_expected = g.add(mid, down);
  Bindings b;
  b.attach(p)
      .bind("lo", test::random_array({8, 16}, rng))
      .bind("mid", test::random_array({8, 8}, rng))
      .bind("hi", test::random_array({8, 4}, rng));
  g.forward(b);
  CHECK(diff::max_abs_diff(g.value(f_cls), g.value(cls_expected)) < 1e-12);
  CHECK(diff::max_abs_diff(g.value(f_reg), g.value(reg_expected)) < 1e-12);
}

TEST_CASE("fusion gradients match finite differences") {
  const ModelConfig cfg = test::tiny_model();
  const diff::ParamSet p = decoder_params(cfg, 7);
  std::mt19937_64 rng(8);
  for (bool cls_side : {true, false}) {
    Graph g;
    auto mid = g.input("mid"), other = g.input("other");
    auto fused = cls_side ? decoder::dcm_fuse(g, mid, other, 8, cfg.decoder) : decoder::drm_fuse(g, mid, other, cfg.decoder);
    auto out = g.sum(g.mul(fused, g.constant(test::random_array({8, 8}, rng))));
    Bindings b;
    b.attach(p).bind("mid", test::random_array({8, 8}, rng)).bind("other", test::random_array({8, cls_side ? 4u : 16u}, rng));
    CHECK(diff::fd_check(g, b, out, "mid") < 1e-4);
    CHECK(diff::fd_check(g, b, out, "other") < 1e-4);
  }
}

TEST_CASE("classification head with zero final conv outputs one half") {
  const ModelConfig cfg = test::tiny_model();
  diff::ParamSet p = decoder_params(cfg, 9);
  p.get("head.cls.out.w").fill(0.0);
  p.get("head.cls.out.b").fill(0.0);
  std::mt19937_64 rng(10);
  Graph g;
  auto cls = decoder::classify(g, g.input("x"));
  Bindings b;
  b.attach(p).bind("x", test::random_array({8, 7}, rng));
  g.forward(b);
  CHECK(g.value(cls) == Array({2, 7}, 0.5));
}

TEST_CASE("boundary expectation: uniform bins and a forced first bin") {
  const std::size_t T = 40, B = 16;
  Graph g;
  auto edge = g.input("edge"), center = g.input("center");
  auto start = decoder::boundary_from_logits(g, edge, center, T, B, -1);
  auto end = decoder::boundary_from_logits(g, edge, center, T, B, +1);

  g.forward(Bindings().bind("edge", Array({1, T})).bind("center", Array({B + 1, T})));
  for (std::size_t t = B; t + B < T; ++t) {
    CHECK(g.value(start)[t] == doctest::Approx(double(t) - 8.0).epsilon(1e-12));
    CHECK(g.value(end)[t] == doctest::Approx(double(t) + 8.0).epsilon(1e-12));
  }

  Array forced({B + 1, T});
  for (std::size_t t = 0; t < T; ++t) forced.at(0, t) = 60.0;
  g.forward(Bindings().bind("edge", Array({1, T})).bind("center", forced));
  for (std::size_t t = 0; t < T; ++t) {
    CHECK(std::abs(g.value(start)[t] - double(t)) < 1e-12);
    CHECK(std::abs(g.value(end)[t] - double(t)) < 1e-12);
  }
}

TEST_CASE("boundary offsets stay within the bin range and pass the gradient check") {
  const std::size_t T = 12, B = 4;
  std::mt19937_64 rng(11);
  Graph g;
  auto edge = g.input("edge"), center = g.input("center");
  auto start = decoder::boundary_from_logits(g, edge, center, T, B, -1);
  auto out = g.sum(g.mul(start, g.constant(test::random_array({1, T}, rng))));
  Bindings b;
  b.bind("edge", test::random_array({1, T}, rng, 2.0)).bind("center", test::random_array({B + 1, T}, rng, 2.0));
  g.forward(b);
  for (std::size_t t = 0; t < T; ++t) {
    const double d = double(t) - g.value(start)[t];
    CHECK(d >= 0.0);
    CHECK(d <= double(B));
  }
  CHECK(diff::fd_check(g, b, out, "edge") < 1e-4);
  CHECK(diff::fd_check(g, b, out, "center") < 1e-4);
}

TEST_CASE("three-level fusion") {
  const ModelConfig cfg = test::tiny_model();
  diff::ParamSet p = decoder_params(cfg, 12);
  for (const char* k : {"head.clff.down.w", "head.clff.down.b", "head.clff.up.w", "head.clff.up.b"}) p.get(k).fill(0.0);
  std::mt19937_64 rng(13);
  Graph g;
  auto fused = decoder::clff(g, g.input("lo"), g.input("mid"), g.input("hi"), 8);
  const Array mid = test::random_array({8, 8}, rng);
  Bindings b;
  b.attach(p).bind("lo", test::random_array({8, 16}, rng)).bind("mid", mid).bind("hi", test::random_array({8, 4}, rng));
  g.forward(b);
  CHECK(g.value(fused) == mid);

  Bindings zeros;
  zeros.attach(p).bind("lo", Array({8, 16})).bind("mid", Array({8, 8})).bind("hi", Array({8, 4}));
  g.forward(zeros);
  CHECK(g.value(fused) == Array({8, 8}));
}

TEST_CASE("refinement arithmetic") {
  const ModelConfig cfg = test::tiny_model();
  Graph g;
  decoder::LevelNodes coarse;
  coarse.cls_coarse = g.input("cls");
  coarse.start_coarse = g.input("start");
  coarse.end_coarse = g.input("end");
  auto r = decoder::apply_refinement(g, coarse, g.input("adjust"), g.input("offsets"), cfg.decoder);
  auto same = decoder::apply_refinement(g, coarse, coarse.cls_coarse, g.constant(Array({2, 3})), cfg.decoder);

  const Array start = Array::matrix(1, 3, {0.5, 1.0, 1.5});
  const Array end = Array::matrix(1, 3, {2.0, 3.0, 4.0});
  const Array cls = Array::matrix(2, 3, {0.8, 0.3, 0.1, 0.9, 0.6, 0.45});
  Bindings b;
  b.bind("cls", cls)
      .bind("start", start)
      .bind("end", end)
      .bind("adjust", Array({2, 3}, 0.2))
      .bind("offsets", Array::matrix(2, 3, {0.25, -0.5, 0, 1, 0, -1}));
  g.forward(b);
  CHECK(g.value(r.cls)[0] == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(g.value(r.start) == Array::matrix(1, 3, {0.75, 0.5, 1.5}));
  CHECK(g.value(r.end) == Array::matrix(1, 3, {3.0, 3.0, 3.0}));
  CHECK(g.value(same.cls) == cls);
  CHECK(g.value(same.start) == start);
  CHECK(g.value(same.end) == end);
}

TEST_CASE("decoupled level counts") {
  for (auto [levels, expected] : {std::pair<std::size_t, std::size_t>{3, 1}, {6, 4}}) {
    const ModelConfig cfg = test::tiny_model(levels);
    const ModelGraph m = build_model_graph(cfg, 64);
    std::size_t decoupled = 0;
    for (const auto& l : m.levels) decoupled += l.decoupled;
    CHECK(decoupled == expected);
    CHECK_FALSE(m.levels.front().decoupled);
    CHECK_FALSE(m.levels.back().decoupled);
  }
}

TEST_CASE("freshly initialized model: scores in range, refined equals coarse boundaries") {
  const ModelConfig cfg = test::tiny_model(4);
  const diff::ParamSet p = init_model_params(cfg, 14);
  std::mt19937_64 rng(15);
  const auto outputs = run_model(cfg, p, test::random_array({4, 32}, rng));
  REQUIRE(outputs.size() == 4);
  for (const auto& l : outputs) {
    for (double v : l.cls_refined.values()) CHECK((v >= 0.0 && v <= 1.0));
    // Offset heads start at zero output weights.
    CHECK(diff::max_abs_diff(l.start_refined, l.start_coarse) < 1e-12);
  }
  CHECK_NOTHROW(validate_params(cfg, p));
  diff::ParamSet broken = p;
  broken.erase("head.cls.out.w");
  CHECK_THROWS_AS(validate_params(cfg, broken), ConfigError);
}

TEST_CASE("clamped boundaries keep start below end inside the level") {
  decoder::LevelOutputs l;
  l.cls_refined = Array({1, 4});
  l.start_refined = Array::matrix(1, 4, {-3.0, 2.0, 2.5, 9.0});
  l.end_refined = Array::matrix(1, 4, {1.0, 1.0, 2.5, 12.0});
  decoder::clamp_boundaries(l);
  for (std::size_t t = 0; t < 4; ++t) {
    CHECK(l.start_refined[t] >= 0.0);
    CHECK(l.end_refined[t] <= 3.0);
    CHECK(l.start_refined[t] < l.end_refined[t]);
  }
}
