#include <doctest.h>

#include <random>

#include <json.hpp>

#include "tal/checks/checks.hpp"
#include "tal/errors.hpp"
#include "tal/evaluation/evaluation.hpp"

using namespace tal;
using namespace tal::eval;

TEST_CASE("matching hand cases") {
  CHECK(match({{1, 3}}, {{1, 3}}, 0.5) == std::vector<bool>{true});
  // tIoU of [0,4] and [1.6,6] is 0.4.
  CHECK(match({{0, 4}}, {{1.6, 6}}, 0.5) == std::vector<bool>{false});
  CHECK(match({{1, 3}, {1, 3}}, {{1, 3}}, 0.5) == std::vector<bool>{true, false});
  // The second gt is the better overlap for the first prediction.
  CHECK(match({{2, 6}, {0, 4}}, {{0, 4}, {2, 6}}, 0.3) == std::vector<bool>{true, true});
}

TEST_CASE("average precision hand cases") {
  CHECK(average_precision({true}, 1) == 1.0);
  CHECK(average_precision({false, true}, 1) == 0.5);
  CHECK(average_precision({}, 1) == 0.0);
  CHECK_FALSE(average_precision({true}, 0).has_value());
  // Precision envelope: ranks 1 and 3 hit, the envelope at rank 1 is 1.
  CHECK(*average_precision({true, false, true}, 2) == doctest::Approx((1.0 + 2.0 / 3.0) / 2.0));
}

TEST_CASE("match and AP agree with brute-force references") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 10.0);
  for (int i = 0; i < 300; ++i) {
    std::vector<Segment> preds, gts;
    const int np = int(u(rng)), ng = int(u(rng) / 2);
    for (int k = 0; k < np; ++k) {
      const double s = u(rng);
      preds.push_back({s, s + 0.5 + u(rng) / 3});
    }
    for (int k = 0; k < ng; ++k) {
      const double s = u(rng);
      gts.push_back({s, s + 0.5 + u(rng) / 3});
    }
    const auto flags = match(preds, gts, 0.5);
    CHECK(flags == checks::reference_match(preds, gts, 0.5));
    if (ng > 0) CHECK(*average_precision(flags, std::size_t(ng)) == checks::reference_ap(flags, std::size_t(ng)));
  }
}

TEST_CASE("mAP: perfect, empty and reference instance") {
  EvalProtocol protocol;
  protocol.class_names = {"a", "b", "c"};

  std::vector<VideoResult> perfect(2);
  perfect[0] = {"v0", {{1, 3, 1, 0.9, 0}, {5, 8, 2, 0.8, 0}}, {{1, 3, 1}, {5, 8, 2}}};
  perfect[1] = {"v1", {{0, 2, 3, 0.7, 0}}, {{0, 2, 3}}};
  const MapReport r = map_report(perfect, protocol);
  for (double m : r.map) CHECK(m == 1.0);
  CHECK(r.average == 1.0);

  std::vector<VideoResult> empty = perfect;
  for (auto& v : empty) v.predictions.clear();
  CHECK(map_report(empty, protocol).average == 0.0);
  CHECK(map_report({}, protocol).average == 0.0);

  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<VideoResult> videos(5);
    for (std::size_t v = 0; v < 5; ++v) {
      videos[v].video = "v" + std::to_string(v);
      for (int k = 0; k < 3; ++k) {
        const double s = u(rng) * 20;
        videos[v].ground_truth.push_back({s, s + 1 + u(rng) * 4, 1 + int(u(rng) * 3)});
      }
      for (int k = 0; k < 6; ++k) {
        const auto& g = videos[v].ground_truth[std::size_t(k % 3)];
        const double j = (u(rng) - 0.5) * 2.0;
        videos[v].predictions.push_back({g.start + j, g.end + j * u(rng), 1 + int(u(rng) * 3), u(rng), 0});
      }
    }
    const MapReport rep = map_report(videos, protocol);
    const auto ref = checks::reference_map(videos, protocol.thresholds, 3);
    REQUIRE(ref.size() == rep.map.size());
    for (std::size_t t = 0; t < ref.size(); ++t) CHECK(rep.map[t] == doctest::Approx(ref[t]).epsilon(1e-12));
  }
}

TEST_CASE("threshold parsing and validation") {
  const auto grid = EvalProtocol::parse_thresholds("0.3:0.1:0.7");
  REQUIRE(grid.size() == 5);
  CHECK(grid[0] == doctest::Approx(0.3));
  CHECK(grid[4] == doctest::Approx(0.7));
  CHECK(EvalProtocol::parse_thresholds("0.5,0.75") == std::vector<double>{0.5, 0.75});
  CHECK_THROWS_AS(EvalProtocol::parse_thresholds("0.3:0.1"), ConfigError);
  CHECK_THROWS_AS(EvalProtocol::parse_thresholds("abc"), ConfigError);

  EvalProtocol p;
  p.thresholds = {0.5, 0.4};
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p.thresholds = {0.0, 0.5};
  CHECK_THROWS_AS(p.validate(), ConfigError);
}

TEST_CASE("report formatting") {
  EvalProtocol protocol;
  protocol.thresholds = {0.3, 0.5};
  protocol.class_names = {"a"};
  const MapReport r = map_report({{"v", {{0, 1, 1, 0.5, 0}}, {{0, 1, 1}}}}, protocol);
  const std::string table = format_table(r);
  CHECK(table.find("tIoU") != std::string::npos);
  CHECK(table.find("Avg.") != std::string::npos);
  CHECK(table.find("100.00") != std::string::npos);
  const auto j = nlohmann::json::parse(to_json_text(r));
  CHECK(j.at("average").get<double>() == 1.0);
}
