#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "helpers.hpp"
#include "tal/data/dataset.hpp"
#include "tal/errors.hpp"

using namespace tal;
using namespace tal::data;
namespace fs = std::filesystem;

namespace {

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.num_videos = 6;
  s.min_length = 64;
  s.max_length = 96;
  s.feature_dim = 8;
  s.num_classes = 3;
  s.min_actions = 1;
  s.max_actions = 3;
  s.min_action_length = 4;
  s.max_action_length = 16;
  s.seed = 11;
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Frame label from the annotations: 0 outside every action.
std::vector<int> frame_labels(const Video& v) {
  std::vector<int> labels(v.record.frames, 0);
  for (const auto& a : v.record.annotations) {
    const auto s = static_cast<std::size_t>(std::llround(a.start * v.record.feature_fps));
    const auto e = static_cast<std::size_t>(std::llround(a.end * v.record.feature_fps));
    for (std::size_t t = s; t < e; ++t) labels[t] = a.label;
  }
  return labels;
}

}  // namespace

TEST_CASE("spec validation rejects infeasible and malformed specs") {
  CHECK_NOTHROW(small_spec().validate());
  SyntheticSpec s = small_spec();
  s.max_actions = 5;
  s.max_action_length = 20;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = small_spec();
  s.num_classes = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = small_spec();
  s.noise = -1.0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("spec JSON round trip and unknown keys") {
  const SyntheticSpec s = small_spec();
  CHECK(spec_from_json_text(spec_to_json_text(s)) == s);
  CHECK(spec_from_json_text("{\"noise\": 0.5}").noise == 0.5);
  CHECK_THROWS_AS(spec_from_json_text("{\"nosie\": 0.5}"), ConfigError);
}

TEST_CASE("prototypes are unit vectors below the margin") {
  const SyntheticSpec s = small_spec();
  const auto protos = make_prototypes(s);
  REQUIRE(protos.size() == s.num_classes + 1);
  for (std::size_t i = 0; i < protos.size(); ++i) {
    double n = 0.0;
    for (double x : protos[i]) n += x * x;
    CHECK(n == doctest::Approx(1.0).epsilon(1e-12));
    for (std::size_t j = 0; j < i; ++j) {
      double dot = 0.0;
      for (std::size_t d = 0; d < s.feature_dim; ++d) dot += protos[i][d] * protos[j][d];
      CHECK(dot < s.separation_margin);
    }
  }
}

TEST_CASE("generated annotations respect counts, bounds and do not overlap") {
  SyntheticSpec s = small_spec();
  s.num_videos = 20;
  const Dataset ds = synthesize(s);
  REQUIRE(ds.videos.size() == 20);
  std::size_t val = 0;
  for (const auto& v : ds.videos) {
    const auto& a = v.record.annotations;
    CHECK(a.size() >= s.min_actions);
    CHECK(a.size() <= s.max_actions);
    CHECK(v.features.shape() == diff::Shape{s.feature_dim, v.record.frames});
    CHECK(v.record.frames >= s.min_length);
    CHECK(v.record.frames <= s.max_length);
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].start >= 0.0);
      CHECK(a[i].start < a[i].end);
      CHECK(a[i].end <= v.record.duration());
      CHECK((a[i].label >= 1 && a[i].label <= int(s.num_classes)));
      if (i > 0) CHECK(a[i - 1].end <= a[i].start);
    }
    val += v.record.split == "val";
  }
  CHECK(val == 4);
  CHECK(ds.split("val").size() == 4);
  CHECK(ds.split("all").size() == 20);
}

TEST_CASE("noiseless frames inside an action equal the class prototype") {
  SyntheticSpec s = small_spec();
  s.noise = 0.0;
  const auto protos = make_prototypes(s);
  const Dataset ds = synthesize(s);
  for (const auto& v : ds.videos) {
    const auto labels = frame_labels(v);
    for (std::size_t t = 0; t < labels.size(); ++t) {
      for (std::size_t d = 0; d < s.feature_dim; ++d) {
        CHECK(v.features.at(d, t) == double(static_cast<float>(protos[std::size_t(labels[t])][d])));
      }
    }
  }
}

TEST_CASE("a linear classifier separates frame classes") {
  SyntheticSpec s;
  s.num_videos = 20;
  s.seed = 5;
  const auto protos = make_prototypes(s);
  const Dataset ds = synthesize(s);
  std::size_t correct = 0, total = 0;
  for (const auto& v : ds.videos) {
    const auto labels = frame_labels(v);
    for (std::size_t t = 0; t < labels.size(); ++t) {
      std::size_t best = 0;
      double best_dot = -1e9;
      for (std::size_t c = 0; c < protos.size(); ++c) {
        double dot = 0.0;
        for (std::size_t d = 0; d < s.feature_dim; ++d) dot += protos[c][d] * v.features.at(d, t);
        if (dot > best_dot) {
          best_dot = dot;
          best = c;
        }
      }
      correct += int(best) == labels[t];
      ++total;
    }
  }
  CHECK(double(correct) / double(total) > 0.99);
}

TEST_CASE("generate then load is lossless and byte-identical per seed") {
  test::TempDir a("ds_a"), b("ds_b");
  const SyntheticSpec s = small_spec();
  const fs::path ma = generate(s, a.path());
  const fs::path mb = generate(s, b.path());
  CHECK(slurp(ma) == slurp(mb));
  const Dataset mem = synthesize(s);
  const Dataset loaded = load(ma);
  CHECK(loaded.warnings.empty());
  CHECK(loaded.class_names == mem.class_names);
  REQUIRE(loaded.videos.size() == mem.videos.size());
  for (std::size_t i = 0; i < mem.videos.size(); ++i) {
    const auto& rec = mem.videos[i].record;
    const std::string file = loaded.videos[i].record.feature_file;
    CHECK(slurp(a.path() / file) == slurp(b.path() / file));
    CHECK(loaded.videos[i].record.annotations == rec.annotations);
    CHECK(loaded.videos[i].record.split == rec.split);
    CHECK(loaded.videos[i].features == mem.videos[i].features);
  }
}

TEST_CASE("truncated feature file is rejected naming the record") {
  test::TempDir dir("ds_trunc");
  const fs::path manifest = generate(small_spec(), dir.path());
  const Dataset ds = load(manifest);
  const auto& victim = ds.videos[2].record;
  const fs::path file = dir.path() / victim.feature_file;
  fs::resize_file(file, fs::file_size(file) - 8);
  try {
    load(manifest);
    FAIL("expected an IoError");
  } catch (const IoError& e) {
    const std::string msg = e.what();
    CHECK(msg.find(victim.id) != std::string::npos);
    CHECK(msg.find("1 invalid record") != std::string::npos);
  }
}

TEST_CASE("checksum and annotation violations are aggregated") {
  test::TempDir dir("ds_bad");
  const fs::path manifest = generate(small_spec(), dir.path());
  auto j = nlohmann::json::parse(slurp(manifest));
  j["videos"][0]["crc32"] = j["videos"][0]["crc32"].get<std::uint32_t>() ^ 1u;
  j["videos"][1]["annotations"][0]["end"] = 1e6;
  std::ofstream(manifest) << j.dump(2);
  try {
    load(manifest);
    FAIL("expected an IoError");
  } catch (const IoError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("2 invalid record") != std::string::npos);
    CHECK(msg.find("checksum") != std::string::npos);
  }
}

TEST_CASE("unknown manifest fields are accepted with a warning") {
  test::TempDir dir("ds_unknown");
  const fs::path manifest = generate(small_spec(), dir.path());
  auto j = nlohmann::json::parse(slurp(manifest));
  j["producer"] = "someone";
  j["videos"][0]["camera"] = "left";
  std::ofstream(manifest) << j.dump(2);
  const Dataset ds = load(manifest);
  CHECK(ds.videos.size() == 6);
  CHECK(ds.warnings.size() == 2);
}

TEST_CASE("missing manifest is an IoError") {
  CHECK_THROWS_AS(load("/nonexistent/manifest.json"), IoError);
}
