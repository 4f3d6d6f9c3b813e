#include "tal/data/dataset.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "tal/errors.hpp"
#include "tal/log.hpp"

namespace tal::data {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kMaxPrototypeAttempts = 100000;

std::uint64_t video_seed(std::uint64_t seed, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), 0x5eedu};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

std::string video_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "video_%04zu", index);
  return buf;
}

std::vector<std::uint8_t> encode_features(const diff::Array& features) {
  std::vector<std::uint8_t> bytes(features.size() * 4);
  std::size_t k = 0;
  for (double v : features.values()) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    for (int b = 0; b < 4; ++b) bytes[k++] = static_cast<std::uint8_t>(bits >> (8 * b));
  }
  return bytes;
}

diff::Array decode_features(const std::vector<std::uint8_t>& bytes, std::size_t dim, std::size_t frames) {
  diff::Array out({dim, frames});
  auto values = out.values();
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[4 * i + b]) << (8 * b);
    values[i] = std::bit_cast<float>(bits);
  }
  return out;
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

// Per-frame blend weight for a planted action occupying frames [s, e).
double blend_weight(std::size_t t, std::size_t s, std::size_t e, double width) {
  const double centre = static_cast<double>(t) + 0.5;
  if (width <= 0.0) return (t >= s && t < e) ? 1.0 : 0.0;
  const double inside = std::min(centre - static_cast<double>(s), static_cast<double>(e) - centre);
  return std::clamp(0.5 + inside / width, 0.0, 1.0);
}

const std::set<std::string, std::less<>> kSpecKeys = {
    "num_videos",        "min_length",        "max_length", "feature_dim",  "num_classes",
    "min_actions",       "max_actions",       "min_action_length", "max_action_length",
    "separation_margin", "noise",             "blend_width",       "feature_fps", "val_fraction", "seed"};

}  // namespace

void SyntheticSpec::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("synthetic spec: " + msg); };
  if (num_videos == 0) fail("num_videos must be positive");
  if (feature_dim == 0) fail("feature_dim must be positive");
  if (num_classes == 0) fail("num_classes must be at least 1");
  if (min_length == 0 || min_length > max_length) fail("need 0 < min_length <= max_length");
  if (min_actions > max_actions) fail("min_actions exceeds max_actions");
  if (min_action_length == 0 || min_action_length > max_action_length) {
    fail("need 0 < min_action_length <= max_action_length");
  }
  if (max_actions * max_action_length > min_length) {
    fail("infeasible: " + std::to_string(max_actions) + " actions of up to " + std::to_string(max_action_length) +
         " frames do not fit into videos of " + std::to_string(min_length) + " frames");
  }
  if (!(noise >= 0.0) || !std::isfinite(noise)) fail("noise must be a finite value >= 0");
  if (!(blend_width >= 0.0) || !std::isfinite(blend_width)) fail("blend_width must be >= 0");
  if (!(feature_fps > 0.0) || !std::isfinite(feature_fps)) fail("feature_fps must be positive");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) fail("val_fraction must lie in [0, 1)");
  if (!(separation_margin > -1.0 && separation_margin <= 1.0)) fail("separation_margin must lie in (-1, 1]");
}

std::vector<const Video*> Dataset::split(std::string_view name) const {
  std::vector<const Video*> out;
  for (const auto& v : videos) {
    if (name == "all" || v.record.split == name) out.push_back(&v);
  }
  return out;
}

std::vector<std::vector<double>> make_prototypes(const SyntheticSpec& spec) {
  std::mt19937_64 rng(video_seed(spec.seed, static_cast<std::size_t>(-1)));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> protos;
  const std::size_t D = spec.feature_dim;
  for (std::size_t c = 0; c <= spec.num_classes; ++c) {
    bool placed = false;
    for (int attempt = 0; attempt < kMaxPrototypeAttempts && !placed; ++attempt) {
      std::vector<double> v(D);
      double norm = 0.0;
      for (auto& x : v) {
        x = normal(rng);
        norm += x * x;
      }
      norm = std::sqrt(norm);
      if (norm == 0.0) continue;
      for (auto& x : v) x /= norm;
      placed = std::all_of(protos.begin(), protos.end(), [&](const std::vector<double>& p) {
        double dot = 0.0;
        for (std::size_t i = 0; i < D; ++i) dot += p[i] * v[i];
        return dot < spec.separation_margin;
      });
      if (placed) protos.push_back(std::move(v));
    }
    if (!placed) {
      throw ConfigError("synthetic spec: cannot place " + std::to_string(spec.num_classes + 1) +
                        " prototypes in dimension " + std::to_string(D) + " with margin " +
                        std::to_string(spec.separation_margin));
    }
  }
  return protos;
}

Dataset synthesize(const SyntheticSpec& spec) {
  spec.validate();
  const auto protos = make_prototypes(spec);
  Dataset ds;
  ds.feature_dim = spec.feature_dim;
  ds.feature_fps = spec.feature_fps;
  for (std::size_t c = 1; c <= spec.num_classes; ++c) ds.class_names.push_back("class" + std::to_string(c));

  const auto num_val = static_cast<std::size_t>(std::llround(spec.val_fraction * static_cast<double>(spec.num_videos)));
  for (std::size_t v = 0; v < spec.num_videos; ++v) {
    std::mt19937_64 rng(video_seed(spec.seed, v));
    auto uniform_int = [&](std::size_t lo, std::size_t hi) {
      return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
    };
    const std::size_t T = uniform_int(spec.min_length, spec.max_length);
    const std::size_t n = uniform_int(spec.min_actions, spec.max_actions);
    std::vector<std::size_t> lengths(n);
    std::vector<int> labels(n);
    std::size_t occupied = 0;
    for (std::size_t i = 0; i < n; ++i) {
      lengths[i] = uniform_int(spec.min_action_length, spec.max_action_length);
      labels[i] = static_cast<int>(uniform_int(1, spec.num_classes));
      occupied += lengths[i];
    }
    // Spread the free frames over the n+1 gaps around the actions.
    const std::size_t free = T - occupied;
    std::vector<double> weights(n + 1);
    double total = 0.0;
    for (auto& w : weights) total += (w = std::uniform_real_distribution<double>(0.0, 1.0)(rng));
    std::vector<std::size_t> gaps(n + 1);
    std::size_t used = 0;
    for (std::size_t i = 0; i < n; ++i) {
      gaps[i] = total > 0.0 ? static_cast<std::size_t>(std::floor(static_cast<double>(free) * weights[i] / total)) : 0;
      gaps[i] = std::min(gaps[i], free - used);
      used += gaps[i];
    }
    gaps[n] = free - used;

    std::vector<std::pair<std::size_t, std::size_t>> spans;
    Video video;
    video.record.id = video_id(v);
    video.record.frames = T;
    video.record.feature_fps = spec.feature_fps;
    video.record.split = v + num_val >= spec.num_videos ? "val" : "train";
    std::size_t cursor = 0;
    for (std::size_t i = 0; i < n; ++i) {
      cursor += gaps[i];
      spans.emplace_back(cursor, cursor + lengths[i]);
      video.record.annotations.push_back({static_cast<double>(cursor) / spec.feature_fps,
                                          static_cast<double>(cursor + lengths[i]) / spec.feature_fps, labels[i]});
      cursor += lengths[i];
    }

    diff::Array features({spec.feature_dim, T});
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t t = 0; t < T; ++t) {
      // The strongest planted action at this frame wins; background otherwise.
      double alpha = 0.0;
      int label = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const double a = blend_weight(t, spans[i].first, spans[i].second, spec.blend_width);
        if (a > alpha) {
          alpha = a;
          label = labels[i];
        }
      }
      const auto& bg = protos[0];
      const auto& fg = protos[static_cast<std::size_t>(label)];
      for (std::size_t d = 0; d < spec.feature_dim; ++d) {
        const double clean = (1.0 - alpha) * bg[d] + alpha * fg[d];
        const double noisy = spec.noise > 0.0 ? clean + spec.noise * normal(rng) : clean;
        features.at(d, t) = static_cast<float>(noisy);
      }
    }
    video.features = std::move(features);
    ds.videos.push_back(std::move(video));
  }
  return ds;
}

std::uint32_t checksum(const std::vector<std::uint8_t>& bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks to stay within range.
  std::size_t offset = 0;
  while (offset < bytes.size()) {
    const std::size_t chunk = std::min<std::size_t>(bytes.size() - offset, 1u << 30);
    crc = crc32(crc, bytes.data() + offset, static_cast<uInt>(chunk));
    offset += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

fs::path write(Dataset& dataset, const fs::path& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir / "features", ec);
  if (ec) throw IoError("cannot create " + (out_dir / "features").string() + ": " + ec.message());

  json manifest;
  manifest["format"] = "tal-features";
  manifest["version"] = kManifestVersion;
  manifest["feature_dim"] = dataset.feature_dim;
  manifest["feature_fps"] = dataset.feature_fps;
  manifest["classes"] = dataset.class_names;
  json videos = json::array();
  for (auto& video : dataset.videos) {
    auto& rec = video.record;
    rec.feature_file = "features/" + rec.id + ".f32";
    const auto bytes = encode_features(video.features);
    rec.checksum = checksum(bytes);
    write_bytes(out_dir / rec.feature_file, bytes);
    json anns = json::array();
    for (const auto& a : rec.annotations) anns.push_back({{"start", a.start}, {"end", a.end}, {"label", a.label}});
    json entry = {{"id", rec.id},       {"file", rec.feature_file}, {"frames", rec.frames},
                  {"split", rec.split}, {"crc32", rec.checksum},    {"annotations", anns}};
    if (rec.feature_fps != dataset.feature_fps) entry["feature_fps"] = rec.feature_fps;
    videos.push_back(std::move(entry));
  }
  manifest["videos"] = std::move(videos);

  const fs::path path = out_dir / kManifestName;
  const std::string text = manifest.dump(2) + "\n";
  write_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
  return path;
}

fs::path generate(const SyntheticSpec& spec, const fs::path& out_dir) {
  Dataset ds = synthesize(spec);
  return write(ds, out_dir);
}

Dataset load(const fs::path& manifest_path) {
  json manifest;
  {
    const auto bytes = read_bytes(manifest_path);
    try {
      manifest = json::parse(bytes.begin(), bytes.end());
    } catch (const json::exception& e) {
      throw IoError(manifest_path.string() + ": " + e.what());
    }
  }
  const fs::path root = manifest_path.parent_path();
  Dataset ds;
  auto warn = [&](std::string msg) {
    log::warn(msg);
    ds.warnings.push_back(std::move(msg));
  };

  static const std::set<std::string, std::less<>> top_keys = {"format",      "version", "feature_dim",
                                                              "feature_fps", "classes", "videos"};
  static const std::set<std::string, std::less<>> video_keys = {"id",    "file",  "frames",     "split",
                                                                "crc32", "annotations", "feature_fps"};
  try {
    if (!manifest.is_object()) throw IoError("manifest is not an object");
    for (const auto& [key, _] : manifest.items()) {
      if (!top_keys.contains(key)) warn("manifest: ignoring unknown field '" + key + "'");
    }
    if (manifest.at("format").get<std::string>() != "tal-features") throw IoError("unknown manifest format");
    const int version = manifest.at("version").get<int>();
    if (version > kManifestVersion) throw IoError("manifest version " + std::to_string(version) + " is newer than supported");
    ds.feature_dim = manifest.at("feature_dim").get<std::size_t>();
    ds.feature_fps = manifest.at("feature_fps").get<double>();
    ds.class_names = manifest.at("classes").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw IoError(manifest_path.string() + ": " + e.what());
  }
  if (ds.feature_dim == 0 || !(ds.feature_fps > 0.0) || ds.class_names.empty()) {
    throw IoError(manifest_path.string() + ": feature_dim, feature_fps and classes must be non-empty/positive");
  }

  std::vector<std::string> problems;
  std::set<std::string> seen_ids;
  const json& videos = manifest.contains("videos") ? manifest["videos"] : json::array();
  for (std::size_t i = 0; i < videos.size(); ++i) {
    const json& entry = videos[i];
    std::string name = "videos[" + std::to_string(i) + "]";
    try {
      Video video;
      auto& rec = video.record;
      rec.id = entry.at("id").get<std::string>();
      name = rec.id;
      for (const auto& [key, _] : entry.items()) {
        if (!video_keys.contains(key)) warn(rec.id + ": ignoring unknown field '" + key + "'");
      }
      if (!seen_ids.insert(rec.id).second) throw IoError("duplicate id");
      rec.feature_file = entry.at("file").get<std::string>();
      rec.frames = entry.at("frames").get<std::size_t>();
      rec.feature_fps = entry.value("feature_fps", ds.feature_fps);
      rec.split = entry.value("split", std::string("train"));
      rec.checksum = entry.at("crc32").get<std::uint32_t>();
      if (rec.frames == 0) throw IoError("frames must be positive");
      if (!(rec.feature_fps > 0.0)) throw IoError("feature_fps must be positive");
      for (const auto& a : entry.at("annotations")) {
        ActionInstance inst{a.at("start").get<double>(), a.at("end").get<double>(), a.at("label").get<int>()};
        if (!(inst.start >= 0.0 && inst.start < inst.end && inst.end <= rec.duration())) {
          throw IoError("annotation [" + std::to_string(inst.start) + ", " + std::to_string(inst.end) +
                        "] outside 0 <= s < e <= " + std::to_string(rec.duration()));
        }
        if (inst.label < 1 || static_cast<std::size_t>(inst.label) > ds.num_classes()) {
          throw IoError("annotation label " + std::to_string(inst.label) + " outside [1, " +
                        std::to_string(ds.num_classes()) + "]");
        }
        rec.annotations.push_back(inst);
      }
      const auto bytes = read_bytes(root / rec.feature_file);
      const std::size_t expected = ds.feature_dim * rec.frames * 4;
      if (bytes.size() != expected) {
        throw IoError("feature file has " + std::to_string(bytes.size()) + " bytes, expected " +
                      std::to_string(expected) + " for shape (" + std::to_string(ds.feature_dim) + ", " +
                      std::to_string(rec.frames) + ")");
      }
      if (checksum(bytes) != rec.checksum) throw IoError("checksum mismatch");
      video.features = decode_features(bytes, ds.feature_dim, rec.frames);
      if (!video.features.all_finite()) throw IoError("feature file contains non-finite values");
      ds.videos.push_back(std::move(video));
    } catch (const std::exception& e) {
      problems.push_back(name + ": " + e.what());
    }
  }
  if (!problems.empty()) {
    std::string msg = manifest_path.string() + ": " + std::to_string(problems.size()) + " invalid record(s)";
    for (const auto& p : problems) msg += "\n  " + p;
    throw IoError(msg);
  }
  return ds;
}

SyntheticSpec spec_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("synthetic spec: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("synthetic spec: expected a JSON object");
  SyntheticSpec s;
  try {
    for (const auto& [key, value] : j.items()) {
      if (!kSpecKeys.contains(key)) throw ConfigError("synthetic spec: unknown key '" + key + "'");
    }
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j[key].get<std::remove_reference_t<decltype(field)>>();
    };
    get("num_videos", s.num_videos);
    get("min_length", s.min_length);
    get("max_length", s.max_length);
    get("feature_dim", s.feature_dim);
    get("num_classes", s.num_classes);
    get("min_actions", s.min_actions);
    get("max_actions", s.max_actions);
    get("min_action_length", s.min_action_length);
    get("max_action_length", s.max_action_length);
    get("separation_margin", s.separation_margin);
    get("noise", s.noise);
    get("blend_width", s.blend_width);
    get("feature_fps", s.feature_fps);
    get("val_fraction", s.val_fraction);
    get("seed", s.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("synthetic spec: ") + e.what());
  }
  s.validate();
  return s;
}

std::string spec_to_json_text(const SyntheticSpec& s) {
  json j = {{"num_videos", s.num_videos},
            {"min_length", s.min_length},
            {"max_length", s.max_length},
            {"feature_dim", s.feature_dim},
            {"num_classes", s.num_classes},
            {"min_actions", s.min_actions},
            {"max_actions", s.max_actions},
            {"min_action_length", s.min_action_length},
            {"max_action_length", s.max_action_length},
            {"separation_margin", s.separation_margin},
            {"noise", s.noise},
            {"blend_width", s.blend_width},
            {"feature_fps", s.feature_fps},
            {"val_fraction", s.val_fraction},
            {"seed", s.seed}};
  return j.dump(2) + "\n";
}

}  // namespace tal::data
