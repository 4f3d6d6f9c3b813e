#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tal/diff/array.hpp"
#include "tal/types.hpp"

namespace tal::data {

/// Parameters of the planted-action generator. Lengths are in frames.
struct SyntheticSpec {
  std::size_t num_videos = 20;
  std::size_t min_length = 256;
  std::size_t max_length = 256;
  std::size_t feature_dim = 32;
  std::size_t num_classes = 5;
  std::size_t min_actions = 1;
  std::size_t max_actions = 3;
  std::size_t min_action_length = 8;
  std::size_t max_action_length = 64;
  double separation_margin = 0.2;
  double noise = 0.1;
  double blend_width = 0.0;
  double feature_fps = 4.0;
  double val_fraction = 0.2;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the first violated constraint, including
  /// specs whose actions cannot fit into the shortest video.
  void validate() const;

  bool operator==(const SyntheticSpec&) const = default;
};

struct VideoRecord {
  std::string id;
  std::string feature_file;  // relative to the manifest directory
  std::size_t frames = 0;
  double feature_fps = 0.0;
  std::string split = "train";
  std::uint32_t checksum = 0;  // crc32 of the feature file bytes
  std::vector<ActionInstance> annotations;  // seconds

  double duration() const { return static_cast<double>(frames) / feature_fps; }
};

struct Video {
  VideoRecord record;
  diff::Array features;  // (D, T)
};

struct Dataset {
  std::size_t feature_dim = 0;
  double feature_fps = 0.0;
  std::vector<std::string> class_names;
  std::vector<Video> videos;
  std::vector<std::string> warnings;

  std::size_t num_classes() const { return class_names.size(); }
  /// Videos whose split equals `name`; "all" selects everything.
  std::vector<const Video*> split(std::string_view name) const;
};

// Manifest file name written next to the features/ directory.
inline constexpr const char* kManifestName = "manifest.json";
inline constexpr int kManifestVersion = 1;

/// Unit vectors mu_0..mu_C (background first), pairwise dot below the margin.
std::vector<std::vector<double>> make_prototypes(const SyntheticSpec& spec);

/// In-memory generation; deterministic per seed.
Dataset synthesize(const SyntheticSpec& spec);

/// synthesize() then write() into `out_dir`. Returns the manifest path.
std::filesystem::path generate(const SyntheticSpec& spec, const std::filesystem::path& out_dir);

/// Writes the manifest plus one float32 file per video; fills checksums.
std::filesystem::path write(Dataset& dataset, const std::filesystem::path& out_dir);

/// Loads and validates. Bad records are collected and reported together in
/// one IoError; unknown manifest fields only produce warnings.
Dataset load(const std::filesystem::path& manifest);

std::uint32_t checksum(const std::vector<std::uint8_t>& bytes);

SyntheticSpec spec_from_json_text(const std::string& text);
std::string spec_to_json_text(const SyntheticSpec& spec);

}  // namespace tal::data
