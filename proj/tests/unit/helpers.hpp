#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "tal/diff/array.hpp"
#include "tal/model/config.hpp"

namespace tal::test {

inline diff::Array random_array(diff::Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  diff::Array out(std::move(shape));
  std::normal_distribution<double> n(0.0, scale);
  for (double& v : out.values()) v = n(rng);
  return out;
}

inline ModelConfig tiny_model(std::size_t levels = 3) {
  ModelConfig cfg;
  cfg.encoder.input_dim = 4;
  cfg.encoder.channels = 8;
  cfg.encoder.levels = levels;
  cfg.encoder.group_count = 2;
  cfg.encoder.ffn_expansion = 2;
  cfg.decoder.num_classes = 2;
  cfg.decoder.bins = 4;
  return cfg;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("tal_" + tag + "_" + std::to_string(rd()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace tal::test
