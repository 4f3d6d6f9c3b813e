#pragma once

#include <cstddef>
#include <ostream>
#include <string>
#include <vector>

#include "tal/diff/array.hpp"
#include "tal/diff/params.hpp"
#include "tal/model/config.hpp"
#include "tal/model/decoder.hpp"
#include "tal/types.hpp"

namespace tal::infer {

struct InferenceConfig {
  double threshold = 0.001;  // lambda
  std::size_t top_k = 200;
  double sigma = 0.5;
  double score_floor = 0.001;

  void validate() const;  // throws ConfigError
};

struct TimeMapping {
  double feature_fps = 1.0;
  double duration = 0.0;  // seconds; segments are clamped to [0, duration]
};

/// Candidate order: score descending, then earlier start, then lower class.
bool ranks_before(const ScoredSegment& a, const ScoredSegment& b);

/// Thresholded candidates in seconds, best top_k first. Candidates that
/// collapse after clamping to the video extent are dropped.
std::vector<ScoredSegment> collect(const std::vector<decoder::LevelOutputs>& outputs, double threshold,
                                   const TimeMapping& map, std::size_t top_k);

/// Per-class Gaussian Soft-NMS. Output sorted by final score.
std::vector<ScoredSegment> soft_nms(std::vector<ScoredSegment> candidates, double sigma, double floor);

/// Full pipeline on one (input_dim, T) feature matrix.
std::vector<ScoredSegment> infer(const ModelConfig& model, const diff::ParamSet& params, const diff::Array& features,
                                 double feature_fps, const InferenceConfig& cfg);

/// One JSON object per line: {"video","label","start","end","score"}.
void write_detections(std::ostream& out, const std::string& video, const std::vector<ScoredSegment>& detections,
                      const std::vector<std::string>& class_names);

struct DetectionRecord {
  std::string video;
  ScoredSegment detection;
};

/// Parses write_detections() output; labels are mapped back through class_names.
std::vector<DetectionRecord> read_detections(std::istream& in, const std::vector<std::string>& class_names);

}  // namespace tal::infer
