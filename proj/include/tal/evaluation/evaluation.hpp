#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tal/types.hpp"

namespace tal::eval {

struct EvalProtocol {
  std::vector<double> thresholds = {0.3, 0.4, 0.5, 0.6, 0.7};
  std::vector<std::string> class_names;

  /// Thresholds in (0, 1], strictly increasing; throws ConfigError.
  void validate() const;
  /// "0.3:0.1:0.7" (inclusive grid) or a comma list "0.3,0.5".
  static std::vector<double> parse_thresholds(const std::string& text);
};

/// Greedy matching of score-sorted predictions to ground truth. Each
/// prediction takes the highest-tIoU unmatched gt with tIoU >= tau.
std::vector<bool> match(const std::vector<Segment>& preds, const std::vector<Segment>& gts, double tau);

/// All-point interpolated AP; nullopt when num_gt == 0.
std::optional<double> average_precision(const std::vector<bool>& flags, std::size_t num_gt);

/// Predictions and ground truth for one video.
struct VideoResult {
  std::string video;
  std::vector<ScoredSegment> predictions;
  std::vector<ActionInstance> ground_truth;
};

struct MapReport {
  std::vector<double> thresholds;
  std::vector<double> map;  // per threshold
  double average = 0.0;
  // per_class[t][c]: AP of class c+1 at threshold t, absent without gt.
  std::vector<std::vector<std::optional<double>>> per_class;
  std::vector<std::string> class_names;
};

/// Pools predictions of each class over all videos (score descending,
/// earlier start, then video order) and averages AP over classes with gt.
MapReport map_report(const std::vector<VideoResult>& results, const EvalProtocol& protocol);

/// Aligned table: one header row of thresholds plus "Avg.", one mAP row.
std::string format_table(const MapReport& report);
std::string to_json_text(const MapReport& report);

}  // namespace tal::eval
