#pragma once

#include <cstddef>
#include <vector>

namespace tal {

/// Ground-truth action (s, e, a). Units depend on context: seconds in
/// datasets, feature frames inside training.
struct ActionInstance {
  double start = 0.0;
  double end = 0.0;
  int label = 1;  // 1..C

  bool operator==(const ActionInstance&) const = default;
};

struct Segment {
  double start = 0.0;
  double end = 0.0;
};

/// A detection. Times in seconds; label in 1..C.
struct ScoredSegment {
  double start = 0.0;
  double end = 0.0;
  int label = 1;
  double score = 0.0;
  std::size_t level = 0;

  Segment segment() const { return {start, end}; }
  bool operator==(const ScoredSegment&) const = default;
};

/// Temporal IoU |a n b| / |a u b|; 0 when the union is empty.
double tiou(const Segment& a, const Segment& b);

std::vector<ActionInstance> seconds_to_frames(const std::vector<ActionInstance>& actions, double fps);

}  // namespace tal
