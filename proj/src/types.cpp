#include "tal/types.hpp"

#include <algorithm>

namespace tal {

double tiou(const Segment& a, const Segment& b) {
  const double inter = std::max(0.0, std::min(a.end, b.end) - std::max(a.start, b.start));
  const double uni = (a.end - a.start) + (b.end - b.start) - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

std::vector<ActionInstance> seconds_to_frames(const std::vector<ActionInstance>& actions, double fps) {
  std::vector<ActionInstance> out = actions;
  for (auto& a : out) {
    a.start *= fps;
    a.end *= fps;
  }
  return out;
}

}  // namespace tal
