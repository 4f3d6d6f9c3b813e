#include "tal/evaluation/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "tal/errors.hpp"

namespace tal::eval {

void EvalProtocol::validate() const {
  if (thresholds.empty()) throw ConfigError("eval: at least one threshold required");
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    if (!(thresholds[i] > 0.0 && thresholds[i] <= 1.0)) throw ConfigError("eval: thresholds must lie in (0, 1]");
    if (i > 0 && !(thresholds[i] > thresholds[i - 1])) throw ConfigError("eval: thresholds must be strictly increasing");
  }
}

std::vector<double> EvalProtocol::parse_thresholds(const std::string& text) {
  auto number = [&](const std::string& s) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != s.size()) throw ConfigError("eval: cannot parse threshold '" + s + "'");
    return v;
  };
  std::vector<double> out;
  if (text.find(':') != std::string::npos) {
    std::vector<std::string> parts;
    std::stringstream ss(text);
    for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
    if (parts.size() != 3) throw ConfigError("eval: grid must look like lo:step:hi");
    const double lo = number(parts[0]), step = number(parts[1]), hi = number(parts[2]);
    if (!(step > 0.0) || hi < lo) throw ConfigError("eval: grid needs step > 0 and hi >= lo");
    const auto n = static_cast<long>(std::floor((hi - lo) / step + 1e-9));
    // Round to 12 decimals so 0.3 + 2*0.1 prints and compares as 0.5.
    for (long i = 0; i <= n; ++i) out.push_back(std::round((lo + static_cast<double>(i) * step) * 1e12) / 1e12);
  } else {
    std::stringstream ss(text);
    for (std::string p; std::getline(ss, p, ',');) out.push_back(number(p));
  }
  EvalProtocol probe;
  probe.thresholds = out;
  probe.validate();
  return out;
}

std::vector<bool> match(const std::vector<Segment>& preds, const std::vector<Segment>& gts, double tau) {
  std::vector<bool> flags(preds.size(), false);
  std::vector<bool> taken(gts.size(), false);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    int best = -1;
    double best_iou = tau;
    for (std::size_t j = 0; j < gts.size(); ++j) {
      if (taken[j]) continue;
      const double iou = tiou(preds[i], gts[j]);
      if (iou >= best_iou && (best < 0 || iou > best_iou)) {
        best = static_cast<int>(j);
        best_iou = iou;
      }
    }
    if (best >= 0) {
      taken[static_cast<std::size_t>(best)] = true;
      flags[i] = true;
    }
  }
  return flags;
}

std::optional<double> average_precision(const std::vector<bool>& flags, std::size_t num_gt) {
  if (num_gt == 0) return std::nullopt;
  const std::size_t n = flags.size();
  std::vector<double> precision(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tp += flags[i] ? 1 : 0;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
  }
  // Monotone envelope from the right, then sum precision at each recall step.
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double area = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (flags[i]) area += precision[i];
  }
  return area / static_cast<double>(num_gt);
}

MapReport map_report(const std::vector<VideoResult>& results, const EvalProtocol& protocol) {
  protocol.validate();
  MapReport report;
  report.thresholds = protocol.thresholds;
  report.class_names = protocol.class_names;
  std::size_t num_classes = protocol.class_names.size();
  for (const auto& r : results) {
    for (const auto& g : r.ground_truth) num_classes = std::max(num_classes, static_cast<std::size_t>(g.label));
    for (const auto& p : r.predictions) num_classes = std::max(num_classes, static_cast<std::size_t>(p.label));
  }

  struct Pooled {
    ScoredSegment seg;
    std::size_t video;
  };
  report.per_class.assign(protocol.thresholds.size(), std::vector<std::optional<double>>(num_classes));
  for (std::size_t c = 1; c <= num_classes; ++c) {
    const int label = static_cast<int>(c);
    std::vector<Pooled> pooled;
    std::vector<std::vector<Segment>> gts(results.size());
    std::size_t num_gt = 0;
    for (std::size_t v = 0; v < results.size(); ++v) {
      for (const auto& p : results[v].predictions) {
        if (p.label == label) pooled.push_back({p, v});
      }
      for (const auto& g : results[v].ground_truth) {
        if (g.label == label) gts[v].push_back({g.start, g.end});
      }
      num_gt += gts[v].size();
    }
    std::stable_sort(pooled.begin(), pooled.end(), [](const Pooled& a, const Pooled& b) {
      if (a.seg.score != b.seg.score) return a.seg.score > b.seg.score;
      if (a.seg.start != b.seg.start) return a.seg.start < b.seg.start;
      return a.video < b.video;
    });
    for (std::size_t k = 0; k < protocol.thresholds.size(); ++k) {
      // Matching is independent per video, so split the pooled order by video.
      std::vector<std::vector<Segment>> per_video(results.size());
      std::vector<std::vector<std::size_t>> slots(results.size());
      for (std::size_t i = 0; i < pooled.size(); ++i) {
        per_video[pooled[i].video].push_back(pooled[i].seg.segment());
        slots[pooled[i].video].push_back(i);
      }
      std::vector<bool> flags(pooled.size(), false);
      for (std::size_t v = 0; v < results.size(); ++v) {
        const auto f = match(per_video[v], gts[v], protocol.thresholds[k]);
        for (std::size_t i = 0; i < f.size(); ++i) flags[slots[v][i]] = f[i];
      }
      report.per_class[k][c - 1] = average_precision(flags, num_gt);
    }
  }

  for (std::size_t k = 0; k < protocol.thresholds.size(); ++k) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& ap : report.per_class[k]) {
      if (ap) {
        sum += *ap;
        ++count;
      }
    }
    report.map.push_back(count > 0 ? sum / static_cast<double>(count) : 0.0);
  }
  report.average = std::accumulate(report.map.begin(), report.map.end(), 0.0) / static_cast<double>(report.map.size());
  return report;
}

std::string format_table(const MapReport& report) {
  std::string header = "tIoU ";
  std::string row = "mAP  ";
  char buf[32];
  for (double t : report.thresholds) {
    std::snprintf(buf, sizeof buf, " %7.2f", t);
    header += buf;
  }
  header += "    Avg.";
  for (double m : report.map) {
    std::snprintf(buf, sizeof buf, " %7.2f", 100.0 * m);
    row += buf;
  }
  std::snprintf(buf, sizeof buf, " %7.2f", 100.0 * report.average);
  row += buf;
  return header + "\n" + row + "\n";
}

std::string to_json_text(const MapReport& report) {
  nlohmann::ordered_json j;
  j["thresholds"] = report.thresholds;
  j["mAP"] = report.map;
  j["average"] = report.average;
  nlohmann::ordered_json classes = nlohmann::ordered_json::array();
  const std::size_t num_classes = report.per_class.empty() ? 0 : report.per_class.front().size();
  for (std::size_t c = 0; c < num_classes; ++c) {
    nlohmann::ordered_json entry;
    entry["class"] = c < report.class_names.size() ? report.class_names[c] : std::to_string(c + 1);
    nlohmann::ordered_json aps = nlohmann::ordered_json::array();
    for (const auto& per_threshold : report.per_class) {
      if (per_threshold[c]) {
        aps.push_back(*per_threshold[c]);
      } else {
        aps.push_back(nullptr);
      }
    }
    entry["AP"] = aps;
    classes.push_back(entry);
  }
  j["per_class"] = classes;
  return j.dump(2) + "\n";
}

}  // namespace tal::eval
