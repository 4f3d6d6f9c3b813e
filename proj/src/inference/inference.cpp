#include "tal/inference/inference.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <json.hpp>

#include "tal/errors.hpp"
#include "tal/model/model.hpp"

namespace tal::infer {

void InferenceConfig::validate() const {
  if (!(threshold >= 0.0 && threshold < 1.0)) throw ConfigError("inference.threshold must lie in [0, 1)");
  if (top_k == 0) throw ConfigError("inference.top_k must be positive");
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ConfigError("inference.sigma must be positive");
  if (!(score_floor >= 0.0 && score_floor < 1.0)) throw ConfigError("inference.score_floor must lie in [0, 1)");
}

bool ranks_before(const ScoredSegment& a, const ScoredSegment& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.start != b.start) return a.start < b.start;
  return a.label < b.label;
}

std::vector<ScoredSegment> collect(const std::vector<decoder::LevelOutputs>& outputs, double threshold,
                                   const TimeMapping& map, std::size_t top_k) {
  if (!(map.feature_fps > 0.0)) throw std::invalid_argument("collect: feature_fps must be positive");
  std::vector<ScoredSegment> out;
  for (std::size_t l = 0; l < outputs.size(); ++l) {
    const auto& lv = outputs[l];
    const double scale = static_cast<double>(lv.stride) / map.feature_fps;
    for (std::size_t t = 0; t < lv.length(); ++t) {
      double start = lv.start_refined.at(0, t) * scale;
      double end = lv.end_refined.at(0, t) * scale;
      if (map.duration > 0.0) {
        start = std::clamp(start, 0.0, map.duration);
        end = std::clamp(end, 0.0, map.duration);
      }
      if (!(start < end)) continue;
      for (std::size_t c = 0; c < lv.cls_refined.rows(); ++c) {
        const double score = lv.cls_refined.at(c, t);
        if (score > threshold) out.push_back({start, end, static_cast<int>(c) + 1, score, l + 1});
      }
    }
  }
  // Stable so remaining ties keep level/instant order.
  std::stable_sort(out.begin(), out.end(), ranks_before);
  if (out.size() > top_k) out.resize(top_k);
  return out;
}

std::vector<ScoredSegment> soft_nms(std::vector<ScoredSegment> pool, double sigma, double floor) {
  if (!(sigma > 0.0)) throw std::invalid_argument("soft_nms: sigma must be positive");
  std::vector<ScoredSegment> kept;
  kept.reserve(pool.size());
  std::erase_if(pool, [&](const ScoredSegment& s) { return s.score < floor; });
  while (!pool.empty()) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < pool.size(); ++i) {
      if (ranks_before(pool[i], pool[best])) best = i;
    }
    const ScoredSegment top = pool[best];
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(best));
    kept.push_back(top);
    for (auto& s : pool) {
      if (s.label != top.label) continue;
      const double iou = tiou(top.segment(), s.segment());
      s.score *= std::exp(-(iou * iou) / sigma);
    }
    std::erase_if(pool, [&](const ScoredSegment& s) { return s.score < floor; });
  }
  std::stable_sort(kept.begin(), kept.end(), ranks_before);
  return kept;
}

std::vector<ScoredSegment> infer(const ModelConfig& model, const diff::ParamSet& params, const diff::Array& features,
                                 double feature_fps, const InferenceConfig& cfg) {
  cfg.validate();
  auto outputs = run_model(model, params, features);
  for (auto& lv : outputs) decoder::clamp_boundaries(lv);
  const TimeMapping map{feature_fps, static_cast<double>(features.cols()) / feature_fps};
  return soft_nms(collect(outputs, cfg.threshold, map, cfg.top_k), cfg.sigma, cfg.score_floor);
}

void write_detections(std::ostream& out, const std::string& video, const std::vector<ScoredSegment>& detections,
                      const std::vector<std::string>& class_names) {
  for (const auto& d : detections) {
    const auto idx = static_cast<std::size_t>(d.label - 1);
    nlohmann::ordered_json j;
    j["video"] = video;
    j["label"] = idx < class_names.size() ? class_names[idx] : std::to_string(d.label);
    j["start"] = d.start;
    j["end"] = d.end;
    j["score"] = d.score;
    out << j.dump() << '\n';
  }
}

std::vector<DetectionRecord> read_detections(std::istream& in, const std::vector<std::string>& class_names) {
  std::vector<DetectionRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      DetectionRecord r;
      r.video = j.at("video").get<std::string>();
      const auto label = j.at("label").get<std::string>();
      const auto it = std::find(class_names.begin(), class_names.end(), label);
      if (it == class_names.end()) throw IoError("unknown label '" + label + "'");
      r.detection.label = static_cast<int>(it - class_names.begin()) + 1;
      r.detection.start = j.at("start").get<double>();
      r.detection.end = j.at("end").get<double>();
      r.detection.score = j.at("score").get<double>();
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw IoError("detections line " + std::to_string(lineno) + ": " + e.what());
    } catch (const IoError& e) {
      throw IoError("detections line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace tal::infer
