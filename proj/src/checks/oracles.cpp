#include <algorithm>
#include <array>
#include <bit>
#include <chrono>
#include <cmath>
#include <numbers>

#include "tal/checks/checks.hpp"
#include "tal/evaluation/evaluation.hpp"
#include "tal/inference/inference.hpp"
#include "tal/model/encoder.hpp"

namespace tal::checks {

using diff::Array;
using Rng = std::mt19937_64;

namespace {

Array normal_array(diff::Shape shape, Rng& rng) {
  Array a(std::move(shape));
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& v : a.values()) v = n(rng);
  return a;
}

double max_abs(const Array& a) {
  double m = 0.0;
  for (double v : a.values()) m = std::max(m, std::abs(v));
  return m;
}

// Normwise relative difference; NaN-safe (a NaN anywhere reports NaN).
double normwise(const Array& got, const Array& want) {
  if (got.shape() != want.shape()) return std::numeric_limits<double>::infinity();
  double diff = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    const double d = std::abs(got[i] - want[i]);
    if (std::isnan(d)) return d;
    diff = std::max(diff, d);
  }
  return diff / std::max(max_abs(want), 1e-300);
}

// Zero-padded kernel-3 convolution with one kernel per row.
Array depthwise3(const Array& x, const Array& w, const Array& b) {
  const std::size_t R = x.rows(), T = x.cols();
  Array y({R, T});
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t t = 0; t < T; ++t) {
      double acc = b[r];
      for (std::size_t k = 0; k < 3; ++k) {
        const long src = static_cast<long>(t) + static_cast<long>(k) - 1;
        if (src >= 0 && src < static_cast<long>(T)) acc += w[r * 3 + k] * x.at(r, static_cast<std::size_t>(src));
      }
      y.at(r, t) = acc;
    }
  }
  return y;
}

double seg_iou(double s1, double e1, double s2, double e2) {
  const double lo = s1 > s2 ? s1 : s2;
  const double hi = e1 < e2 ? e1 : e2;
  const double inter = hi - lo > 0.0 ? hi - lo : 0.0;
  const double uni = (e1 - s1) + (e2 - s2) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

// a strictly ahead of b in score order (score, then start, then label).
bool ahead(const ScoredSegment& a, const ScoredSegment& b) {
  if (a.score > b.score) return true;
  if (a.score < b.score) return false;
  if (a.start < b.start) return true;
  if (a.start > b.start) return false;
  return a.label < b.label;
}

CheckResult result(std::string name, double err, double tol, std::size_t samples) {
  return {std::move(name), err, tol, samples, err <= tol};
}

}  // namespace

Array circular_convolution(const Array& x, const Array& kernel) {
  const std::size_t C = x.rows(), T = x.cols();
  Array y({C, T});
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t t = 0; t < T; ++t) {
      double acc = 0.0;
      for (std::size_t k = 0; k < T; ++k) acc += x.at(c, (t + T - k) % T) * kernel.at(c, k);
      y.at(c, t) = acc;
    }
  }
  return y;
}

Array naive_inverse_real(const Array& stacked) {
  const std::size_t C = stacked.rows() / 2, T = stacked.cols();
  Array h({C, T});
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t k = 0; k < T; ++k) {
      double acc = 0.0;
      for (std::size_t m = 0; m < T; ++m) {
        const double angle = 2.0 * std::numbers::pi * static_cast<double>((m * k) % T) / static_cast<double>(T);
        acc += stacked.at(c, m) * std::cos(angle) - stacked.at(C + c, m) * std::sin(angle);
      }
      h.at(c, k) = acc / static_cast<double>(T);
    }
  }
  return h;
}

Array naive_spectrum(const Array& x) {
  const std::size_t C = x.rows(), T = x.cols();
  Array s({2 * C, T});
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t m = 0; m < T; ++m) {
      double re = 0.0, im = 0.0;
      for (std::size_t t = 0; t < T; ++t) {
        const double angle = 2.0 * std::numbers::pi * static_cast<double>((m * t) % T) / static_cast<double>(T);
        re += x.at(c, t) * std::cos(angle);
        im -= x.at(c, t) * std::sin(angle);
      }
      s.at(c, m) = re;
      s.at(C + c, m) = im;
    }
  }
  return s;
}

Report spectral_suite(std::size_t pairs, std::uint64_t seed, const std::vector<std::size_t>& lengths) {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(seed);
  constexpr double kTol = 1e-8;
  constexpr std::size_t C = 3;
  double given = 0.0, learned = 0.0;
  std::size_t samples = 0;
  for (std::size_t T : lengths) {
    for (std::size_t i = 0; i < pairs; ++i) {
      const Array x = normal_array({C, T}, rng);
      // Arbitrary (non-Hermitian) filter applied to the spectrum.
      const Array w = normal_array({2 * C, T}, rng);
      diff::Graph g;
      auto out = encoder::apply_spectral_filter(g, g.input("x"), g.input("w"));
      diff::Bindings b;
      b.bind("x", x).bind("w", w);
      g.forward(b);
      const double e1 = normwise(g.value(out), circular_convolution(x, naive_inverse_real(w)));

      // Filter generated from the spectrum by the two depthwise convs.
      diff::ParamSet params;
      params.set("f.conv1.w", normal_array({2 * C, 1, 3}, rng));
      params.set("f.conv1.b", normal_array({2 * C}, rng));
      params.set("f.conv2.w", normal_array({2 * C, 1, 3}, rng));
      params.set("f.conv2.b", normal_array({2 * C}, rng));
      const Array got = encoder::global_filter(x, params, "f");
      Array hidden = depthwise3(naive_spectrum(x), params.get("f.conv1.w"), params.get("f.conv1.b"));
      for (double& v : hidden.values()) v = v > 0.0 ? v : 0.0;
      const Array wphi = depthwise3(hidden, params.get("f.conv2.w"), params.get("f.conv2.b"));
      const double e2 = normwise(got, circular_convolution(x, naive_inverse_real(wphi)));

      given = std::isnan(e1) ? e1 : std::max(given, e1);
      learned = std::isnan(e2) ? e2 : std::max(learned, e2);
      ++samples;
    }
  }
  Report report;
  report.results.push_back(result("spectral.given_filter", given, kTol, samples));
  report.results.push_back(result("spectral.global_filter", learned, kTol, samples));
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

std::vector<ScoredSegment> reference_soft_nms(const std::vector<ScoredSegment>& candidates, double sigma,
                                              double floor) {
  std::vector<ScoredSegment> c = candidates;
  std::vector<char> alive(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) alive[i] = c[i].score >= floor ? 1 : 0;
  std::vector<ScoredSegment> picked;
  for (;;) {
    std::size_t best = c.size();
    for (std::size_t i = 0; i < c.size(); ++i) {
      if (alive[i] && (best == c.size() || ahead(c[i], c[best]))) best = i;
    }
    if (best == c.size()) break;
    alive[best] = 0;
    picked.push_back(c[best]);
    for (std::size_t i = 0; i < c.size(); ++i) {
      if (!alive[i] || c[i].label != c[best].label) continue;
      const double iou = seg_iou(c[best].start, c[best].end, c[i].start, c[i].end);
      c[i].score = c[i].score * std::exp(-(iou * iou) / sigma);
      if (c[i].score < floor) alive[i] = 0;
    }
  }
  std::stable_sort(picked.begin(), picked.end(), ahead);
  return picked;
}

std::vector<bool> reference_match(const std::vector<Segment>& preds, const std::vector<Segment>& gts, double tau) {
  std::vector<bool> flags;
  std::vector<bool> used(gts.size(), false);
  for (const auto& p : preds) {
    // Enumerate every eligible gt and keep the first with maximal overlap.
    double top = -1.0;
    std::size_t pick = gts.size();
    for (std::size_t j = 0; j < gts.size(); ++j) {
      const double iou = seg_iou(p.start, p.end, gts[j].start, gts[j].end);
      if (used[j] || iou < tau) continue;
      if (iou > top) {
        top = iou;
        pick = j;
      }
    }
    if (pick < gts.size()) used[pick] = true;
    flags.push_back(pick < gts.size());
  }
  return flags;
}

double reference_ap(const std::vector<bool>& flags, std::size_t num_gt) {
  if (num_gt == 0) return std::numeric_limits<double>::quiet_NaN();
  std::vector<double> precision;
  std::size_t hits = 0;
  for (std::size_t k = 0; k < flags.size(); ++k) {
    if (flags[k]) ++hits;
    precision.push_back(static_cast<double>(hits) / static_cast<double>(k + 1));
  }
  double area = 0.0;
  for (std::size_t i = 0; i < flags.size(); ++i) {
    if (!flags[i]) continue;
    double best = precision[i];
    for (std::size_t j = i; j < flags.size(); ++j) best = std::max(best, precision[j]);
    area += best;
  }
  return area / static_cast<double>(num_gt);
}

std::vector<double> reference_map(const std::vector<eval::VideoResult>& results, const std::vector<double>& thresholds,
                                  std::size_t num_classes) {
  struct Entry {
    double score, start, end;
    std::size_t video;
  };
  std::vector<double> out;
  for (double tau : thresholds) {
    double sum = 0.0;
    std::size_t classes = 0;
    for (int c = 1; c <= static_cast<int>(num_classes); ++c) {
      std::size_t num_gt = 0;
      for (const auto& r : results) {
        for (const auto& g : r.ground_truth) num_gt += g.label == c ? 1 : 0;
      }
      if (num_gt == 0) continue;
      std::vector<Entry> entries;
      for (std::size_t v = 0; v < results.size(); ++v) {
        for (const auto& p : results[v].predictions) {
          if (p.label == c) entries.push_back({p.score, p.start, p.end, v});
        }
      }
      std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.start != b.start) return a.start < b.start;
        return a.video < b.video;
      });
      std::vector<std::vector<bool>> used(results.size());
      for (std::size_t v = 0; v < results.size(); ++v) used[v].assign(results[v].ground_truth.size(), false);
      std::vector<bool> flags;
      for (const auto& e : entries) {
        const auto& gts = results[e.video].ground_truth;
        double top = -1.0;
        std::size_t pick = gts.size();
        for (std::size_t j = 0; j < gts.size(); ++j) {
          if (gts[j].label != c || used[e.video][j]) continue;
          const double iou = seg_iou(e.start, e.end, gts[j].start, gts[j].end);
          if (iou >= tau && iou > top) {
            top = iou;
            pick = j;
          }
        }
        if (pick < gts.size()) used[e.video][pick] = true;
        flags.push_back(pick < gts.size());
      }
      sum += reference_ap(flags, num_gt);
      ++classes;
    }
    out.push_back(classes > 0 ? sum / static_cast<double>(classes) : 0.0);
  }
  return out;
}

std::vector<ScoredSegment> random_candidates(Rng& rng, std::size_t max_count, int num_classes) {
  const std::size_t n = rng() % (max_count + 1);
  std::vector<ScoredSegment> out;
  for (std::size_t i = 0; i < n; ++i) {
    ScoredSegment s;
    // Coarse grids make exact duplicates and score ties common.
    s.start = 0.5 * static_cast<double>(rng() % 20);
    s.end = s.start + 0.5 * static_cast<double>(1 + rng() % 10);
    s.label = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(num_classes));
    s.score = (rng() % 2 == 0) ? 0.1 * static_cast<double>(1 + rng() % 10)
                               : std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    s.level = 1 + rng() % 3;
    out.push_back(s);
  }
  return out;
}

Report oracle_suite(std::size_t instances, std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(seed);
  Report report;

  // Soft-NMS: bit-identical output lists.
  {
    std::size_t mismatches = 0;
    for (std::size_t k = 0; k < instances; ++k) {
      const auto cands = random_candidates(rng, 64, 3);
      const double sigma = std::array{0.3, 0.5, 1.0}[rng() % 3];
      const double floor = std::array{0.0, 0.001, 0.05}[rng() % 3];
      if (infer::soft_nms(cands, sigma, floor) != reference_soft_nms(cands, sigma, floor)) ++mismatches;
    }
    report.results.push_back(result("oracle.soft_nms", static_cast<double>(mismatches), 0.0, instances));
  }

  // Matching and AP: identical flags and identical AP bits.
  {
    std::size_t mismatches = 0;
    for (std::size_t k = 0; k < instances; ++k) {
      auto preds = random_candidates(rng, 8, 1);
      std::stable_sort(preds.begin(), preds.end(), infer::ranks_before);
      std::vector<Segment> ps, gs;
      for (const auto& p : preds) ps.push_back(p.segment());
      const std::size_t num_gt = 1 + rng() % 4;
      for (const auto& g : random_candidates(rng, 64, 1)) {
        if (gs.size() < num_gt) gs.push_back(g.segment());
      }
      while (gs.size() < num_gt) gs.push_back({1.0, 2.0});
      const double tau = 0.1 * static_cast<double>(1 + rng() % 9);
      const auto flags = eval::match(ps, gs, tau);
      const auto ap = eval::average_precision(flags, gs.size());
      const double ref = reference_ap(reference_match(ps, gs, tau), gs.size());
      if (flags != reference_match(ps, gs, tau) || !ap || std::bit_cast<std::uint64_t>(*ap) != std::bit_cast<std::uint64_t>(ref)) {
        ++mismatches;
      }
    }
    report.results.push_back(result("oracle.match_ap", static_cast<double>(mismatches), 0.0, instances));
  }

  // Hand cases.
  {
    const double ap = eval::average_precision({false, true}, 1).value_or(-1.0);
    report.results.push_back(result("hand.ap_fp_tp", std::abs(ap - 0.5), 1e-9, 1));
    const auto kept = infer::soft_nms({{1.0, 3.0, 1, 0.9, 1}, {1.0, 3.0, 1, 0.8, 1}}, 0.5, 0.001);
    const double want = 0.8 * std::exp(-2.0);
    const double err = kept.size() == 2 ? std::abs(kept[1].score - want) + std::abs(kept[0].score - 0.9)
                                        : std::numeric_limits<double>::infinity();
    report.results.push_back(result("hand.soft_nms_decay", err, 1e-9, 1));
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

Report selftest(std::uint64_t seed) {
  Report report = gradient_suite({.points = 10, .seed = seed, .fault = std::nullopt, .include_composed = true});
  report.append(spectral_suite(50, seed + 1));
  report.append(oracle_suite(1000, seed + 2));
  return report;
}

}  // namespace tal::checks
