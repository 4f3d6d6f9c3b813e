#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "tal/diff/array.hpp"
#include "tal/diff/graph.hpp"
#include "tal/evaluation/evaluation.hpp"
#include "tal/types.hpp"

// Self-verification: finite-difference gradient suites and brute-force
// reference implementations that share no code with the production paths.
namespace tal::checks {

struct CheckResult {
  std::string name;
  double max_error = 0.0;
  double tolerance = 0.0;
  std::size_t samples = 0;
  bool passed = false;
};

struct Report {
  std::vector<CheckResult> results;
  double seconds = 0.0;

  bool passed() const;
  /// One aligned line per check: name, samples, max error, tolerance, status.
  std::string format() const;
  void append(const Report& other);
};

// Gradient suites ----------------------------------------------------------------

inline constexpr double kOpTolerance = 1e-4;
inline constexpr double kLossTolerance = 1e-3;

struct GradientOptions {
  std::size_t points = 10;
  std::uint64_t seed = 1;
  /// Scales the backward pass of one op in every graph built (negative control).
  std::optional<std::pair<diff::Op, double>> fault;
  bool include_composed = true;
};

Report gradient_suite(const GradientOptions& options = {});

// Spectral oracle ----------------------------------------------------------------

/// y[c, t] = sum_k x[c, (t - k) mod T] * h[c, k]
diff::Array circular_convolution(const diff::Array& x, const diff::Array& kernel);

/// Real part of the inverse transform of a stacked (2C, T) spectrum, by
/// direct summation.
diff::Array naive_inverse_real(const diff::Array& stacked);

/// Direct-summation forward transform, stacked as (2C, T).
diff::Array naive_spectrum(const diff::Array& x);

/// Filter path with a given stacked W and the full parameterized path, each
/// against the O(T^2) reference, over `pairs` random draws per length.
Report spectral_suite(std::size_t pairs = 50, std::uint64_t seed = 2,
                      const std::vector<std::size_t>& lengths = {7, 8, 33, 64});

// Detection and evaluation oracles -------------------------------------------

std::vector<ScoredSegment> reference_soft_nms(const std::vector<ScoredSegment>& candidates, double sigma,
                                              double floor);
std::vector<bool> reference_match(const std::vector<Segment>& preds, const std::vector<Segment>& gts, double tau);
/// Sum over true-positive ranks of the best precision at or after that rank.
double reference_ap(const std::vector<bool>& flags, std::size_t num_gt);
/// Per-threshold mAP by pooling and scanning every gt per prediction.
std::vector<double> reference_map(const std::vector<eval::VideoResult>& results, const std::vector<double>& thresholds,
                                  std::size_t num_classes);

/// Random candidate list with deliberate score and boundary ties.
std::vector<ScoredSegment> random_candidates(std::mt19937_64& rng, std::size_t max_count, int num_classes);

/// soft_nms and match/average_precision against the references on
/// `instances` random cases each, plus the two hand cases.
Report oracle_suite(std::size_t instances = 1000, std::uint64_t seed = 3);

/// Everything above.
Report selftest(std::uint64_t seed = 1);

}  // namespace tal::checks
