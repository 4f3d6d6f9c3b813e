#pragma once

#include <cmath>
#include <random>
#include <string>

#include "tal/diff/params.hpp"

namespace tal::detail {

using Rng = std::mt19937_64;

inline diff::Array uniform(diff::Shape shape, double bound, Rng& rng) {
  diff::Array out(std::move(shape));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : out.values()) v = dist(rng);
  return out;
}

// Kernel-3 conv weight (out, in_per_group, 3) with fan-in scaled uniform init.
inline void add_conv(diff::ParamSet& params, const std::string& prefix, std::size_t out, std::size_t in_per_group,
                     Rng& rng, double gain = 1.0) {
  const double bound = gain / std::sqrt(static_cast<double>(in_per_group * 3));
  params.set(prefix + ".w", uniform({out, in_per_group, 3}, bound, rng));
  params.set(prefix + ".b", diff::Array({out}));
}

inline void add_linear(diff::ParamSet& params, const std::string& prefix, std::size_t out, std::size_t in, Rng& rng,
                       double gain = 1.0) {
  const double bound = gain / std::sqrt(static_cast<double>(in));
  params.set(prefix + ".w", uniform({out, in}, bound, rng));
  params.set(prefix + ".b", diff::Array({out}));
}

inline void add_norm(diff::ParamSet& params, const std::string& prefix, std::size_t channels) {
  params.set(prefix + ".scale", diff::Array({channels}, 1.0));
  params.set(prefix + ".shift", diff::Array({channels}));
}

inline void zero(diff::ParamSet& params, const std::string& path) { params.get(path).fill(0.0); }

}  // namespace tal::detail
