#pragma once

#include <functional>
#include <string_view>

#include "tal/diff/array.hpp"
#include "tal/diff/graph.hpp"

namespace tal::diff {

inline constexpr double kDefaultFdStep = 1e-5;

/// |analytic - numeric| / max(1, |analytic|)
double relative_error(double analytic, double numeric);

/// Compares the reverse-mode gradient of a scalar `output` with respect to the
/// named input `leaf` against central differences. Returns the max relative
/// error over the leaf's entries. Leaves the graph evaluated at the original
/// bindings.
double fd_check(Graph& graph, const Bindings& bindings, NodeId output, std::string_view leaf,
                double step = kDefaultFdStep);

/// Same comparison for an arbitrary scalar function of one array.
double fd_check(const std::function<double(const Array&)>& f, const Array& point, const Array& analytic,
                double step = kDefaultFdStep);

}  // namespace tal::diff
