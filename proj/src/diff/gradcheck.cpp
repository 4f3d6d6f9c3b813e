#include "tal/diff/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace tal::diff {
namespace {

void check_step(double step) {
  if (!(step >= 1e-7 && step <= 1e-3)) throw std::invalid_argument("fd step must lie in [1e-7, 1e-3]");
}

}  // namespace

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
}

double fd_check(Graph& graph, const Bindings& bindings, NodeId output, std::string_view leaf, double step) {
  check_step(step);
  const auto& named = graph.named_inputs();
  auto it = named.find(leaf);
  if (it == named.end()) throw std::invalid_argument("fd_check: graph has no input '" + std::string(leaf) + "'");
  const Array* base = bindings.find(leaf);
  if (base == nullptr) throw std::invalid_argument("fd_check: input '" + std::string(leaf) + "' is not bound");

  graph.forward(bindings);
  if (graph.value(output).size() != 1) throw std::invalid_argument("fd_check: output is not a scalar");
  graph.backward(output, Array::scalar(1.0));
  const Array analytic = graph.grad(it->second);
  const Array point = *base;

  auto eval = [&](const Array& perturbed) {
    Bindings local = bindings;
    local.bind(std::string(leaf), perturbed);
    graph.forward(local);
    return graph.value(output)[0];
  };
  const double err = fd_check(eval, point, analytic, step);
  graph.forward(bindings);
  return err;
}

double fd_check(const std::function<double(const Array&)>& f, const Array& point, const Array& analytic,
                double step) {
  check_step(step);
  if (analytic.shape() != point.shape()) throw std::invalid_argument("fd_check: gradient shape mismatch");
  double worst = 0.0;
  Array probe = point;
  const double mid = f(point);
  for (std::size_t i = 0; i < point.size(); ++i) {
    probe[i] = point[i] + step;
    const double up = f(probe);
    probe[i] = point[i] - step;
    const double down = f(probe);
    probe[i] = point[i];
    // A relu or max kink inside [x - h, x + h] spoils the central difference
    // but leaves the one-sided difference on the point's own side intact. A
    // wrong gradient disagrees with all three.
    const double err = std::min({relative_error(analytic[i], (up - down) / (2.0 * step)),
                                 relative_error(analytic[i], (up - mid) / step),
                                 relative_error(analytic[i], (mid - down) / step)});
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace tal::diff
