#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>

#include "tal/checks/checks.hpp"
#include "tal/diff/gradcheck.hpp"
#include "tal/model/model.hpp"
#include "tal/training/loss.hpp"

namespace tal::checks {

using diff::Array;
using diff::Bindings;
using diff::Graph;
using diff::NodeId;
using diff::Op;
using Rng = std::mt19937_64;

bool Report::passed() const {
  for (const auto& r : results) {
    if (!r.passed) return false;
  }
  return true;
}

std::string Report::format() const {
  std::string out;
  char buf[160];
  for (const auto& r : results) {
    std::snprintf(buf, sizeof buf, "%-34s %6zu  max_err %.3e  tol %.1e  %s\n", r.name.c_str(), r.samples, r.max_error,
                  r.tolerance, r.passed ? "PASS" : "FAIL");
    out += buf;
  }
  return out;
}

void Report::append(const Report& other) {
  results.insert(results.end(), other.results.begin(), other.results.end());
  seconds += other.seconds;
}

namespace {

Array random_array(diff::Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Array a(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : a.values()) v = dist(rng);
  return a;
}

struct Built {
  Graph g;
  Bindings b;
  NodeId out = 0;
  std::vector<std::string> leaves;

  NodeId leaf(const std::string& name, Array value) {
    NodeId id = g.input(name);
    b.bind(name, std::move(value));
    leaves.push_back(name);
    return id;
  }

  // Random linear functional of y so every output entry gets a distinct weight.
  void finish(NodeId y, const diff::Shape& shape, Rng& rng, const std::function<bool(std::size_t, std::size_t)>& keep = {}) {
    Array r = random_array(shape, rng);
    if (keep) {
      for (std::size_t i = 0; i < r.rows(); ++i) {
        for (std::size_t j = 0; j < r.cols(); ++j) {
          if (!keep(i, j)) r.at(i, j) = 0.0;
        }
      }
    }
    out = g.sum(g.mul(y, g.constant(std::move(r))));
  }
};

struct OpCase {
  std::string name;
  Op op;
  std::function<void(Built&, Rng&)> build;
};

std::vector<OpCase> op_cases() {
  std::vector<OpCase> cases;
  auto add = [&](std::string name, Op op, std::function<void(Built&, Rng&)> f) {
    cases.push_back({std::move(name), op, std::move(f)});
  };
  add("linear", Op::Linear, [](Built& s, Rng& r) {
    auto y = s.g.linear(s.leaf("x", random_array({3, 6}, r)), s.leaf("w", random_array({4, 3}, r)),
                        s.leaf("b", random_array({4}, r)));
    s.finish(y, {4, 6}, r);
  });
  add("conv", Op::Conv, [](Built& s, Rng& r) {
    auto y = s.g.conv(s.leaf("x", random_array({4, 7}, r)), s.leaf("w", random_array({5, 4, 3}, r)),
                      s.leaf("b", random_array({5}, r)));
    s.finish(y, {5, 7}, r);
  });
  add("conv.stride2", Op::Conv, [](Built& s, Rng& r) {
    auto y = s.g.conv(s.leaf("x", random_array({4, 7}, r)), s.leaf("w", random_array({5, 4, 3}, r)),
                      s.leaf("b", random_array({5}, r)), 2);
    s.finish(y, {5, 4}, r);
  });
  add("conv.grouped", Op::Conv, [](Built& s, Rng& r) {
    auto y = s.g.conv(s.leaf("x", random_array({4, 7}, r)), s.leaf("w", random_array({6, 2, 3}, r)),
                      s.leaf("b", random_array({6}, r)), 1, 2);
    s.finish(y, {6, 7}, r);
  });
  add("conv.depthwise", Op::Conv, [](Built& s, Rng& r) {
    auto y = s.g.conv(s.leaf("x", random_array({4, 7}, r)), s.leaf("w", random_array({4, 1, 3}, r)),
                      s.leaf("b", random_array({4}, r)), 1, diff::kDepthwise);
    s.finish(y, {4, 7}, r);
  });
  add("conv_transpose.even", Op::ConvTranspose, [](Built& s, Rng& r) {
    auto y = s.g.conv_transpose(s.leaf("x", random_array({4, 5}, r)), s.leaf("w", random_array({3, 4, 3}, r)),
                                s.leaf("b", random_array({3}, r)), 10);
    s.finish(y, {3, 10}, r);
  });
  add("conv_transpose.odd", Op::ConvTranspose, [](Built& s, Rng& r) {
    auto y = s.g.conv_transpose(s.leaf("x", random_array({4, 5}, r)), s.leaf("w", random_array({4, 1, 3}, r)),
                                s.leaf("b", random_array({4}, r)), 9, diff::kDepthwise);
    s.finish(y, {4, 9}, r);
  });
  add("max_pool", Op::MaxPool, [](Built& s, Rng& r) {
    s.finish(s.g.max_pool(s.leaf("x", random_array({3, 7}, r))), {3, 4}, r);
  });
  add("relu", Op::Relu, [](Built& s, Rng& r) { s.finish(s.g.relu(s.leaf("x", random_array({3, 6}, r))), {3, 6}, r); });
  add("sigmoid", Op::Sigmoid,
      [](Built& s, Rng& r) { s.finish(s.g.sigmoid(s.leaf("x", random_array({3, 6}, r, -3, 3))), {3, 6}, r); });
  add("sqrt", Op::Sqrt,
      [](Built& s, Rng& r) { s.finish(s.g.sqrt(s.leaf("x", random_array({3, 6}, r, 0.3, 2.0))), {3, 6}, r); });
  add("global_avg_pool", Op::GlobalAvgPool,
      [](Built& s, Rng& r) { s.finish(s.g.global_avg_pool(s.leaf("x", random_array({3, 6}, r))), {3, 1}, r); });
  add("layer_norm", Op::LayerNorm, [](Built& s, Rng& r) {
    auto y = s.g.layer_norm(s.leaf("x", random_array({4, 6}, r)), s.leaf("scale", random_array({4}, r)),
                            s.leaf("shift", random_array({4}, r)));
    s.finish(y, {4, 6}, r);
  });
  add("group_norm", Op::GroupNorm, [](Built& s, Rng& r) {
    auto y = s.g.group_norm(s.leaf("x", random_array({4, 6}, r)), s.leaf("scale", random_array({4}, r)),
                            s.leaf("shift", random_array({4}, r)), 2);
    s.finish(y, {4, 6}, r);
  });
  add("add", Op::Add, [](Built& s, Rng& r) {
    s.finish(s.g.add(s.leaf("a", random_array({3, 6}, r)), s.leaf("b", random_array({3, 6}, r))), {3, 6}, r);
  });
  add("mul", Op::Mul, [](Built& s, Rng& r) {
    s.finish(s.g.mul(s.leaf("a", random_array({3, 6}, r)), s.leaf("b", random_array({3, 6}, r))), {3, 6}, r);
  });
  add("mul_channel", Op::MulChannel, [](Built& s, Rng& r) {
    s.finish(s.g.mul_channel(s.leaf("x", random_array({3, 6}, r)), s.leaf("w", random_array({3, 1}, r))), {3, 6}, r);
  });
  add("scale", Op::Scale,
      [](Built& s, Rng& r) { s.finish(s.g.scale(s.leaf("x", random_array({3, 6}, r)), 0.37), {3, 6}, r); });
  add("softmax.axis0", Op::Softmax,
      [](Built& s, Rng& r) { s.finish(s.g.softmax(s.leaf("x", random_array({4, 6}, r, -2, 2)), 0), {4, 6}, r); });
  add("softmax.axis1", Op::Softmax,
      [](Built& s, Rng& r) { s.finish(s.g.softmax(s.leaf("x", random_array({4, 6}, r, -2, 2)), 1), {4, 6}, r); });
  add("dft.radix2", Op::Dft, [](Built& s, Rng& r) { s.finish(s.g.dft(s.leaf("x", random_array({2, 8}, r))), {4, 8}, r); });
  add("dft.direct", Op::Dft, [](Built& s, Rng& r) { s.finish(s.g.dft(s.leaf("x", random_array({2, 7}, r))), {4, 7}, r); });
  add("idft_real.radix2", Op::IdftReal,
      [](Built& s, Rng& r) { s.finish(s.g.idft_real(s.leaf("x", random_array({4, 8}, r))), {2, 8}, r); });
  add("idft_real.direct", Op::IdftReal,
      [](Built& s, Rng& r) { s.finish(s.g.idft_real(s.leaf("x", random_array({4, 7}, r))), {2, 7}, r); });
  add("complex_mul", Op::ComplexMul, [](Built& s, Rng& r) {
    s.finish(s.g.complex_mul(s.leaf("a", random_array({4, 7}, r)), s.leaf("b", random_array({4, 7}, r))), {4, 7}, r);
  });
  for (int dir : {1, -1}) {
    add(dir > 0 ? "shift_stack.forward" : "shift_stack.backward", Op::ShiftStack, [dir](Built& s, Rng& r) {
      const std::size_t T = 9, bins = 3;
      auto y = s.g.shift_stack(s.leaf("x", random_array({1, T}, r)), bins, dir);
      // Masked entries hold a large constant; weight them out of the sum.
      s.finish(y, {bins + 1, T}, r, [&](std::size_t b, std::size_t t) {
        const long src = static_cast<long>(t) + dir * static_cast<long>(b);
        return src >= 0 && src < static_cast<long>(T);
      });
    });
  }
  add("slice_channels", Op::SliceChannels,
      [](Built& s, Rng& r) { s.finish(s.g.slice_channels(s.leaf("x", random_array({5, 6}, r)), 1, 4), {3, 6}, r); });
  add("concat_channels", Op::ConcatChannels, [](Built& s, Rng& r) {
    s.finish(s.g.concat_channels(s.leaf("a", random_array({2, 6}, r)), s.leaf("b", random_array({3, 6}, r))), {5, 6}, r);
  });
  add("sum", Op::Sum, [](Built& s, Rng& r) { s.finish(s.g.sum(s.leaf("x", random_array({3, 6}, r))), {1}, r); });
  return cases;
}

void apply_fault(Graph& g, const GradientOptions& opt) {
  if (opt.fault) g.set_backward_scale(opt.fault->first, opt.fault->second);
}

// max() that keeps NaN, so a NaN error can never pass.
double worse(double current, double err) { return (std::isnan(err) || err > current) ? err : current; }

CheckResult finish_result(std::string name, double tol, double err, std::size_t samples) {
  // NaN errors fail.
  return {std::move(name), err, tol, samples, err < tol};
}

// Tiny model used by the composed checks.
ModelConfig tiny_model() {
  ModelConfig m;
  m.encoder.input_dim = 4;
  m.encoder.channels = 8;
  m.encoder.levels = 3;
  m.encoder.group_count = 2;
  m.encoder.ffn_expansion = 2;
  m.decoder.num_classes = 2;
  m.decoder.bins = 4;
  return m;
}

// Initial parameters plus noise, so zero-initialized heads are exercised.
diff::ParamSet noisy_params(const ModelConfig& cfg, Rng& rng) {
  diff::ParamSet params = init_model_params(cfg, rng());
  std::normal_distribution<double> n(0.0, 0.05);
  for (auto& [path, value] : params) {
    for (double& v : value.values()) v += n(rng);
  }
  return params;
}

std::vector<std::string> pick_leaves(const diff::ParamSet& params, std::size_t count, Rng& rng) {
  std::vector<std::string> paths = params.paths();
  std::vector<std::string> out;
  for (std::size_t i = 0; i < count && !paths.empty(); ++i) {
    const std::size_t k = rng() % paths.size();
    out.push_back(paths[k]);
    paths.erase(paths.begin() + static_cast<std::ptrdiff_t>(k));
  }
  return out;
}

CheckResult encoder_check(const GradientOptions& opt, Rng& rng) {
  ModelConfig cfg = tiny_model();
  double worst = 0.0;
  std::size_t samples = 0;
  for (std::size_t p = 0; p < opt.points; ++p) {
    const diff::ParamSet params = noisy_params(cfg, rng);
    Graph g;
    apply_fault(g, opt);
    NodeId x = g.input("input.x");
    auto pyr = encoder::build_pyramid(g, encoder::project(g, x), 16, cfg.encoder);
    NodeId total = 0;
    for (std::size_t l = 0; l < pyr.levels.size(); ++l) {
      NodeId term = g.sum(g.mul(pyr.levels[l], g.constant(random_array({cfg.encoder.channels, pyr.lengths[l]}, rng))));
      total = l == 0 ? term : g.add(total, term);
    }
    Bindings b;
    b.attach(params).bind("input.x", random_array({cfg.encoder.input_dim, 16}, rng));
    g.forward(b);
    std::vector<std::string> leaves = pick_leaves(params.subset("enc."), 3, rng);
    leaves.push_back(pick_leaves(params.subset("proj."), 1, rng).front());
    leaves.push_back("input.x");
    for (const auto& leaf : leaves) {
      worst = worse(worst, diff::fd_check(g, b, total, leaf));
      ++samples;
    }
  }
  return finish_result("composed.encoder", kOpTolerance, worst, samples);
}

CheckResult decoder_check(const GradientOptions& opt, Rng& rng) {
  ModelConfig cfg = tiny_model();
  const std::vector<std::size_t> lengths = {16, 8, 4};
  double worst = 0.0;
  std::size_t samples = 0;
  for (std::size_t p = 0; p < opt.points; ++p) {
    const diff::ParamSet params = noisy_params(cfg, rng);
    Graph g;
    apply_fault(g, opt);
    encoder::PyramidNodes pyr;
    Bindings b;
    b.attach(params);
    for (std::size_t l = 0; l < lengths.size(); ++l) {
      const std::string name = "input.level" + std::to_string(l + 1);
      pyr.levels.push_back(g.input(name));
      pyr.lengths.push_back(lengths[l]);
      pyr.strides.push_back(std::size_t{1} << l);
      b.bind(name, random_array({cfg.encoder.channels, lengths[l]}, rng));
    }
    const auto levels = decoder::decode_pyramid(g, pyr, cfg.decoder);
    NodeId total = 0;
    bool first = true;
    for (const auto& lv : levels) {
      for (NodeId y : {lv.cls_refined, lv.start_refined, lv.end_refined, lv.cls_coarse}) {
        const std::size_t rows = (y == lv.cls_refined || y == lv.cls_coarse) ? cfg.decoder.num_classes : 1;
        NodeId term = g.sum(g.mul(y, g.constant(random_array({rows, lv.length}, rng))));
        total = first ? term : g.add(total, term);
        first = false;
      }
    }
    g.forward(b);
    std::vector<std::string> leaves = pick_leaves(params.subset("head."), 4, rng);
    leaves.push_back("input.level" + std::to_string(1 + rng() % lengths.size()));
    for (const auto& leaf : leaves) {
      worst = worse(worst, diff::fd_check(g, b, total, leaf));
      ++samples;
    }
  }
  return finish_result("composed.decoder", kOpTolerance, worst, samples);
}

// Full training loss on a tiny instance (T = 32, one action): directional
// derivatives along random directions plus single coordinates, with the
// assignment and the quality targets held fixed.
CheckResult loss_check(const GradientOptions& opt, Rng& rng) {
  ModelConfig cfg = tiny_model();
  const std::size_t T = 32;
  constexpr double kStep = 1e-6;
  double worst = 0.0;
  std::size_t samples = 0;
  for (std::size_t p = 0; p < opt.points; ++p) {
    diff::ParamSet params = noisy_params(cfg, rng);
    const Array features = random_array({cfg.encoder.input_dim, T}, rng);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double start = 2.0 + 12.0 * u(rng);
    const std::vector<ActionInstance> gt = {{start, start + 4.0 + 12.0 * u(rng), 1 + static_cast<int>(rng() % 2)}};

    ModelGraph model = build_model_graph(cfg, T);
    apply_fault(model.graph, opt);
    const auto assign = train::assign_targets(gt, model.pyramid.lengths, model.pyramid.strides);

    auto evaluate = [&](const diff::ParamSet& ps) {
      Bindings b;
      b.attach(ps).bind(kFeaturesInput, features);
      model.graph.forward(b);
      return read_outputs(model);
    };
    const auto base = evaluate(params);
    const auto quality = train::prediction_quality(base, assign);
    train::OutputGradients og;
    train::total_loss(base, assign, quality, {}, &og);
    std::vector<std::pair<NodeId, Array>> seeds;
    for (std::size_t l = 0; l < model.levels.size(); ++l) {
      seeds.emplace_back(model.levels[l].cls_refined, og.cls[l]);
      seeds.emplace_back(model.levels[l].start_refined, og.start[l]);
      seeds.emplace_back(model.levels[l].end_refined, og.end[l]);
    }
    model.graph.backward(seeds);
    const auto grads = model.graph.input_gradients();
    auto loss_at = [&](const diff::ParamSet& ps) { return train::total_loss(evaluate(ps), assign, quality).total; };

    // Random directions over every parameter.
    std::normal_distribution<double> n(0.0, 1.0);
    for (int d = 0; d < 3; ++d) {
      diff::ParamSet plus = params, minus = params;
      double analytic = 0.0, norm = 0.0;
      std::map<std::string, Array> dir;
      for (const auto& [path, value] : params) {
        Array v(value.shape());
        for (double& x : v.values()) {
          x = n(rng);
          norm += x * x;
        }
        dir.emplace(path, std::move(v));
      }
      norm = std::sqrt(norm);
      for (const auto& [path, value] : params) {
        auto v = dir.at(path).values();
        auto pp = plus.get(path).values();
        auto pm = minus.get(path).values();
        const auto it = grads.find(path);
        for (std::size_t i = 0; i < v.size(); ++i) {
          v[i] /= norm;
          pp[i] += kStep * v[i];
          pm[i] -= kStep * v[i];
          if (it != grads.end()) analytic += it->second[i] * v[i];
        }
      }
      const double numeric = (loss_at(plus) - loss_at(minus)) / (2.0 * kStep);
      worst = worse(worst, diff::relative_error(analytic, numeric));
      ++samples;
    }
    // Single coordinates.
    const auto paths = params.paths();
    for (int k = 0; k < 5; ++k) {
      const std::string& path = paths[rng() % paths.size()];
      const std::size_t i = rng() % params.get(path).size();
      diff::ParamSet plus = params, minus = params;
      plus.get(path).values()[i] += kStep;
      minus.get(path).values()[i] -= kStep;
      const auto it = grads.find(path);
      const double analytic = it == grads.end() ? 0.0 : it->second[i];
      const double numeric = (loss_at(plus) - loss_at(minus)) / (2.0 * kStep);
      worst = worse(worst, diff::relative_error(analytic, numeric));
      ++samples;
    }
  }
  return finish_result("composed.loss", kLossTolerance, worst, samples);
}

}  // namespace

Report gradient_suite(const GradientOptions& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  Report report;
  Rng rng(opt.seed);
  for (const auto& c : op_cases()) {
    double worst = 0.0;
    std::size_t samples = 0;
    for (std::size_t p = 0; p < opt.points; ++p) {
      Built s;
      c.build(s, rng);
      apply_fault(s.g, opt);
      s.g.forward(s.b);
      for (const auto& leaf : s.leaves) {
        worst = worse(worst, diff::fd_check(s.g, s.b, s.out, leaf));
        ++samples;
      }
    }
    report.results.push_back(finish_result("op." + c.name, kOpTolerance, worst, samples));
  }
  if (opt.include_composed) {
    report.results.push_back(encoder_check(opt, rng));
    report.results.push_back(decoder_check(opt, rng));
    report.results.push_back(loss_check(opt, rng));
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace tal::checks
