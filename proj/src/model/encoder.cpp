#include "tal/model/encoder.hpp"

#include <stdexcept>

#include "init_util.hpp"
#include "tal/errors.hpp"

namespace tal::encoder {
namespace {

struct Layer {
  NodeId w;
  NodeId b;
};

Layer layer(Graph& g, const std::string& prefix) { return {g.input(prefix + ".w"), g.input(prefix + ".b")}; }

Array run(Graph& g, NodeId out, const ParamSet& params, const Array& x) {
  diff::Bindings bindings;
  bindings.attach(params).bind("input.x", x);
  g.forward(bindings);
  return g.value(out);
}

}  // namespace

std::string block_prefix(std::size_t level, std::size_t block) {
  return "enc.l" + std::to_string(level) + ".b" + std::to_string(block);
}

std::vector<std::size_t> level_lengths(std::size_t T, std::size_t levels) {
  const std::size_t need = std::size_t{1} << (levels - 1);
  if (T < need) {
    throw ConfigError("sequence length " + std::to_string(T) + " is too short for " + std::to_string(levels) +
                      " pyramid levels; need at least " + std::to_string(need));
  }
  std::vector<std::size_t> out{T};
  for (std::size_t l = 1; l < levels; ++l) out.push_back((out.back() + 1) / 2);
  return out;
}

void init_params(ParamSet& params, const EncoderConfig& cfg, std::mt19937_64& rng) {
  const std::size_t D = cfg.channels;
  detail::add_conv(params, "proj.conv1", D, cfg.input_dim, rng);
  detail::add_conv(params, "proj.conv2", D, D, rng);
  for (std::size_t l = 1; l <= cfg.levels; ++l) {
    for (std::size_t k = 0; k < cfg.blocks_per_level; ++k) {
      const std::string p = block_prefix(l, k);
      detail::add_linear(params, p + ".instant", D, D, rng);
      detail::add_conv(params, p + ".local", D, 1, rng);
      detail::add_conv(params, p + ".filter.conv1", 2 * D, 1, rng);
      // Small second filter conv: the unnormalized spectrum grows with T, so a
      // near-zero W_phi keeps the global branch quiet at the start.
      detail::add_conv(params, p + ".filter.conv2", 2 * D, 1, rng, 0.01);
      detail::add_norm(params, p + ".gn", D);
      detail::add_linear(params, p + ".ffn.fc1", cfg.ffn_expansion * D, D, rng);
      detail::add_linear(params, p + ".ffn.fc2", D, cfg.ffn_expansion * D, rng);
    }
  }
}

void make_identity_blocks(ParamSet& params, const EncoderConfig& cfg) {
  for (std::size_t l = 1; l <= cfg.levels; ++l) {
    for (std::size_t k = 0; k < cfg.blocks_per_level; ++k) {
      const std::string p = block_prefix(l, k);
      for (const char* branch : {".instant", ".local", ".filter.conv1", ".filter.conv2", ".ffn.fc2"}) {
        detail::zero(params, p + branch + ".w");
        detail::zero(params, p + branch + ".b");
      }
      params.get(p + ".gn.scale").fill(1.0);
      params.get(p + ".gn.shift").fill(0.0);
    }
  }
}

NodeId project(Graph& g, NodeId x) {
  const Layer c1 = layer(g, "proj.conv1");
  const Layer c2 = layer(g, "proj.conv2");
  NodeId h = g.relu(g.conv(x, c1.w, c1.b));
  return g.relu(g.conv(h, c2.w, c2.b));
}

NodeId apply_spectral_filter(Graph& g, NodeId x, NodeId filter) {
  return g.idft_real(g.complex_mul(g.dft(x), filter));
}

NodeId global_filter(Graph& g, NodeId x, const std::string& prefix) {
  const Layer c1 = layer(g, prefix + ".conv1");
  const Layer c2 = layer(g, prefix + ".conv2");
  NodeId spectrum = g.dft(x);
  // Depthwise over the 2D stacked rows: real and imaginary parts of each
  // channel get their own kernel along the frequency axis.
  NodeId h = g.relu(g.conv(spectrum, c1.w, c1.b, 1, diff::kDepthwise));
  NodeId filter = g.conv(h, c2.w, c2.b, 1, diff::kDepthwise);
  return g.idft_real(g.complex_mul(spectrum, filter));
}

NodeId gmg_block(Graph& g, NodeId x, const std::string& prefix, const EncoderConfig& cfg) {
  const BranchMask& m = cfg.branches;
  NodeId mixed = x;
  NodeId f_instant = 0, f_local = 0, f_global = 0;
  if (m.instant) {
    const Layer fc = layer(g, prefix + ".instant");
    f_instant = g.linear(x, fc.w, fc.b);
  }
  if (m.local) {
    const Layer conv = layer(g, prefix + ".local");
    f_local = g.conv(x, conv.w, conv.b, 1, diff::kDepthwise);
  }
  if (m.global) f_global = global_filter(g, x, prefix + ".filter");

  if (cfg.gate_enabled) {
    // A gate exists only while the branch that produces it is active;
    // otherwise the gated term is kept ungated.
    if (m.instant) mixed = g.add(mixed, m.local ? g.mul(g.relu(f_local), f_instant) : f_instant);
    if (m.local) mixed = g.add(mixed, m.global ? g.mul(g.relu(f_global), f_local) : f_local);
    if (m.global) mixed = g.add(mixed, f_global);
  } else {
    if (m.instant) mixed = g.add(mixed, f_instant);
    if (m.local) mixed = g.add(mixed, f_local);
    if (m.global) mixed = g.add(mixed, f_global);
  }

  NodeId normed = g.group_norm(mixed, g.input(prefix + ".gn.scale"), g.input(prefix + ".gn.shift"), cfg.group_count);
  const Layer fc1 = layer(g, prefix + ".ffn.fc1");
  const Layer fc2 = layer(g, prefix + ".ffn.fc2");
  NodeId ffn = g.linear(g.relu(g.linear(normed, fc1.w, fc1.b)), fc2.w, fc2.b);
  return g.add(mixed, ffn);
}

PyramidNodes build_pyramid(Graph& g, NodeId p0, std::size_t T, const EncoderConfig& cfg, std::size_t input_stride) {
  PyramidNodes out;
  out.lengths = level_lengths(T, cfg.levels);
  NodeId current = p0;
  for (std::size_t l = 1; l <= cfg.levels; ++l) {
    if (l > 1) current = g.max_pool(current);
    for (std::size_t k = 0; k < cfg.blocks_per_level; ++k) current = gmg_block(g, current, block_prefix(l, k), cfg);
    out.levels.push_back(current);
    out.strides.push_back(input_stride << (l - 1));
  }
  return out;
}

Array project(const Array& x, const ParamSet& params, const EncoderConfig& cfg) {
  if (x.rank() != 2 || x.rows() != cfg.input_dim) {
    throw std::invalid_argument("project: expected " + std::to_string(cfg.input_dim) + " input channels, got " +
                                diff::to_string(x.shape()));
  }
  Graph g;
  NodeId out = project(g, g.input("input.x"));
  return run(g, out, params, x);
}

Array global_filter(const Array& x, const ParamSet& params, const std::string& prefix) {
  Graph g;
  NodeId out = global_filter(g, g.input("input.x"), prefix);
  return run(g, out, params, x);
}

Array gmg_block(const Array& x, const ParamSet& params, const std::string& prefix, const EncoderConfig& cfg) {
  Graph g;
  NodeId out = gmg_block(g, g.input("input.x"), prefix, cfg);
  return run(g, out, params, x);
}

FeaturePyramid build_pyramid(const Array& p0, const ParamSet& params, const EncoderConfig& cfg,
                             std::size_t input_stride) {
  Graph g;
  PyramidNodes nodes = build_pyramid(g, g.input("input.x"), p0.cols(), cfg, input_stride);
  diff::Bindings bindings;
  bindings.attach(params).bind("input.x", p0);
  g.forward(bindings);
  FeaturePyramid out;
  for (NodeId id : nodes.levels) out.levels.push_back(g.value(id));
  out.strides = nodes.strides;
  return out;
}

}  // namespace tal::encoder
