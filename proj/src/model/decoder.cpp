#include "tal/model/decoder.hpp"

#include <algorithm>
#include <numeric>

#include "init_util.hpp"

namespace tal::decoder {
namespace {

struct Layer {
  NodeId w;
  NodeId b;
};

Layer layer(Graph& g, const std::string& prefix) { return {g.input(prefix + ".w"), g.input(prefix + ".b")}; }

// [conv -> LN -> ReLU] x 2
NodeId tower(Graph& g, NodeId x, const std::string& prefix) {
  NodeId h = x;
  for (const char* k : {"1", "2"}) {
    const Layer conv = layer(g, prefix + ".conv" + k);
    h = g.conv(h, conv.w, conv.b);
    const std::string ln = prefix + ".ln" + k;
    h = g.relu(g.layer_norm(h, g.input(ln + ".scale"), g.input(ln + ".shift")));
  }
  return h;
}

void add_tower(ParamSet& params, const std::string& prefix, std::size_t D, detail::Rng& rng) {
  for (const char* k : {"1", "2"}) {
    detail::add_conv(params, prefix + ".conv" + k, D, D, rng);
    detail::add_norm(params, prefix + ".ln" + k, D);
  }
}

bool needs_local_branch(const DecoderConfig& cfg) { return cfg.fusion != Fusion::Add; }

NodeId fuse(Graph& g, NodeId level, NodeId local, NodeId cross, const std::string& prefix, const DecoderConfig& cfg) {
  switch (cfg.fusion) {
    case Fusion::Attention: {
      NodeId weight = channel_attention(g, cross, local, prefix + ".att");
      return g.add(level, g.mul_channel(cross, weight));
    }
    case Fusion::Add:
      return g.add(level, cross);
    case Fusion::Concat: {
      const Layer cat = layer(g, prefix + ".cat");
      return g.add(level, g.linear(g.concat_channels(local, cross), cat.w, cat.b));
    }
  }
  return level;
}

}  // namespace

void init_params(ParamSet& params, const EncoderConfig& enc, const DecoderConfig& dec, std::mt19937_64& rng) {
  const std::size_t D = enc.channels;
  const std::size_t C = dec.num_classes;
  const std::size_t B = dec.bins;
  const double prior_logit = -std::log((1.0 - 0.01) / 0.01);

  if (dec.decouple) {
    detail::add_conv(params, "head.dcm.up", D, 1, rng);
    detail::add_conv(params, "head.drm.down", D, 1, rng);
    if (needs_local_branch(dec)) {
      detail::add_conv(params, "head.dcm.refine", D, 1, rng);
      detail::add_conv(params, "head.drm.refine", D, 1, rng);
    }
    if (dec.fusion == Fusion::Attention) {
      detail::add_linear(params, "head.dcm.att", D, D, rng);
      detail::add_linear(params, "head.drm.att", D, D, rng);
    }
    if (dec.fusion == Fusion::Concat) {
      detail::add_linear(params, "head.dcm.cat", D, 2 * D, rng);
      detail::add_linear(params, "head.drm.cat", D, 2 * D, rng);
    }
  }

  add_tower(params, "head.cls", D, rng);
  detail::add_conv(params, "head.cls.out", C, D, rng);
  params.get("head.cls.out.b").fill(prior_logit);

  add_tower(params, "head.reg", D, rng);
  detail::add_conv(params, "head.reg.start", 1, D, rng);
  detail::add_conv(params, "head.reg.end", 1, D, rng);
  detail::add_conv(params, "head.reg.center", 2 * (B + 1), D, rng);

  if (dec.refine_cls || dec.refine_reg) {
    detail::add_conv(params, "head.clff.down", D, 1, rng);
    detail::add_conv(params, "head.clff.up", D, 1, rng);
  }
  // Final refine convs start at zero: offsets begin as the identity.
  if (dec.refine_cls) {
    add_tower(params, "head.adjust", D, rng);
    detail::add_conv(params, "head.adjust.out", C, D, rng);
    detail::zero(params, "head.adjust.out.w");
  }
  if (dec.refine_reg) {
    add_tower(params, "head.offset", D, rng);
    detail::add_conv(params, "head.offset.out", 2, D, rng);
    detail::zero(params, "head.offset.out.w");
  }
}

NodeId channel_attention(Graph& g, NodeId a, NodeId b, const std::string& fc_prefix) {
  const Layer fc = layer(g, fc_prefix);
  NodeId pooled = g.global_avg_pool(g.relu(g.add(a, b)));
  return g.sigmoid(g.linear(pooled, fc.w, fc.b));
}

NodeId dcm_fuse(Graph& g, NodeId level, NodeId higher, std::size_t length, const DecoderConfig& cfg) {
  const Layer up = layer(g, "head.dcm.up");
  NodeId f_hi = g.conv_transpose(higher, up.w, up.b, length, diff::kDepthwise);
  NodeId f_l = level;
  if (needs_local_branch(cfg)) {
    const Layer refine = layer(g, "head.dcm.refine");
    f_l = g.conv(level, refine.w, refine.b, 1, diff::kDepthwise);
  }
  return fuse(g, level, f_l, f_hi, "head.dcm", cfg);
}

NodeId drm_fuse(Graph& g, NodeId level, NodeId lower, const DecoderConfig& cfg) {
  const Layer down = layer(g, "head.drm.down");
  NodeId f_lo = g.conv(lower, down.w, down.b, 2, diff::kDepthwise);
  NodeId f_l = level;
  if (needs_local_branch(cfg)) {
    const Layer refine = layer(g, "head.drm.refine");
    f_l = g.conv(level, refine.w, refine.b, 1, diff::kDepthwise);
  }
  return fuse(g, level, f_l, f_lo, "head.drm", cfg);
}

NodeId classify(Graph& g, NodeId features) {
  const Layer out = layer(g, "head.cls.out");
  return g.sigmoid(g.conv(tower(g, features, "head.cls"), out.w, out.b));
}

NodeId boundary_from_logits(Graph& g, NodeId edge_logits, NodeId center_logits, std::size_t length,
                            std::size_t bins, int direction) {
  // Start boundaries look backwards (t - b), end boundaries forwards (t + b).
  NodeId logits = g.add(g.shift_stack(edge_logits, bins, direction), center_logits);
  NodeId probs = g.softmax(logits, 0);
  Array bin_index({1, bins + 1});
  std::iota(bin_index.values().begin(), bin_index.values().end(), 0.0);
  NodeId expected = g.linear(probs, g.constant(std::move(bin_index)), g.constant(Array({1})));
  Array grid({1, length});
  std::iota(grid.values().begin(), grid.values().end(), 0.0);
  return g.add(g.constant(std::move(grid)), direction > 0 ? expected : g.scale(expected, -1.0));
}

BoundaryNodes trident_regress(Graph& g, NodeId features, std::size_t length, std::size_t bins) {
  NodeId h = tower(g, features, "head.reg");
  const Layer s = layer(g, "head.reg.start");
  const Layer e = layer(g, "head.reg.end");
  const Layer c = layer(g, "head.reg.center");
  NodeId start_logits = g.conv(h, s.w, s.b);
  NodeId end_logits = g.conv(h, e.w, e.b);
  NodeId center = g.conv(h, c.w, c.b);
  NodeId center_start = g.slice_channels(center, 0, bins + 1);
  NodeId center_end = g.slice_channels(center, bins + 1, 2 * (bins + 1));
  return {boundary_from_logits(g, start_logits, center_start, length, bins, -1),
          boundary_from_logits(g, end_logits, center_end, length, bins, +1)};
}

NodeId clff(Graph& g, NodeId lower, NodeId level, NodeId higher, std::size_t length) {
  const Layer down = layer(g, "head.clff.down");
  const Layer up = layer(g, "head.clff.up");
  NodeId from_lower = g.conv(lower, down.w, down.b, 2, diff::kDepthwise);
  NodeId from_higher = g.conv_transpose(higher, up.w, up.b, length, diff::kDepthwise);
  return g.add(g.add(from_lower, level), from_higher);
}

RefinementNodes apply_refinement(Graph& g, const LevelNodes& coarse, NodeId adjust, NodeId offsets,
                                 const DecoderConfig& cfg) {
  RefinementNodes out{coarse.cls_coarse, coarse.start_coarse, coarse.end_coarse};
  if (cfg.refine_cls) out.cls = g.sqrt(g.mul(coarse.cls_coarse, adjust));
  if (cfg.refine_reg) {
    out.start = g.add(coarse.start_coarse, g.slice_channels(offsets, 0, 1));
    out.end = g.add(coarse.end_coarse, g.slice_channels(offsets, 1, 2));
  }
  return out;
}

RefinementNodes refine(Graph& g, const LevelNodes& coarse, NodeId fused, const DecoderConfig& cfg) {
  NodeId adjust = coarse.cls_coarse;
  NodeId offsets = 0;
  if (cfg.refine_cls) {
    const Layer out = layer(g, "head.adjust.out");
    adjust = g.sigmoid(g.conv(tower(g, fused, "head.adjust"), out.w, out.b));
  }
  if (cfg.refine_reg) {
    const Layer out = layer(g, "head.offset.out");
    offsets = g.conv(tower(g, fused, "head.offset"), out.w, out.b);
  }
  return apply_refinement(g, coarse, adjust, offsets, cfg);
}

std::vector<LevelNodes> decode_pyramid(Graph& g, const encoder::PyramidNodes& pyramid, const DecoderConfig& cfg) {
  const std::size_t L = pyramid.levels.size();
  std::vector<LevelNodes> out;
  out.reserve(L);
  for (std::size_t l = 0; l < L; ++l) {
    const NodeId level = pyramid.levels[l];
    const std::size_t length = pyramid.lengths[l];
    LevelNodes nodes;
    nodes.length = length;
    nodes.decoupled = l > 0 && l + 1 < L;

    NodeId f_cls = level;
    NodeId f_reg = level;
    if (nodes.decoupled && cfg.decouple) {
      f_cls = dcm_fuse(g, level, pyramid.levels[l + 1], length, cfg);
      f_reg = drm_fuse(g, level, pyramid.levels[l - 1], cfg);
    }
    nodes.cls_coarse = classify(g, f_cls);
    const BoundaryNodes bounds = trident_regress(g, f_reg, length, cfg.bins);
    nodes.start_coarse = bounds.start;
    nodes.end_coarse = bounds.end;
    nodes.cls_refined = nodes.cls_coarse;
    nodes.start_refined = nodes.start_coarse;
    nodes.end_refined = nodes.end_coarse;

    if (nodes.decoupled && (cfg.refine_cls || cfg.refine_reg)) {
      NodeId fused = clff(g, pyramid.levels[l - 1], level, pyramid.levels[l + 1], length);
      const RefinementNodes refined = refine(g, nodes, fused, cfg);
      nodes.cls_refined = refined.cls;
      nodes.start_refined = refined.start;
      nodes.end_refined = refined.end;
    }
    out.push_back(nodes);
  }
  return out;
}

Array channel_attention(const Array& a, const Array& b, const ParamSet& params, const std::string& fc_prefix) {
  Graph g;
  NodeId out = channel_attention(g, g.input("input.a"), g.input("input.b"), fc_prefix);
  diff::Bindings bindings;
  bindings.attach(params).bind("input.a", a).bind("input.b", b);
  g.forward(bindings);
  return g.value(out);
}

std::vector<LevelOutputs> decode_pyramid(const encoder::FeaturePyramid& pyramid, const ParamSet& params,
                                         const DecoderConfig& cfg) {
  Graph g;
  diff::Bindings bindings;
  bindings.attach(params);
  encoder::PyramidNodes nodes;
  for (std::size_t l = 0; l < pyramid.levels.size(); ++l) {
    const std::string name = "input.level" + std::to_string(l + 1);
    nodes.levels.push_back(g.input(name));
    nodes.lengths.push_back(pyramid.levels[l].cols());
    bindings.bind(name, pyramid.levels[l]);
  }
  nodes.strides = pyramid.strides;
  const auto levels = decode_pyramid(g, nodes, cfg);
  g.forward(bindings);
  std::vector<LevelOutputs> out;
  for (std::size_t l = 0; l < levels.size(); ++l) out.push_back(read_level(g, levels[l], pyramid.strides[l]));
  return out;
}

LevelOutputs read_level(const Graph& g, const LevelNodes& nodes, std::size_t stride) {
  LevelOutputs out;
  out.cls_coarse = g.value(nodes.cls_coarse);
  out.start_coarse = g.value(nodes.start_coarse);
  out.end_coarse = g.value(nodes.end_coarse);
  out.cls_refined = g.value(nodes.cls_refined);
  out.start_refined = g.value(nodes.start_refined);
  out.end_refined = g.value(nodes.end_refined);
  out.stride = stride;
  out.decoupled = nodes.decoupled;
  return out;
}

void clamp_boundaries(LevelOutputs& level) {
  constexpr double kMinWidth = 1e-3;
  const std::size_t T = level.length();
  const double hi = std::max(static_cast<double>(T) - 1.0, kMinWidth);
  for (std::size_t t = 0; t < T; ++t) {
    double s = std::clamp(level.start_refined[t], 0.0, hi);
    double e = std::clamp(level.end_refined[t], 0.0, hi);
    if (e < s + kMinWidth) {
      e = std::min(s + kMinWidth, hi);
      s = e - kMinWidth;
    }
    level.start_refined[t] = s;
    level.end_refined[t] = e;
  }
}

}  // namespace tal::decoder
