#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "tal/diff/array.hpp"
#include "tal/diff/graph.hpp"
#include "tal/diff/params.hpp"
#include "tal/model/config.hpp"

// Feature projection and the multi-granularity pyramid encoder.
//
// Parameter paths:
//   proj.conv{1,2}.{w,b}                       two kernel-3 convs, each + ReLU
//   enc.l<level>.b<block>.instant.{w,b}        pointwise FC branch
//   enc.l<level>.b<block>.local.{w,b}          depthwise conv branch
//   enc.l<level>.b<block>.filter.conv{1,2}.{w,b}
//                                              depthwise convs over the stacked
//                                              (real; imag) spectrum -> W_phi
//   enc.l<level>.b<block>.gn.{scale,shift}
//   enc.l<level>.b<block>.ffn.fc{1,2}.{w,b}
// Levels are numbered from 1. Blocks are not shared across levels.
namespace tal::encoder {

using diff::Array;
using diff::Graph;
using diff::NodeId;
using diff::ParamSet;

struct PyramidNodes {
  std::vector<NodeId> levels;
  std::vector<std::size_t> lengths;
  std::vector<std::size_t> strides;
};

struct FeaturePyramid {
  std::vector<Array> levels;
  std::vector<std::size_t> strides;
};

std::string block_prefix(std::size_t level, std::size_t block);

/// T^l = ceil(T / 2^(l-1)) for l = 1..levels. Throws ConfigError when
/// T < 2^(levels-1).
std::vector<std::size_t> level_lengths(std::size_t T, std::size_t levels);

void init_params(ParamSet& params, const EncoderConfig& cfg, std::mt19937_64& rng);

/// Sets every block to the identity-initialization: all branch weights zero,
/// norm scale 1 / shift 0, second FFN linear zero. Projection is untouched.
void make_identity_blocks(ParamSet& params, const EncoderConfig& cfg);

// Graph builders ------------------------------------------------------------

NodeId project(Graph& g, NodeId x);

/// idft(X_f * W_phi) with W_phi = Conv(ReLU(Conv(X_f))); `prefix` names the
/// filter parameters (e.g. "enc.l1.b0.filter").
NodeId global_filter(Graph& g, NodeId x, const std::string& prefix);

/// Real part of idft(dft(x) * filter) for an explicit stacked (2D, T) filter.
NodeId apply_spectral_filter(Graph& g, NodeId x, NodeId filter);

/// Gated mixing of the branches followed by x + FFN(GN(x)).
NodeId gmg_block(Graph& g, NodeId x, const std::string& prefix, const EncoderConfig& cfg);

PyramidNodes build_pyramid(Graph& g, NodeId p0, std::size_t T, const EncoderConfig& cfg,
                           std::size_t input_stride = 1);

// Eager wrappers --------------------------------------------------------------

Array project(const Array& x, const ParamSet& params, const EncoderConfig& cfg);
Array global_filter(const Array& x, const ParamSet& params, const std::string& prefix);
Array gmg_block(const Array& x, const ParamSet& params, const std::string& prefix, const EncoderConfig& cfg);
FeaturePyramid build_pyramid(const Array& p0, const ParamSet& params, const EncoderConfig& cfg,
                             std::size_t input_stride = 1);

}  // namespace tal::encoder
