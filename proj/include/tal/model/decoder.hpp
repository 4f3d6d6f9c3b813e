#pragma once

#include <random>
#include <string>
#include <vector>

#include "tal/diff/array.hpp"
#include "tal/diff/graph.hpp"
#include "tal/diff/params.hpp"
#include "tal/model/config.hpp"
#include "tal/model/encoder.hpp"

// Cross-layer decoupled heads. One shared parameter set ("head.*") serves
// every pyramid level:
//   head.dcm.{up,refine,att[,cat]}   classification-side fusion with level l+1
//   head.drm.{down,refine,att[,cat]} regression-side fusion with level l-1
//   head.cls.*                       [conv-LN-ReLU]x2 -> conv(C), sigmoid
//   head.reg.*                       [conv-LN-ReLU]x2 -> start(1), end(1),
//                                    center(2(B+1)) boundary logits
//   head.clff.{down,up}              three-level feature fusion
//   head.adjust.*                    [conv-LN-ReLU]x2 -> conv(C), sigmoid
//   head.offset.*                    [conv-LN-ReLU]x2 -> conv(2)
namespace tal::decoder {

using diff::Array;
using diff::Graph;
using diff::NodeId;
using diff::ParamSet;

/// Node handles for one pyramid level. Class maps are (C, T), boundaries
/// (1, T) in grid units of that level. Plain levels alias refined to coarse.
struct LevelNodes {
  NodeId cls_coarse;
  NodeId start_coarse;
  NodeId end_coarse;
  NodeId cls_refined;
  NodeId start_refined;
  NodeId end_refined;
  std::size_t length = 0;
  bool decoupled = false;
};

struct LevelOutputs {
  Array cls_coarse;
  Array start_coarse;
  Array end_coarse;
  Array cls_refined;
  Array start_refined;
  Array end_refined;
  std::size_t stride = 1;
  bool decoupled = false;

  std::size_t length() const { return cls_refined.cols(); }
};

struct BoundaryNodes {
  NodeId start;
  NodeId end;
};

void init_params(ParamSet& params, const EncoderConfig& enc, const DecoderConfig& dec, std::mt19937_64& rng);

// Graph builders ------------------------------------------------------------

/// W = Sigmoid(FC(GAP(ReLU(a + b)))) as a (D, 1) column.
NodeId channel_attention(Graph& g, NodeId a, NodeId b, const std::string& fc_prefix);

/// P_l + f_{l+1} * W with f_{l+1} the upsampled higher level.
NodeId dcm_fuse(Graph& g, NodeId level, NodeId higher, std::size_t length, const DecoderConfig& cfg);

/// P_l + f_{l-1} * W with f_{l-1} the stride-2 conv of the lower level.
NodeId drm_fuse(Graph& g, NodeId level, NodeId lower, const DecoderConfig& cfg);

/// Sigmoid class scores (C, T).
NodeId classify(Graph& g, NodeId features);

/// Expected start/end boundaries from the three-branch boundary head.
BoundaryNodes trident_regress(Graph& g, NodeId features, std::size_t length, std::size_t bins);

/// Expectation over bins 0..B of softmax(shift(edge, dir) + center), returned
/// as t + dir * E[b] in grid units. Exposed for direct testing.
NodeId boundary_from_logits(Graph& g, NodeId edge_logits, NodeId center_logits, std::size_t length,
                            std::size_t bins, int direction);

/// Conv(P_{l-1}) + P_l + ConvTransposed(P_{l+1}).
NodeId clff(Graph& g, NodeId lower, NodeId level, NodeId higher, std::size_t length);

struct RefinementNodes {
  NodeId cls;
  NodeId start;
  NodeId end;
};

/// sqrt(cls * adjust), start + offset_start, end + offset_end.
RefinementNodes apply_refinement(Graph& g, const LevelNodes& coarse, NodeId adjust, NodeId offsets,
                                 const DecoderConfig& cfg);

/// Runs both refine heads on fused features f_c and applies them.
RefinementNodes refine(Graph& g, const LevelNodes& coarse, NodeId fused, const DecoderConfig& cfg);

/// Plain heads on the first and last level, decoupled heads with refinement
/// on every intermediate level.
std::vector<LevelNodes> decode_pyramid(Graph& g, const encoder::PyramidNodes& pyramid, const DecoderConfig& cfg);

// Eager wrappers --------------------------------------------------------------

Array channel_attention(const Array& a, const Array& b, const ParamSet& params, const std::string& fc_prefix);
std::vector<LevelOutputs> decode_pyramid(const encoder::FeaturePyramid& pyramid, const ParamSet& params,
                                         const DecoderConfig& cfg);

/// Copies evaluated node values out of a graph.
LevelOutputs read_level(const Graph& g, const LevelNodes& nodes, std::size_t stride);

/// Decode-time cleanup of refined boundaries: clamp into [0, T-1] and keep
/// start <= end - 1e-3.
void clamp_boundaries(LevelOutputs& level);

}  // namespace tal::decoder
