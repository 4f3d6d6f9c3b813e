#pragma once

#include <cstdint>
#include <vector>

#include "tal/diff/graph.hpp"
#include "tal/diff/params.hpp"
#include "tal/model/config.hpp"
#include "tal/model/decoder.hpp"
#include "tal/model/encoder.hpp"

namespace tal {

inline constexpr const char* kFeaturesInput = "input.features";

/// The full project -> pyramid -> decode graph for one sequence length.
struct ModelGraph {
  diff::Graph graph;
  diff::NodeId features = 0;
  encoder::PyramidNodes pyramid;
  std::vector<decoder::LevelNodes> levels;
};

ModelGraph build_model_graph(const ModelConfig& cfg, std::size_t T);

diff::ParamSet init_model_params(const ModelConfig& cfg, std::uint64_t seed);

/// Throws ConfigError listing missing, unexpected or mis-shaped parameters.
void validate_params(const ModelConfig& cfg, const diff::ParamSet& params);

/// Forward pass on a (input_dim, T) feature matrix; raw (unclamped) outputs.
std::vector<decoder::LevelOutputs> run_model(const ModelConfig& cfg, const diff::ParamSet& params,
                                             const diff::Array& features);

std::vector<decoder::LevelOutputs> read_outputs(const ModelGraph& model);

}  // namespace tal
