#include "tal/model/model.hpp"

#include <random>
#include <stdexcept>

#include "tal/errors.hpp"

namespace tal {

ModelGraph build_model_graph(const ModelConfig& cfg, std::size_t T) {
  ModelGraph m;
  m.features = m.graph.input(kFeaturesInput);
  diff::NodeId p0 = encoder::project(m.graph, m.features);
  m.pyramid = encoder::build_pyramid(m.graph, p0, T, cfg.encoder);
  m.levels = decoder::decode_pyramid(m.graph, m.pyramid, cfg.decoder);
  return m;
}

diff::ParamSet init_model_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  diff::ParamSet params;
  encoder::init_params(params, cfg.encoder, rng);
  decoder::init_params(params, cfg.encoder, cfg.decoder, rng);
  return params;
}

void validate_params(const ModelConfig& cfg, const diff::ParamSet& params) {
  const diff::ParamSet expected = init_model_params(cfg, 0);
  std::string problems;
  std::size_t count = 0;
  auto note = [&](const std::string& msg) {
    if (count++ < 12) problems += "\n  " + msg;
  };
  for (const auto& [path, value] : expected) {
    const diff::Array* got = params.find(path);
    if (got == nullptr) {
      note("missing " + path);
    } else if (got->shape() != value.shape()) {
      note(path + ": shape " + diff::to_string(got->shape()) + ", expected " + diff::to_string(value.shape()));
    }
  }
  for (const auto& [path, value] : params) {
    if (!expected.contains(path)) note("unexpected " + path);
  }
  if (count > 0) {
    if (count > 12) problems += "\n  ... and " + std::to_string(count - 12) + " more";
    throw ConfigError("parameters do not match the model configuration:" + problems);
  }
}

std::vector<decoder::LevelOutputs> read_outputs(const ModelGraph& model) {
  std::vector<decoder::LevelOutputs> out;
  out.reserve(model.levels.size());
  for (std::size_t l = 0; l < model.levels.size(); ++l) {
    out.push_back(decoder::read_level(model.graph, model.levels[l], model.pyramid.strides[l]));
  }
  return out;
}

std::vector<decoder::LevelOutputs> run_model(const ModelConfig& cfg, const diff::ParamSet& params,
                                             const diff::Array& features) {
  if (features.rank() != 2 || features.rows() != cfg.encoder.input_dim) {
    throw std::invalid_argument("expected features with " + std::to_string(cfg.encoder.input_dim) +
                                " channels, got shape " + diff::to_string(features.shape()));
  }
  ModelGraph model = build_model_graph(cfg, features.cols());
  diff::Bindings bindings;
  bindings.attach(params).bind(kFeaturesInput, features);
  model.graph.forward(bindings);
  return read_outputs(model);
}

}  // namespace tal
