#pragma once

#include <string>

#include "tal/evaluation/evaluation.hpp"
#include "tal/inference/inference.hpp"
#include "tal/model/config.hpp"
#include "tal/training/trainer.hpp"

namespace tal {

/// Everything a run needs. JSON sections: encoder, decoder, training,
/// inference, eval. Unknown keys are rejected.
struct RunConfig {
  ModelConfig model;
  train::TrainConfig training;
  infer::InferenceConfig inference;
  eval::EvalProtocol eval;

  void validate() const;

  /// Missing keys keep their defaults. Throws ConfigError.
  static RunConfig from_json_text(const std::string& text);
  static RunConfig load(const std::string& path);
  std::string to_json_text() const;
};

}  // namespace tal
