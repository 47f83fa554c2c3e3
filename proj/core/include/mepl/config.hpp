#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mepl/baselines.hpp"
#include "mepl/eval.hpp"
#include "mepl/generator.hpp"
#include "mepl/training.hpp"
#include "mepl/zoo.hpp"

namespace mepl {

struct ExperimentEval {
  int topn = 5;
  int bins = 15;
  int n_tuples = 5;  // shared evaluation tuples drawn from the eval split
  std::vector<int> sweep_m{1, 2, 3, 4, 5};
  std::vector<std::string> sweep_modes{"heuristic", "concatenate"};
  int sweep_tuples = 3;
  std::vector<std::string> ablation_variants{"-cross_layer", "-shift_consistency", "-weight_cutoff"};

  bool operator==(const ExperimentEval&) const = default;
};

struct ExperimentConfig {
  std::string dataset = "digits";
  std::string arch = "cnn_tiny";
  ZooConfig zoo;
  GeneratorConfig generator;
  TrainConfig train;
  bool pretrain = true;
  MLPPredictorConfig mlp;
  MlpTrainConfig mlp_train;
  ExperimentEval eval;
  std::string output_dir = "runs";
  std::uint64_t seed = 0;
  /// Seed of the shared evaluation tuples; derived from `seed` on resolve.
  std::uint64_t eval_seed = 0;

  bool operator==(const ExperimentConfig&) const = default;
};

/// Full-length optimizer settings with the teacher pool and generator sized
/// for the bundled digits set.
ExperimentConfig default_config();
/// Settings that finish the whole pipeline in minutes on one CPU core.
ExperimentConfig desk_config();
ExperimentConfig preset_config(const std::string& name);

/// Fills dataset/arch into the zoo section and fans `seed` out to the named
/// streams (zoo, init, train, mlp, eval). Idempotent.
ExperimentConfig resolve(ExperimentConfig c);
/// Cross-field checks; throws ConfigError.
void validate(const ExperimentConfig& c);

std::string config_to_json(const ExperimentConfig& c);
/// Missing keys keep the values of `base`; unknown keys are a ConfigError.
ExperimentConfig config_from_json(const std::string& text, const ExperimentConfig& base = default_config());
std::string config_hash(const ExperimentConfig& c);

EvalSettings eval_settings(const ExperimentConfig& c);

}  // namespace mepl
