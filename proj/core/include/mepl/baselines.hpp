#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mepl/fit.hpp"
#include "mepl/generator.hpp"
#include "mepl/zoo.hpp"

namespace mepl {

/// Mean of the teachers' logits.
Tensor ensemble_predict(const std::vector<WeightSet>& teachers, const Batch& batch);
Tensor ensemble_logits(const std::vector<WeightSet>& teachers, const Dataset& ds, std::span<const int> indices);

/// Distills the teachers into a freshly initialized student of the same
/// architecture; returns the best validation epoch. A non-finite run is
/// retried once at a tenth of the learning rate.
WeightSet train_kd_student(const std::vector<WeightSet>& teachers, const Dataset& ds, const FitConfig& cfg,
                           std::uint64_t init_seed, std::uint64_t train_seed, double* val_acc = nullptr);

// ---- per-layer MLP weight predictor ----

struct MLPPredictorConfig {
  int n_teachers = 3;
  int hidden_cap = 1024;  // hidden width is min(4 * d_layer, hidden_cap)
  std::uint64_t seed = 0;

  bool operator==(const MLPPredictorConfig&) const = default;
};

/// One independent two-layer MLP per student layer, mapping the concatenated
/// standardized teacher tokens of that layer to the student's tokens.
class MlpPredictor {
 public:
  MlpPredictor(MLPPredictorConfig cfg, std::shared_ptr<const ArchSpec> arch, NormStats stats);

  const MLPPredictorConfig& config() const { return cfg_; }
  const ArchSpec& arch() const { return *arch_; }
  std::shared_ptr<const ArchSpec> arch_ptr() const { return arch_; }
  const NormStats& norm_stats() const { return stats_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  std::size_t parameter_count() const { return params_.scalar_count(); }
  int hidden_width(const LayerSpec& l) const;

  template <typename T>
  WeightVars<T> generate(ad::Graph<T>& g, const BoundParams<T>& p, const PreparedTeachers& teachers) const;
  WeightSet generate(const std::vector<WeightSet>& teachers) const;
  PreparedTeachers prepare(const std::vector<WeightSet>& teachers) const;

  void save(const std::filesystem::path& path) const;
  static MlpPredictor load(const std::filesystem::path& path);

 private:
  MLPPredictorConfig cfg_;
  std::shared_ptr<const ArchSpec> arch_;
  NormStats stats_;
  ParamStore params_;
};

struct MlpTrainConfig {
  double lr = 3e-5;  // Adam; higher rates collapse the wide per-layer MLPs
  int steps = 600;
  int batch_size = 32;
  int eval_interval = 100;
  int val_tuples = 2;
  std::uint64_t seed = 0;

  bool operator==(const MlpTrainConfig&) const = default;
};

/// Trains on the generated student's cross-entropy over train-split tuples;
/// keeps the parameters with the best validation accuracy.
void train_mlp_predictor(MlpPredictor& mlp, const TeacherPool& pool, const Dataset& ds, const MlpTrainConfig& cfg);

// ---- teacher-count scaling ----

enum class ScaleMode { heuristic, concatenate };
std::string to_string(ScaleMode m);
ScaleMode scale_mode_from_string(const std::string& s);

struct ScaleLog {
  int generator_calls = 0;
  std::vector<std::string> steps;  // one entry per reduction, in order
};

/// Heuristic: left fold over the given order with a two-teacher generator,
/// feeding each generated model back in. Concatenate: one pass over all m.
WeightSet scale_teachers(const std::vector<WeightSet>& teachers, ScaleMode mode, const WeightFormer& gen,
                         ScaleLog* log = nullptr);

}  // namespace mepl
