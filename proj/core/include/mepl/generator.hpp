#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "mepl/arch.hpp"
#include "mepl/codec.hpp"
#include "mepl/params.hpp"
#include "mepl/rng.hpp"

namespace mepl {

struct GeneratorConfig {
  int d_model = 128;
  int num_blocks = 4;
  int num_heads = 4;
  int ffn_dim = 256;
  int n_teachers = 3;
  /// Longest composed sequence ([cross] + teacher blocks). 0 = derive from the
  /// architecture as 1 + n_teachers * longest layer sequence.
  int max_seq_len = 0;
  /// Rows of the model-id table; bounds how many teachers one pass may take.
  int max_teachers = 8;
  double cutoff_rate = 0.1;
  std::uint64_t seed = 0;
  /// Carry the [cross] output into the next layer (false = zero carried state).
  bool cross_layer = true;
  /// Every teacher slot uses model-id row 0.
  bool tie_model_ids = false;

  bool operator==(const GeneratorConfig&) const = default;
};

enum class Mode { train, eval };

struct CrossState {
  enum class Origin { learned_init, carried };
  Tensor value;  // [d_model]
  Origin origin = Origin::learned_init;
};

struct LayerTrace {
  std::string layer;
  int input_seq_len = 0;
  Tensor cross_in;
  Tensor cross_out;
  double output_mean = 0.0;
  double output_std = 0.0;
};

struct GenerationTrace {
  std::vector<LayerTrace> layers;
};

/// The weight generator: shared encoder stack, weight embedding dictionary,
/// position/model-id embeddings and the learned [cross] initial value.
class WeightFormer {
 public:
  WeightFormer(GeneratorConfig config, std::shared_ptr<const ArchSpec> arch, NormStats stats);

  const GeneratorConfig& config() const { return config_; }
  GeneratorConfig& mutable_config() { return config_; }
  const ArchSpec& arch() const { return *arch_; }
  std::shared_ptr<const ArchSpec> arch_ptr() const { return arch_; }
  const Dictionary& dictionary() const { return dict_; }
  const NormStats& norm_stats() const { return stats_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  int max_seq_len() const { return config_.max_seq_len; }
  std::size_t parameter_count() const { return params_.scalar_count(); }

  /// Container holds every parameter plus "normstats.<key>" = [mean, std];
  /// the sidecar <path>.json carries config, architecture and provenance.
  void save(const std::filesystem::path& path, const std::string& provenance_json = "{}") const;
  static WeightFormer load(const std::filesystem::path& path);

 private:
  GeneratorConfig config_;
  std::shared_ptr<const ArchSpec> arch_;
  NormStats stats_;
  Dictionary dict_;
  ParamStore params_;
};

/// Standardized teacher tokens, [layer][teacher] -> [seq_len, d_layer].
struct PreparedTeachers {
  std::vector<std::vector<Tensor>> layers;
  int count() const { return layers.empty() ? 0 : static_cast<int>(layers.front().size()); }
  /// Teacher order [w_{s+1}, ..., w_N, w_1, ..., w_s].
  PreparedTeachers rotated(int shift = 1) const;
};

PreparedTeachers prepare_teachers(const WeightFormer& gen, const std::vector<WeightSet>& teachers);

struct GenOptions {
  Mode mode = Mode::eval;
  Rng* cutoff_rng = nullptr;
  GenerationTrace* trace = nullptr;
};

/// [1 + N*seq_len, d_model]: [cross] row, then per teacher block the embedded
/// tokens plus relative position rows 0..seq_len-1 plus that slot's model id.
template <typename T>
ad::Var<T> compose_input(const WeightFormer& gen, const BoundParams<T>& p, const std::vector<ad::Var<T>>& teacher_tokens,
                         ad::Var<T> cross, const LayerKey& key);

/// Zeroes floor(rate*d_model) randomly chosen feature columns at every position.
Tensor cutoff_mask(int rows, int d_model, double rate, Rng& rng);
template <typename T>
ad::Var<T> apply_cutoff(ad::Var<T> seq, double rate, Rng& rng);

/// Post-norm Transformer encoder stack.
template <typename T>
ad::Var<T> encode(const WeightFormer& gen, const BoundParams<T>& p, ad::Var<T> seq);

/// Returns (student tokens de-standardized [seq_len, d_layer], next [cross] [1, d_model]).
template <typename T>
std::pair<ad::Var<T>, ad::Var<T>> generate_layer(const WeightFormer& gen, const BoundParams<T>& p, const LayerSpec& spec,
                                                 const std::vector<ad::Var<T>>& teacher_tokens, ad::Var<T> cross,
                                                 const GenOptions& opts);

template <typename T>
WeightVars<T> generate_student(ad::Graph<T>& g, const WeightFormer& gen, const BoundParams<T>& p,
                               const PreparedTeachers& teachers, const GenOptions& opts);

/// Eval-mode generation to a concrete weight set.
WeightSet generate_student(const WeightFormer& gen, const std::vector<WeightSet>& teachers, bool double_precision = false,
                           GenerationTrace* trace = nullptr);

WeightSet to_weight_set(const ad::Graph<float>& g, const WeightVars<float>& vars, std::shared_ptr<const ArchSpec> arch);
WeightSet to_weight_set(const ad::Graph<double>& g, const WeightVars<double>& vars, std::shared_ptr<const ArchSpec> arch);

std::string generator_config_to_json(const GeneratorConfig& c);
GeneratorConfig generator_config_from_json(const std::string& text);

}  // namespace mepl
