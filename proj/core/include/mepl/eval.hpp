#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mepl/baselines.hpp"
#include "mepl/metrics.hpp"
#include "mepl/training.hpp"

namespace mepl {

using TeacherTuple = std::vector<std::string>;

/// `count` distinct n-subsets of a split, each in sampled order. Throws
/// ConfigError when the split has fewer subsets than requested.
std::vector<TeacherTuple> sample_tuples(const TeacherPool& pool, int n, int count, std::uint64_t seed,
                                        Split split = Split::eval);
/// Order-sensitive hash of the tuple list (hex).
std::string tuple_hash(const std::vector<TeacherTuple>& tuples);

struct EvalSettings {
  int topn = 5;
  int bins = 15;

  bool operator==(const EvalSettings&) const = default;
};

struct MetricsReport {
  std::string method;
  std::string dataset;
  std::string arch;
  int topn = 5;
  double acc1 = 0.0;  // percentages, mean over tuples
  double accn = 0.0;
  double ece = 0.0;
  double acc1_2s = 0.0;  // two population standard deviations over tuples
  double accn_2s = 0.0;
  double ece_2s = 0.0;
  int n_tuples = 0;
  std::string tuple_hash;
  std::string config_hash;
  std::map<std::string, std::uint64_t> seeds;
  std::vector<Scores> per_tuple;
};

/// Throws StructuralError when a report breaks 0 <= acc1 <= accn <= 100 or has a negative spread.
void validate(const MetricsReport& r);
std::string report_to_json(const MetricsReport& r);
MetricsReport report_from_json(const std::string& text);
std::string reports_to_csv(const std::vector<MetricsReport>& reports);
/// Throws ProtocolError unless every report was computed on the same tuples.
void check_same_tuples(const std::vector<MetricsReport>& reports);

/// Test-split logits for one tuple. Several entries are scored separately and
/// averaged (the single-model baseline returns one per teacher).
using MethodFn = std::function<std::vector<Tensor>(const TeacherTuple& ids, const std::vector<WeightSet>& teachers)>;

MetricsReport evaluate_method(const std::string& method, const MethodFn& fn, const std::vector<TeacherTuple>& tuples,
                              const TeacherPool& pool, const Dataset& ds, const EvalSettings& settings = {});

MethodFn single_method(const Dataset& ds);
MethodFn ensemble_method(const Dataset& ds);
MethodFn kd_method(KdCache& cache, const TeacherPool& pool, const Dataset& ds);
MethodFn generator_method(const WeightFormer& gen, const Dataset& ds);
MethodFn mlp_method(const MlpPredictor& mlp, const Dataset& ds);
/// Fine-tunes a copy of `gen` on each tuple before generating (WF*).
MethodFn finetuned_method(const WeightFormer& gen, const TeacherPool& pool, const Dataset& ds, const TrainConfig& cfg);

// ---- component ablation ----

enum class Variant { full, no_cross_layer, no_shift_consistency, no_weight_cutoff };
std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);
void apply_variant(Variant v, GeneratorConfig& gen, TrainConfig& train);

struct AblationSetup {
  GeneratorConfig generator;
  TrainConfig train;
  bool pretrain = true;
  std::filesystem::path kd_dir;   // KD cache root (needed when pretraining)
  std::filesystem::path out_dir;  // per-variant run outputs; empty = none
};

struct AblationRow {
  Variant variant = Variant::full;
  MetricsReport report;
  long steps = 0;
  std::string stop_reason;
};

/// Trains one generator per variant (the full model is always included, first)
/// and evaluates all of them on the same tuples.
std::vector<AblationRow> run_ablation(std::vector<Variant> variants, const AblationSetup& setup, const TeacherPool& pool,
                                      const Dataset& ds, const std::vector<TeacherTuple>& tuples,
                                      const EvalSettings& settings = {});
std::string ablation_csv(const std::vector<AblationRow>& rows);

// ---- teacher-count sweep ----

struct SweepSettings {
  std::vector<int> m_values{1, 2, 3, 4, 5};
  std::vector<ScaleMode> modes{ScaleMode::heuristic, ScaleMode::concatenate};
  int tuples_per_m = 3;
  std::uint64_t seed = 0;
  Split split = Split::eval;
  EvalSettings eval;
};

struct SweepCell {
  int m = 0;
  ScaleMode mode = ScaleMode::heuristic;
  bool skipped = false;
  std::string reason;  // why a cell is missing
  double acc1 = 0.0;
  double acc1_2s = 0.0;
  double accn = 0.0;
  double ece = 0.0;
  int generator_calls = 0;  // per tuple
};

/// m = 1 cells are the single-model baseline. Each m uses up to tuples_per_m
/// distinct subsets (fewer when the split has fewer). Concatenation beyond the
/// generator's capacity leaves a skipped cell.
std::vector<SweepCell> teacher_count_sweep(const SweepSettings& s, const WeightFormer& gen, const TeacherPool& pool,
                                           const Dataset& ds);
/// Evaluated cells only.
std::string sweep_csv(const std::vector<SweepCell>& cells);
std::string sweep_skipped_csv(const std::vector<SweepCell>& cells);
std::string sweep_svg(const std::vector<SweepCell>& cells);

// ---- comparison grid ----

/// Markdown table, one row per report, after check_same_tuples.
std::string report_markdown(const std::vector<MetricsReport>& reports);

}  // namespace mepl
