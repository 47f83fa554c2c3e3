#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mepl/baselines.hpp"
#include "mepl/generator.hpp"
#include "mepl/losses.hpp"
#include "mepl/zoo.hpp"

namespace mepl {

struct TrainConfig {
  double pretrain_lr = 1e-3;  // SGD
  double main_lr = 3e-5;      // Adam
  double lr_decay = 0.9;
  int decay_every_epochs = 5;
  int reload_interval = 5000;
  int batch_size = 32;
  int max_steps = 20000;
  int eval_interval = 500;
  int patience = 10;  // evaluations without improvement
  int val_tuples = 2;

  int pretrain_max_steps = 2000;
  int pretrain_eval_interval = 100;
  int pretrain_tuples = 4;
  int plateau_window = 5;
  double plateau_tol = 1e-3;

  int max_nan_restarts = 3;
  LossConfig loss;
  FitConfig kd;  // KD targets for pretraining
  std::uint64_t seed = 0;

  bool operator==(const TrainConfig&) const = default;
};

/// Throws ConfigError on the first invalid field.
void validate(const TrainConfig& c);

/// main_lr * lr_decay^floor(epoch / decay_every_epochs).
double lr_at_epoch(const TrainConfig& c, int epoch);

/// Per-step metrics table; NaN cells are written empty.
struct MetricsLog {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  std::string to_csv() const;
};

/// Everything needed to continue a run bit-exactly.
struct RunState {
  std::string stage;  // "pretrain" | "train" | "finetune"
  long step = 0;
  std::vector<std::string> ids;  // current teacher tuple
  double best_val = -1.0;        // accuracy (train) or negated matching loss (pretrain)
  int evals_since_improvement = 0;
  double lr_scale = 1.0;
  int nan_restarts = 0;
  AdamOptimizer adam;
  ParamStore params;
  ParamStore best_params;
  std::map<std::string, std::string> rng;
  std::vector<int> order;
  long pos = 0;
  std::vector<double> history;  // pretrain evaluation losses
  MetricsLog log;
  std::string stop_reason;  // empty while running
};

void save_run_state(const std::filesystem::path& path, const RunState& s);
RunState load_run_state(const std::filesystem::path& path);

struct RunOptions {
  /// Receives best.gen, last.gen, the metrics log and run_state.mtc; empty = none.
  std::filesystem::path out_dir;
  /// Continue from this state instead of starting fresh.
  const RunState* resume = nullptr;
  /// Stop before this step and leave a resumable state (-1 = never).
  long halt_at_step = -1;
  /// Provenance stored in the generator sidecars.
  std::string provenance_json = "{}";
};

struct RunResult {
  RunState state;
  double best_val = 0.0;
  long steps = 0;
  std::string stop_reason;
};

/// Token statistics of the pool's train split (eval checkpoints are not read).
NormStats pool_norm_stats(const TeacherPool& pool);

/// KD students keyed by the sorted teacher-id tuple, stored below `dir`.
class KdCache {
 public:
  KdCache(std::filesystem::path dir, FitConfig kd, std::uint64_t seed);

  /// Loads the tuple's student, training and storing it first if absent.
  WeightSet get(const TeacherPool& pool, const Dataset& ds, std::vector<std::string> ids);
  static std::string key(std::vector<std::string> ids);
  const std::filesystem::path& dir() const { return dir_; }
  int trained() const { return trained_; }

 private:
  std::filesystem::path dir_;
  FitConfig kd_;
  std::uint64_t seed_;
  int trained_ = 0;
};

/// L2 matching of generated students against per-tuple KD students (SGD).
/// Stops at pretrain_max_steps or when the evaluation loss plateaus.
RunResult pretrain(WeightFormer& gen, const TeacherPool& pool, const Dataset& ds, KdCache& kd, const TrainConfig& cfg,
                   const RunOptions& opt = {});

/// Main stage: resample teachers from the train split every reload_interval
/// steps, minimize the combined loss through the generated student and stop on
/// patience over held-in validation accuracy. Leaves the best parameters in `gen`.
RunResult train(WeightFormer& gen, const TeacherPool& pool, const Dataset& ds, const TrainConfig& cfg,
                const RunOptions& opt = {});

/// Continues training with the teacher tuple pinned to `unseen` (eval split);
/// only those eval checkpoints may be read.
RunResult finetune_unseen(WeightFormer& gen, const TeacherPool& pool, const std::vector<std::string>& unseen,
                          const Dataset& ds, const TrainConfig& cfg, const RunOptions& opt = {});

}  // namespace mepl
