#include "mepl/config.hpp"

#include <cstdio>

#include <nlohmann/json.hpp>

namespace mepl {

NLOHMANN_JSON_SERIALIZE_ENUM(KlDirection, {{KlDirection::student_first, "student_first"},
                                           {KlDirection::teacher_first, "teacher_first"}})
NLOHMANN_JSON_SERIALIZE_ENUM(ConsistencyReduction, {{ConsistencyReduction::mean, "mean"}, {ConsistencyReduction::sum, "sum"}})

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(TeacherHparams, lr, epochs, weight_decay, augment, batch_size)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ZooConfig, dataset, arch, pool_size, n_train, grid, seed, jobs, shared_init,
                                   min_tuple, max_retries)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(GeneratorConfig, d_model, num_blocks, num_heads, ffn_dim, n_teachers,
                                   max_seq_len, max_teachers, cutoff_rate, seed, cross_layer, tie_model_ids)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(LossConfig, alpha, kd_temperature, kl_direction, consistency)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(FitConfig, lr, epochs, batch_size, weight_decay, augment, kd_temperature,
                                   kl_direction)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(TrainConfig, pretrain_lr, main_lr, lr_decay, decay_every_epochs,
                                   reload_interval, batch_size, max_steps, eval_interval, patience, val_tuples,
                                   pretrain_max_steps, pretrain_eval_interval, pretrain_tuples,
                                   plateau_window, plateau_tol, max_nan_restarts, loss, kd, seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(MLPPredictorConfig, n_teachers, hidden_cap, seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(MlpTrainConfig, lr, steps, batch_size, eval_interval, val_tuples, seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ExperimentEval, topn, bins, n_tuples, sweep_m, sweep_modes, sweep_tuples,
                                   ablation_variants)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ExperimentConfig, dataset, arch, zoo, generator, train, pretrain, mlp,
                                   mlp_train, eval, output_dir, seed, eval_seed)

using nlohmann::json;

namespace {

// Every key of `given` must exist in `known` (objects are compared recursively).
void check_keys(const json& given, const json& known, const std::string& where) {
  if (!given.is_object()) return;
  for (const auto& [k, v] : given.items()) {
    const std::string path = where.empty() ? k : where + "." + k;
    if (!known.contains(k)) throw ConfigError("unknown config key '" + path + "'");
    if (v.is_object()) check_keys(v, known.at(k), path);
  }
}

}  // namespace

ExperimentConfig default_config() {
  ExperimentConfig c;
  c.zoo.pool_size = 30;
  c.zoo.n_train = 25;
  c.generator.n_teachers = 3;
  c.mlp.n_teachers = 3;
  c.train.kd.epochs = 15;
  return c;
}

ExperimentConfig desk_config() {
  ExperimentConfig c = default_config();
  c.generator.d_model = 64;
  c.generator.num_blocks = 2;
  c.generator.num_heads = 4;
  c.generator.ffn_dim = 128;
  c.train.main_lr = 3e-4;
  c.train.reload_interval = 1;
  c.train.max_steps = 3000;
  c.train.eval_interval = 100;
  c.train.patience = 10;
  c.train.pretrain_max_steps = 200;
  c.train.pretrain_eval_interval = 50;
  c.mlp_train.steps = 600;
  return c;
}

ExperimentConfig preset_config(const std::string& name) {
  if (name == "default") return default_config();
  if (name == "desk") return desk_config();
  throw ConfigError("unknown preset '" + name + "' (expected default or desk)");
}

ExperimentConfig resolve(ExperimentConfig c) {
  c.zoo.dataset = c.dataset;
  c.zoo.arch = c.arch;
  c.zoo.seed = stream_seed(c.seed, "zoo");
  c.generator.seed = stream_seed(c.seed, "init");
  c.train.seed = stream_seed(c.seed, "train");
  c.mlp.seed = stream_seed(c.seed, "mlp/init");
  c.mlp.n_teachers = c.generator.n_teachers;
  c.mlp_train.seed = stream_seed(c.seed, "mlp/train");
  c.eval_seed = stream_seed(c.seed, "eval");
  return c;
}

void validate(const ExperimentConfig& c) {
  if (c.dataset.empty() || c.arch.empty()) throw ConfigError("dataset and arch must be set");
  preset_from_string(c.arch);
  if (c.zoo.pool_size < 2) throw ConfigError("zoo.pool_size must be >= 2");
  if (c.zoo.n_train < 1 || c.zoo.n_train >= c.zoo.pool_size) throw ConfigError("zoo.n_train must be in [1, pool_size)");
  if (c.zoo.grid.empty()) throw ConfigError("zoo.grid must not be empty");
  if (c.generator.n_teachers > c.zoo.n_train)
    throw ConfigError("generator.n_teachers (" + std::to_string(c.generator.n_teachers) + ") exceeds the train split (" +
                      std::to_string(c.zoo.n_train) + ")");
  validate(c.train);
  if (c.eval.topn < 1 || c.eval.bins < 1 || c.eval.n_tuples < 1 || c.eval.sweep_tuples < 1)
    throw ConfigError("eval settings must be positive");
  for (const auto& m : c.eval.sweep_modes) scale_mode_from_string(m);
  for (const auto& v : c.eval.ablation_variants) variant_from_string(v);
  if (c.output_dir.empty()) throw ConfigError("output_dir must be set");
}

std::string config_to_json(const ExperimentConfig& c) { return json(c).dump(2) + "\n"; }

ExperimentConfig config_from_json(const std::string& text, const ExperimentConfig& base) {
  try {
    const json given = json::parse(text);
    if (!given.is_object()) throw ConfigError("config must be a JSON object");
    json merged = json(base);
    check_keys(given, merged, "");
    merged.merge_patch(given);
    return merged.get<ExperimentConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
}

std::string config_hash(const ExperimentConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(json(c).dump())));
  return buf;
}

EvalSettings eval_settings(const ExperimentConfig& c) { return {c.eval.topn, c.eval.bins}; }

}  // namespace mepl
