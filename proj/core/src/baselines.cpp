#include "mepl/baselines.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "mepl/io.hpp"
#include "mepl/metrics.hpp"

namespace mepl {

using nlohmann::json;

Tensor ensemble_predict(const std::vector<WeightSet>& teachers, const Batch& batch) {
  if (teachers.empty()) throw ConfigError("ensemble needs at least one teacher");
  Tensor sum;
  for (const auto& t : teachers) {
    if (!(*t.arch == *teachers.front().arch)) throw StructuralError("ensemble members differ in architecture");
    Tensor l = forward_logits(*t.arch, t, batch);
    if (sum.size() == 0) {
      sum = std::move(l);
    } else {
      for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += l[i];
    }
  }
  for (auto& v : sum.vec()) v /= static_cast<double>(teachers.size());
  return sum;
}

Tensor ensemble_logits(const std::vector<WeightSet>& teachers, const Dataset& ds, std::span<const int> indices) {
  if (teachers.empty()) throw ConfigError("ensemble needs at least one teacher");
  Tensor sum;
  for (const auto& t : teachers) {
    if (!(*t.arch == *teachers.front().arch)) throw StructuralError("ensemble members differ in architecture");
    Tensor l = predict_logits(t, ds, indices);
    if (sum.size() == 0) {
      sum = std::move(l);
    } else {
      for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += l[i];
    }
  }
  for (auto& v : sum.vec()) v /= static_cast<double>(teachers.size());
  return sum;
}

WeightSet train_kd_student(const std::vector<WeightSet>& teachers, const Dataset& ds, const FitConfig& cfg,
                           std::uint64_t init_seed, std::uint64_t train_seed, double* val_acc) {
  if (teachers.empty()) throw ConfigError("distillation needs at least one teacher");
  auto arch = teachers.front().arch;
  FitConfig c = cfg;
  for (int attempt = 0; attempt < 2; ++attempt) {
    Rng init_rng(init_seed);
    Rng rng(train_seed);
    FitResult r = fit_classifier(init_weights(arch, init_rng), ds, c, rng, teachers);
    if (r.finite) {
      if (val_acc) *val_acc = r.val_acc;
      return std::move(r.weights);
    }
    c.lr /= 10.0;
  }
  throw NumericError("KD student diverged twice (last lr " + std::to_string(c.lr) + ")");
}

// ---------------------------------------------------------------- MLP predictor

namespace {

std::string mlp_name(const LayerSpec& l, const char* part) { return "mlp." + l.name + "." + part; }

}  // namespace

MlpPredictor::MlpPredictor(MLPPredictorConfig cfg, std::shared_ptr<const ArchSpec> arch, NormStats stats)
    : cfg_(cfg), arch_(std::move(arch)), stats_(std::move(stats)) {
  if (cfg_.n_teachers < 1) throw ConfigError("MLP predictor needs at least one teacher");
  if (cfg_.hidden_cap < 1) throw ConfigError("MLP hidden cap must be positive");
  Rng rng(cfg_.seed, "mlp/init");
  for (const auto& l : arch_->layers) {
    stats_.at(layer_key(l));
    const auto [s, d] = token_shape(l);
    const int in = cfg_.n_teachers * s * d, h = hidden_width(l), out = s * d;
    Tensor w1({in, h}), w2({h, out});
    for (auto& v : w1.vec()) v = std::sqrt(2.0 / in) * rng.normal();
    for (auto& v : w2.vec()) v = 0.01 * rng.normal() / std::sqrt(static_cast<double>(h));
    params_.tensors[mlp_name(l, "w1")] = std::move(w1);
    params_.tensors[mlp_name(l, "b1")] = Tensor({h});
    params_.tensors[mlp_name(l, "w2")] = std::move(w2);
    params_.tensors[mlp_name(l, "b2")] = Tensor({out});
  }
}

int MlpPredictor::hidden_width(const LayerSpec& l) const { return std::min(4 * token_shape(l).second, cfg_.hidden_cap); }

PreparedTeachers MlpPredictor::prepare(const std::vector<WeightSet>& teachers) const {
  if (static_cast<int>(teachers.size()) != cfg_.n_teachers)
    throw ConfigError("MLP predictor expects " + std::to_string(cfg_.n_teachers) + " teachers, got " +
                      std::to_string(teachers.size()));
  PreparedTeachers out;
  out.layers.resize(arch_->layers.size());
  for (std::size_t i = 0; i < teachers.size(); ++i) {
    if (!teachers[i].arch || !(*teachers[i].arch == *arch_))
      throw StructuralError("teacher " + std::to_string(i) + " does not share the predictor's architecture");
    for (std::size_t li = 0; li < arch_->layers.size(); ++li)
      out.layers[li].push_back(apply_norm(tokenize_layer(teachers[i], arch_->layers[li]), stats_).tokens);
  }
  return out;
}

template <typename T>
WeightVars<T> MlpPredictor::generate(ad::Graph<T>& g, const BoundParams<T>& p, const PreparedTeachers& teachers) const {
  if (teachers.count() != cfg_.n_teachers) throw ConfigError("MLP predictor got the wrong number of teachers");
  WeightVars<T> out;
  for (std::size_t li = 0; li < arch_->layers.size(); ++li) {
    const LayerSpec& l = arch_->layers[li];
    const auto [s, d] = token_shape(l);
    std::vector<ad::Var<T>> parts;
    for (const auto& t : teachers.layers[li]) parts.push_back(ad::reshape(g.constant(t.template cast<T>()), {1, s * d}));
    ad::Var<T> x = ad::concat_cols(parts);
    auto h = ad::relu(ad::add_bias(ad::matmul(x, param_var(p, mlp_name(l, "w1"))), param_var(p, mlp_name(l, "b1"))));
    auto y = ad::reshape(ad::add_bias(ad::matmul(h, param_var(p, mlp_name(l, "w2"))), param_var(p, mlp_name(l, "b2"))), {s, d});
    const NormEntry& ns = stats_.at(layer_key(l));
    TensorT<T> scale({s, d}), shift({s, d});
    for (int r = 0; r < s; ++r)
      for (int c = 0; c < d; ++c) {
        scale.at(r, c) = static_cast<T>(ns.std[c]);
        shift.at(r, c) = static_cast<T>(ns.mean[c]);
      }
    auto tokens = ad::add_const(ad::mul_const(y, scale), shift);
    for (auto& [role, var] : detokenize_vars(tokens, l)) out.emplace(TensorKey{l.name, role}, var);
  }
  return out;
}

WeightSet MlpPredictor::generate(const std::vector<WeightSet>& teachers) const {
  ad::Graph<float> g;
  auto p = bind_params<float>(g, params_, false);
  return to_weight_set(g, generate(g, p, prepare(teachers)), arch_);
}

void MlpPredictor::save(const std::filesystem::path& path) const {
  TensorContainer c;
  json meta = {{"kind", "mlp_predictor"},
               {"n_teachers", cfg_.n_teachers},
               {"hidden_cap", cfg_.hidden_cap},
               {"seed", cfg_.seed},
               {"arch", json::parse(arch_to_text(*arch_))}};
  c.meta = meta.dump();
  c.tensors = params_.tensors;
  for (const auto& [key, e] : stats_.entries) {
    std::vector<double> v = e.mean;
    v.insert(v.end(), e.std.begin(), e.std.end());
    c.tensors["normstats." + key.str()] = Tensor({2, static_cast<int>(e.mean.size())}, std::move(v));
  }
  save_container(path, c);
}

MlpPredictor MlpPredictor::load(const std::filesystem::path& path) {
  TensorContainer c = load_container(path);
  json meta;
  try {
    meta = json::parse(c.meta);
  } catch (const json::exception& e) {
    throw ConfigError("bad MLP predictor meta in " + path.string());
  }
  if (meta.value("kind", "") != "mlp_predictor") throw ConfigError(path.string() + " is not an MLP predictor checkpoint");
  MLPPredictorConfig cfg;
  cfg.n_teachers = meta.at("n_teachers").get<int>();
  cfg.hidden_cap = meta.at("hidden_cap").get<int>();
  cfg.seed = meta.at("seed").get<std::uint64_t>();
  auto arch = std::make_shared<const ArchSpec>(arch_from_text(meta.at("arch").dump()));
  NormStats stats;
  ParamStore params;
  for (auto& [name, t] : c.tensors) {
    if (name.rfind("normstats.", 0) == 0) {
      const std::string key = name.substr(10);
      const auto us = key.rfind('_');
      const auto w = static_cast<std::ptrdiff_t>(t.dim(1));
      stats.entries[{layer_kind_from_string(key.substr(0, us)), std::stoi(key.substr(us + 1))}] = {
          {t.vec().begin(), t.vec().begin() + w}, {t.vec().begin() + w, t.vec().end()}};
    } else {
      params.tensors.emplace(name, std::move(t));
    }
  }
  MlpPredictor mlp(cfg, std::move(arch), std::move(stats));
  for (const auto& [name, t] : mlp.params_.tensors)
    if (!params.contains(name) || params.at(name).shape() != t.shape())
      throw StructuralError("MLP predictor checkpoint lacks or misshapes " + name);
  mlp.params_ = std::move(params);
  return mlp;
}

void train_mlp_predictor(MlpPredictor& mlp, const TeacherPool& pool, const Dataset& ds, const MlpTrainConfig& cfg) {
  if (cfg.steps < 0 || cfg.batch_size < 1 || cfg.eval_interval < 1 || !(cfg.lr > 0))
    throw ConfigError("invalid MLP training settings");
  const int n = mlp.config().n_teachers;
  pool.restrict_eval({});
  struct Lift {
    const TeacherPool& p;
    ~Lift() { p.lift_restriction(); }
  } lift{pool};
  TeacherCache cache(pool);
  Rng sampler(cfg.seed, "mlp/sampler"), batches(cfg.seed, "mlp/batches"), val_rng(cfg.seed, "mlp/val-tuples");
  std::vector<std::vector<WeightSet>> val_sets;
  for (int i = 0; i < cfg.val_tuples; ++i) val_sets.push_back(cache.get(sample_teacher_ids(pool, n, Split::train, val_rng)));
  auto validate = [&] {
    if (val_sets.empty()) return 0.0;
    double s = 0;
    for (const auto& t : val_sets) s += accuracy(mlp.generate(t), ds, ds.val);
    return s / static_cast<double>(val_sets.size());
  };
  double best = validate();
  ParamStore best_params = mlp.params();
  AdamOptimizer opt;
  std::vector<int> order = ds.train;
  std::size_t pos = order.size();
  for (int step = 1; step <= cfg.steps; ++step) {
    const auto ids = sample_teacher_ids(pool, n, Split::train, sampler);
    const PreparedTeachers prep = mlp.prepare(cache.get(ids));
    if (pos >= order.size()) {
      batches.shuffle(order.begin(), order.end());
      pos = 0;
    }
    const std::size_t b = std::min<std::size_t>(cfg.batch_size, order.size() - pos);
    const Batch batch = make_batch(ds, std::span<const int>(order).subspan(pos, b));
    pos += b;
    ad::Graph<float> g;
    auto p = bind_params<float>(g, mlp.params(), true);
    auto loss = ad::cross_entropy(functional_forward(g, mlp.arch(), mlp.generate(g, p, prep), batch), batch.labels);
    if (!std::isfinite(g.value(loss)[0])) throw NumericError("MLP predictor loss became non-finite at step " + std::to_string(step));
    g.backward(loss);
    opt.step(mlp.params(), collect_grads(g, p), cfg.lr);
    if (step % cfg.eval_interval == 0 || step == cfg.steps) {
      const double v = validate();
      if (v > best) {
        best = v;
        best_params = mlp.params();
      }
    }
  }
  mlp.params() = std::move(best_params);
}

// ---------------------------------------------------------------- scaling

std::string to_string(ScaleMode m) { return m == ScaleMode::heuristic ? "heuristic" : "concatenate"; }

ScaleMode scale_mode_from_string(const std::string& s) {
  if (s == "heuristic") return ScaleMode::heuristic;
  if (s == "concatenate") return ScaleMode::concatenate;
  throw ConfigError("unknown scaling mode '" + s + "' (expected heuristic or concatenate)");
}

WeightSet scale_teachers(const std::vector<WeightSet>& teachers, ScaleMode mode, const WeightFormer& gen, ScaleLog* log) {
  const int m = static_cast<int>(teachers.size());
  if (m < 2) throw ConfigError("teacher scaling needs m >= 2, got " + std::to_string(m));
  ScaleLog local;
  ScaleLog& lg = log ? *log : local;
  if (mode == ScaleMode::concatenate) {
    WeightSet out = generate_student(gen, teachers);
    lg.generator_calls += 1;
    lg.steps.push_back("concat(" + std::to_string(m) + ")");
    return out;
  }
  if (gen.config().n_teachers != 2)
    throw ConfigError("heuristic scaling needs a generator trained with two teachers, this one uses " +
                      std::to_string(gen.config().n_teachers));
  WeightSet acc = teachers.front();
  for (int i = 1; i < m; ++i) {
    acc = generate_student(gen, {acc, teachers[i]});
    lg.generator_calls += 1;
    lg.steps.push_back(std::string(i == 1 ? "t0" : "g" + std::to_string(i - 1)) + "+t" + std::to_string(i));
  }
  return acc;
}

template WeightVars<float> MlpPredictor::generate(ad::Graph<float>&, const BoundParams<float>&, const PreparedTeachers&) const;
template WeightVars<double> MlpPredictor::generate(ad::Graph<double>&, const BoundParams<double>&, const PreparedTeachers&) const;

}  // namespace mepl
