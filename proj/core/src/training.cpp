#include "mepl/training.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mepl/io.hpp"

namespace mepl {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr double kBlank = std::numeric_limits<double>::quiet_NaN();

std::string fmt(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

/// Lifts a pool's eval restriction when the run ends, however it ends.
struct Restriction {
  const TeacherPool& pool;
  Restriction(const TeacherPool& p, std::vector<std::string> allowed) : pool(p) { pool.restrict_eval(std::move(allowed)); }
  ~Restriction() { pool.lift_restriction(); }
};

}  // namespace

void validate(const TrainConfig& c) {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(std::string("train config: ") + what);
  };
  need(c.pretrain_lr > 0 && c.main_lr > 0, "learning rates must be positive");
  need(c.lr_decay > 0 && c.lr_decay <= 1, "lr_decay must be in (0, 1]");
  need(c.decay_every_epochs >= 1, "decay_every_epochs must be >= 1");
  need(c.reload_interval >= 1, "reload_interval must be >= 1");
  need(c.batch_size >= 1, "batch_size must be >= 1");
  need(c.max_steps >= 0 && c.pretrain_max_steps >= 0, "step limits must be non-negative");
  need(c.eval_interval >= 1 && c.pretrain_eval_interval >= 1, "evaluation intervals must be >= 1");
  need(c.patience >= 1, "patience must be >= 1");
  need(c.val_tuples >= 1, "val_tuples must be >= 1");
  need(c.pretrain_tuples >= 1, "pretrain_tuples must be >= 1");
  need(c.plateau_window >= 1 && c.plateau_tol >= 0, "plateau settings out of range");
  need(c.max_nan_restarts >= 0, "max_nan_restarts must be non-negative");
  validate(c.loss);
}

double lr_at_epoch(const TrainConfig& c, int epoch) {
  return c.main_lr * std::pow(c.lr_decay, static_cast<double>(epoch / c.decay_every_epochs));
}

std::string MetricsLog::to_csv() const {
  std::string out;
  for (std::size_t i = 0; i < columns.size(); ++i) out += (i ? "," : "") + columns[i];
  out += '\n';
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out += ',';
      if (!std::isnan(row[i])) out += fmt(row[i]);
    }
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------- run state

void save_run_state(const fs::path& path, const RunState& s) {
  json j;
  j["kind"] = "run_state";
  j["stage"] = s.stage;
  j["step"] = s.step;
  j["ids"] = s.ids;
  j["best_val"] = s.best_val;
  j["evals_since_improvement"] = s.evals_since_improvement;
  j["lr_scale"] = s.lr_scale;
  j["nan_restarts"] = s.nan_restarts;
  j["adam"] = {{"beta1", s.adam.beta1},
               {"beta2", s.adam.beta2},
               {"eps", s.adam.eps},
               {"weight_decay", s.adam.weight_decay},
               {"step_count", s.adam.step_count}};
  j["rng"] = s.rng;
  j["order"] = s.order;
  j["pos"] = s.pos;
  j["history"] = s.history;
  j["columns"] = s.log.columns;
  json rows = json::array();
  for (const auto& r : s.log.rows) {
    json row = json::array();
    for (double v : r) row.push_back(std::isnan(v) ? json(nullptr) : json(v));
    rows.push_back(std::move(row));
  }
  j["rows"] = std::move(rows);
  j["stop_reason"] = s.stop_reason;

  TensorContainer c;
  c.meta = j.dump();
  auto put = [&](const char* prefix, const ParamStore& ps) {
    for (const auto& [name, t] : ps.tensors) c.tensors[std::string(prefix) + name] = t;
  };
  put("p/", s.params);
  put("b/", s.best_params);
  put("m/", s.adam.m);
  put("v/", s.adam.v);
  save_container(path, c);
}

RunState load_run_state(const fs::path& path) {
  TensorContainer c = load_container(path);
  RunState s;
  try {
    const json j = json::parse(c.meta);
    if (j.value("kind", "") != "run_state") throw ConfigError(path.string() + " is not a run state");
    s.stage = j.at("stage").get<std::string>();
    s.step = j.at("step").get<long>();
    s.ids = j.at("ids").get<std::vector<std::string>>();
    s.best_val = j.at("best_val").get<double>();
    s.evals_since_improvement = j.at("evals_since_improvement").get<int>();
    s.lr_scale = j.at("lr_scale").get<double>();
    s.nan_restarts = j.at("nan_restarts").get<int>();
    const json& a = j.at("adam");
    s.adam.beta1 = a.at("beta1").get<double>();
    s.adam.beta2 = a.at("beta2").get<double>();
    s.adam.eps = a.at("eps").get<double>();
    s.adam.weight_decay = a.at("weight_decay").get<double>();
    s.adam.step_count = a.at("step_count").get<long>();
    s.rng = j.at("rng").get<std::map<std::string, std::string>>();
    s.order = j.at("order").get<std::vector<int>>();
    s.pos = j.at("pos").get<long>();
    s.history = j.at("history").get<std::vector<double>>();
    s.log.columns = j.at("columns").get<std::vector<std::string>>();
    for (const auto& row : j.at("rows")) {
      std::vector<double> r;
      for (const auto& v : row) r.push_back(v.is_null() ? kBlank : v.get<double>());
      s.log.rows.push_back(std::move(r));
    }
    s.stop_reason = j.at("stop_reason").get<std::string>();
  } catch (const json::exception& e) {
    throw ConfigError("malformed run state " + path.string() + ": " + e.what());
  }
  for (auto& [name, t] : c.tensors) {
    const std::string prefix = name.substr(0, 2), rest = name.substr(2);
    if (prefix == "p/") s.params.tensors.emplace(rest, std::move(t));
    else if (prefix == "b/") s.best_params.tensors.emplace(rest, std::move(t));
    else if (prefix == "m/") s.adam.m.tensors.emplace(rest, std::move(t));
    else if (prefix == "v/") s.adam.v.tensors.emplace(rest, std::move(t));
    else throw ConfigError("unexpected entry '" + name + "' in run state " + path.string());
  }
  return s;
}

// ---------------------------------------------------------------- KD targets

NormStats pool_norm_stats(const TeacherPool& pool) {
  const auto ids = pool.ids(Split::train);
  if (ids.empty()) throw ConfigError("pool " + pool.dir().string() + " has an empty train split");
  return fit_norm_stats(pool.load(ids));
}

KdCache::KdCache(fs::path dir, FitConfig kd, std::uint64_t seed) : kd_(kd), seed_(seed) {
  std::ostringstream id;
  id << kd.lr << '|' << kd.epochs << '|' << kd.batch_size << '|' << kd.weight_decay << '|' << kd.augment << '|'
     << kd.kd_temperature << '|' << static_cast<int>(kd.kl_direction) << '|' << seed;
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(fnv1a(id.str())));
  dir_ = std::move(dir) / hex;
}

std::string KdCache::key(std::vector<std::string> ids) {
  std::sort(ids.begin(), ids.end());
  std::string k;
  for (const auto& id : ids) k += (k.empty() ? "" : "-") + id;
  return k;
}

WeightSet KdCache::get(const TeacherPool& pool, const Dataset& ds, std::vector<std::string> ids) {
  if (ids.empty()) throw ConfigError("KD target needs at least one teacher");
  std::sort(ids.begin(), ids.end());
  const std::string k = key(ids);
  const fs::path file = dir_ / (k + ".mtc");
  if (fs::exists(file)) {
    WeightSet ws = load_weights(file);
    if (!(*ws.arch == *pool.arch())) throw StructuralError("cached KD student " + file.string() + " has another architecture");
    ws.arch = pool.arch();
    return ws;
  }
  const auto teachers = pool.load(ids);
  WeightSet ws = train_kd_student(teachers, ds, kd_, pool.manifest(ids.front()).init_seed, stream_seed(seed_, "kd/" + k));
  save_weights(file, ws);
  ++trained_;
  return ws;
}

// ---------------------------------------------------------------- loops

namespace {

void write_outputs(const WeightFormer& gen, const RunState& s, const RunOptions& opt, const std::string& log_name) {
  if (opt.out_dir.empty()) return;
  fs::create_directories(opt.out_dir);
  WeightFormer g = gen;
  g.params() = s.params;
  g.save(opt.out_dir / "last.gen", opt.provenance_json);
  g.params() = s.best_params;
  g.save(opt.out_dir / "best.gen", opt.provenance_json);
  write_text_atomic(opt.out_dir / log_name, s.log.to_csv());
  save_run_state(opt.out_dir / "run_state.mtc", s);
}

RunResult finish(WeightFormer& gen, RunState& s, const RunOptions& opt, const std::string& log_name) {
  write_outputs(gen, s, opt, log_name);
  RunResult r;
  r.best_val = s.best_val;
  r.steps = s.step;
  r.stop_reason = s.stop_reason.empty() ? "halted" : s.stop_reason;
  gen.params() = s.stop_reason.empty() ? s.params : s.best_params;
  r.state = std::move(s);
  return r;
}

[[noreturn]] void abort_numeric(const RunState& s, double lr, const std::string& detail) {
  throw NumericError(s.stage + ": non-finite values at step " + std::to_string(s.step) + " (lr " + fmt(lr) + ", " + detail +
                     ") after " + std::to_string(s.nan_restarts) + " restarts");
}

/// Shared by train and finetune_unseen. `pinned` empty means resampling from
/// the train split.
RunResult main_loop(WeightFormer& gen, const TeacherPool& pool, const Dataset& ds, const TrainConfig& cfg,
                    const RunOptions& opt, const std::string& stage, const std::vector<std::string>& pinned) {
  validate(cfg);
  const int n = gen.config().n_teachers;
  if (static_cast<int>(ds.train.size()) < cfg.batch_size) throw ConfigError("batch_size exceeds the training split");
  const std::string pre = stage + "/";
  TeacherCache cache(pool);

  std::vector<std::vector<WeightSet>> val_sets;
  if (pinned.empty()) {
    Rng vr(cfg.seed, pre + "val-tuples");
    for (int i = 0; i < cfg.val_tuples; ++i) val_sets.push_back(cache.get(sample_teacher_ids(pool, n, Split::train, vr)));
  } else {
    val_sets.push_back(cache.get(pinned));
  }

  RunState s;
  if (opt.resume) {
    s = *opt.resume;
    if (s.stage != stage) throw ConfigError("cannot resume a " + s.stage + " state as " + stage);
    if (!s.stop_reason.empty()) throw ConfigError("run state already finished (" + s.stop_reason + ")");
    gen.params() = s.params;
  } else {
    s.stage = stage;
    s.params = gen.params();
    s.best_params = gen.params();
    s.ids = pinned;
    s.order = ds.train;
    s.pos = static_cast<long>(s.order.size());
    s.log.columns = {"step", "epoch", "lr", "ce", "consist", "total", "val_acc", "val_acc_current"};
    for (const char* name : {"sampler", "batches", "cutoff-A", "cutoff-B"}) s.rng[name] = Rng(cfg.seed, pre + name).state();
  }
  Rng sampler, batches, cut_a, cut_b;
  auto load_rngs = [&] {
    sampler.set_state(s.rng.at("sampler"));
    batches.set_state(s.rng.at("batches"));
    cut_a.set_state(s.rng.at("cutoff-A"));
    cut_b.set_state(s.rng.at("cutoff-B"));
  };
  auto sync = [&] {
    s.params = gen.params();
    s.rng["sampler"] = sampler.state();
    s.rng["batches"] = batches.state();
    s.rng["cutoff-A"] = cut_a.state();
    s.rng["cutoff-B"] = cut_b.state();
  };
  load_rngs();

  const long steps_per_epoch = (static_cast<long>(ds.train.size()) + cfg.batch_size - 1) / cfg.batch_size;
  const std::string log_name = stage + "_log.csv";
  RunState snapshot = s;
  long skip_eval_at = -1;
  PreparedTeachers prep;
  std::vector<std::string> prep_ids;

  while (true) {
    if (s.step == opt.halt_at_step) break;
    const int epoch = static_cast<int>(s.step / steps_per_epoch);
    if ((s.step % cfg.eval_interval == 0 || s.step >= cfg.max_steps) && s.step != skip_eval_at) {
      double v = 0;
      for (const auto& t : val_sets) v += accuracy(generate_student(gen, t), ds, ds.val);
      v /= static_cast<double>(val_sets.size());
      double current = kBlank;
      if (!pinned.empty()) current = v;
      else if (!s.ids.empty()) current = accuracy(generate_student(gen, cache.get(s.ids)), ds, ds.val);
      s.log.rows.push_back({double(s.step), double(epoch), kBlank, kBlank, kBlank, kBlank, v, current});
      if (v > s.best_val) {
        s.best_val = v;
        s.best_params = gen.params();
        s.evals_since_improvement = 0;
      } else {
        ++s.evals_since_improvement;
      }
      if (s.evals_since_improvement >= cfg.patience) s.stop_reason = "patience";
      else if (s.step >= cfg.max_steps) s.stop_reason = "max_steps";
      sync();
      snapshot = s;
      if (!opt.out_dir.empty()) write_outputs(gen, s, opt, log_name);
      if (!s.stop_reason.empty()) break;
    }
    skip_eval_at = -1;

    if (pinned.empty() && s.step % cfg.reload_interval == 0) s.ids = sample_teacher_ids(pool, n, Split::train, sampler);
    if (prep_ids != s.ids) {
      prep = prepare_teachers(gen, cache.get(s.ids));
      prep_ids = s.ids;
    }
    if (s.pos + cfg.batch_size > static_cast<long>(s.order.size())) {
      batches.shuffle(s.order.begin(), s.order.end());
      s.pos = 0;
    }
    const Batch batch = make_batch(ds, std::span<const int>(s.order).subspan(s.pos, cfg.batch_size));
    s.pos += cfg.batch_size;

    const double lr = lr_at_epoch(cfg, epoch) * s.lr_scale;
    ad::Graph<float> g;
    auto p = bind_params<float>(g, gen.params(), true);
    auto terms = combined_loss(g, gen, p, prep, batch, cfg.loss, cut_a, cut_b, Mode::train);
    const double ce = g.value(terms.ce)[0], consist = g.value(terms.consist)[0], total = g.value(terms.total)[0];
    bool finite = std::isfinite(total);
    if (finite) {
      g.backward(terms.total);
      const ParamStore grads = collect_grads(g, p);
      finite = grads.all_finite();
      if (finite) {
        s.adam.step(gen.params(), grads, lr);
        finite = gen.params().all_finite();
      }
    }
    if (!finite) {
      if (s.nan_restarts >= cfg.max_nan_restarts) abort_numeric(s, lr, "ce " + fmt(ce) + ", consist " + fmt(consist));
      const double scale = s.lr_scale * 0.5;
      const int restarts = s.nan_restarts + 1;
      s = snapshot;
      s.lr_scale = scale;
      s.nan_restarts = restarts;
      gen.params() = s.params;
      load_rngs();
      prep_ids.clear();
      skip_eval_at = s.step;
      continue;
    }
    s.log.rows.push_back({double(s.step), double(epoch), lr, ce, consist, total, kBlank, kBlank});
    ++s.step;
  }
  sync();
  return finish(gen, s, opt, log_name);
}

}  // namespace

RunResult train(WeightFormer& gen, const TeacherPool& pool, const Dataset& ds, const TrainConfig& cfg, const RunOptions& opt) {
  Restriction r(pool, {});
  return main_loop(gen, pool, ds, cfg, opt, "train", {});
}

RunResult finetune_unseen(WeightFormer& gen, const TeacherPool& pool, const std::vector<std::string>& unseen,
                          const Dataset& ds, const TrainConfig& cfg, const RunOptions& opt) {
  if (static_cast<int>(unseen.size()) != gen.config().n_teachers)
    throw ConfigError("finetune needs exactly " + std::to_string(gen.config().n_teachers) + " unseen teachers");
  for (const auto& id : unseen)
    if (pool.manifest(id).split != Split::eval)
      throw ConfigError("finetune teacher " + id + " is not from the eval split");
  Restriction r(pool, unseen);
  return main_loop(gen, pool, ds, cfg, opt, "finetune", unseen);
}

RunResult pretrain(WeightFormer& gen, const TeacherPool& pool, const Dataset& ds, KdCache& kd, const TrainConfig& cfg,
                   const RunOptions& opt) {
  validate(cfg);
  Restriction restriction(pool, {});
  const int n = gen.config().n_teachers;
  TeacherCache cache(pool);

  Rng tr(cfg.seed, "pretrain/tuples");
  std::vector<std::vector<std::string>> tuples;
  std::vector<std::vector<WeightSet>> teachers;
  std::vector<PreparedTeachers> preps;
  std::vector<WeightSet> targets;
  for (int i = 0; i < cfg.pretrain_tuples; ++i) {
    tuples.push_back(sample_teacher_ids(pool, n, Split::train, tr));
    teachers.push_back(cache.get(tuples.back()));
    preps.push_back(prepare_teachers(gen, teachers.back()));
    targets.push_back(kd.get(pool, ds, tuples.back()));
  }

  RunState s;
  if (opt.resume) {
    s = *opt.resume;
    if (s.stage != "pretrain") throw ConfigError("cannot resume a " + s.stage + " state as pretrain");
    if (!s.stop_reason.empty()) throw ConfigError("run state already finished (" + s.stop_reason + ")");
    gen.params() = s.params;
  } else {
    s.stage = "pretrain";
    s.params = gen.params();
    s.best_params = gen.params();
    s.log.columns = {"step", "lr", "l2", "eval_l2"};
    for (const char* name : {"sampler", "cutoff-A"}) s.rng[name] = Rng(cfg.seed, std::string("pretrain/") + name).state();
  }
  Rng sampler, cut_a;
  auto load_rngs = [&] {
    sampler.set_state(s.rng.at("sampler"));
    cut_a.set_state(s.rng.at("cutoff-A"));
  };
  auto sync = [&] {
    s.params = gen.params();
    s.rng["sampler"] = sampler.state();
    s.rng["cutoff-A"] = cut_a.state();
  };
  load_rngs();

  auto current = [&]() -> int {
    for (std::size_t i = 0; i < tuples.size(); ++i)
      if (tuples[i] == s.ids) return static_cast<int>(i);
    return -1;
  };
  RunState snapshot = s;
  long skip_eval_at = -1;
  while (true) {
    if (s.step == opt.halt_at_step) break;
    if ((s.step % cfg.pretrain_eval_interval == 0 || s.step >= cfg.pretrain_max_steps) && s.step != skip_eval_at) {
      double l = 0;
      for (std::size_t i = 0; i < tuples.size(); ++i) l += l2_match_loss(generate_student(gen, teachers[i]), targets[i]);
      l /= static_cast<double>(tuples.size());
      s.history.push_back(l);
      s.log.rows.push_back({double(s.step), kBlank, kBlank, l});
      if (-l > s.best_val || s.history.size() == 1) {
        s.best_val = -l;
        s.best_params = gen.params();
      }
      const std::size_t k = s.history.size() - 1, w = static_cast<std::size_t>(cfg.plateau_window);
      if (k >= w && s.history[k - w] > 0 && (s.history[k - w] - s.history[k]) / s.history[k - w] < cfg.plateau_tol)
        s.stop_reason = "plateau";
      else if (s.step >= cfg.pretrain_max_steps)
        s.stop_reason = "max_steps";
      sync();
      snapshot = s;
      if (!opt.out_dir.empty()) write_outputs(gen, s, opt, "pretrain_log.csv");
      if (!s.stop_reason.empty()) break;
    }
    skip_eval_at = -1;
    if (s.step % cfg.reload_interval == 0) s.ids = tuples[sampler.below(tuples.size())];
    const int t = current();
    if (t < 0) throw ConfigError("run state tuple is not among the pretraining tuples");

    const double lr = cfg.pretrain_lr * s.lr_scale;
    ad::Graph<float> g;
    auto p = bind_params<float>(g, gen.params(), true);
    GenOptions go{Mode::train, &cut_a, nullptr};
    auto loss = l2_match_loss(g, generate_student(g, gen, p, preps[t], go), targets[t]);
    const double lv = g.value(loss)[0];
    bool finite = std::isfinite(lv);
    if (finite) {
      g.backward(loss);
      const ParamStore grads = collect_grads(g, p);
      finite = grads.all_finite();
      if (finite) {
        SgdOptimizer{lr}.step(gen.params(), grads);
        finite = gen.params().all_finite();
      }
    }
    if (!finite) {
      if (s.nan_restarts >= cfg.max_nan_restarts) abort_numeric(s, lr, "l2 " + fmt(lv));
      const double scale = s.lr_scale * 0.5;
      const int restarts = s.nan_restarts + 1;
      s = snapshot;
      s.lr_scale = scale;
      s.nan_restarts = restarts;
      gen.params() = s.params;
      load_rngs();
      skip_eval_at = s.step;
      continue;
    }
    s.log.rows.push_back({double(s.step), lr, lv, kBlank});
    ++s.step;
  }
  sync();
  return finish(gen, s, opt, "pretrain_log.csv");
}

}  // namespace mepl
