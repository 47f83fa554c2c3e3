// mepl: command-line driver for teacher pools, generator training, baselines
// and evaluation. Every run writes into <output_dir>/<run-id>/.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mepl/baselines.hpp"
#include "mepl/config.hpp"
#include "mepl/dataset.hpp"
#include "mepl/eval.hpp"
#include "mepl/io.hpp"
#include "mepl/plot.hpp"
#include "mepl/training.hpp"
#include "mepl/zoo.hpp"

#ifndef MEPL_GIT_REVISION
#define MEPL_GIT_REVISION "unknown"
#endif
#ifndef MEPL_VERSION
#define MEPL_VERSION "0.0.0"
#endif
#ifndef MEPL_BUILD_TYPE
#define MEPL_BUILD_TYPE "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mepl;

namespace {

struct Common {
  std::string config_path;
  std::string preset = "default";
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string output_dir;
  std::string run_id;
  int jobs = 0;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "JSON config; missing keys fall back to the preset")->check(CLI::ExistingFile);
  app->add_option("--preset", c.preset, "Base settings: default or desk")->check(CLI::IsMember({"default", "desk"}));
  app->add_option("--set", c.sets, "Override one key, e.g. --set train.max_steps=500 (repeatable)");
  app->add_option("--seed", c.seed, "Global seed");
  app->add_option("--output-dir", c.output_dir, "Root for pools, caches and run directories");
  app->add_option("--run-id", c.run_id, "Run directory name (default: <command>-<config hash>)");
  app->add_option("--jobs", c.jobs, "Worker threads for pool training")->check(CLI::PositiveNumber);
}

// "a.b.c=value" -> {"a":{"b":{"c":value}}}; the value is parsed as JSON when possible.
json set_patch(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  std::vector<std::string> parts;
  std::stringstream ss(key);
  for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
  json patch = value;
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
  return patch;
}

ExperimentConfig load_config(const Common& c) {
  ExperimentConfig cfg = preset_config(c.preset);
  if (!c.config_path.empty()) cfg = config_from_json(read_text(c.config_path), cfg);
  for (const auto& s : c.sets) cfg = config_from_json(set_patch(s).dump(), cfg);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.output_dir.empty()) cfg.output_dir = c.output_dir;
  if (c.jobs > 0) cfg.zoo.jobs = c.jobs;
  cfg = resolve(cfg);
  validate(cfg);
  return cfg;
}

std::string short_hash(const ExperimentConfig& cfg) { return config_hash(cfg).substr(0, 8); }

std::string build_json() {
  json j = {{"version", MEPL_VERSION}, {"git_revision", MEPL_GIT_REVISION}, {"build_type", MEPL_BUILD_TYPE},
#if defined(__clang__)
            {"compiler", std::string("clang ") + __clang_version__},
#elif defined(__GNUC__)
            {"compiler", std::string("gcc ") + __VERSION__},
#endif
            {"cxx_standard", static_cast<long>(__cplusplus)}};
  return j.dump(2) + "\n";
}

std::string seeds_json(const ExperimentConfig& c) {
  json j = {{"global", c.seed},       {"zoo", c.zoo.seed},           {"init", c.generator.seed},
            {"train", c.train.seed},  {"mlp/init", c.mlp.seed},      {"mlp/train", c.mlp_train.seed},
            {"eval", c.eval_seed}};
  return j.dump(2) + "\n";
}

/// Creates <output_dir>/<run-id>/ with the resolved config, seeds and build fingerprint.
fs::path open_run(const ExperimentConfig& cfg, const Common& c, const std::string& default_id) {
  const fs::path dir = fs::path(cfg.output_dir) / (c.run_id.empty() ? default_id : c.run_id);
  fs::create_directories(dir);
  write_text_atomic(dir / "config.json", config_to_json(cfg));
  write_text_atomic(dir / "seeds.json", seeds_json(cfg));
  write_text_atomic(dir / "build.json", build_json());
  return dir;
}

fs::path default_run(const ExperimentConfig& cfg, const std::string& stage) {
  return fs::path(cfg.output_dir) / (stage + "-" + short_hash(cfg));
}

TeacherPool open_pool(const ExperimentConfig& cfg) { return TeacherPool::open(pool_dir(cfg.output_dir, cfg.dataset, cfg.arch)); }

fs::path kd_root(const ExperimentConfig& cfg) {
  std::string d = cfg.dataset;
  std::replace(d.begin(), d.end(), ':', '_');
  return fs::path(cfg.output_dir) / "kd_cache" / d / cfg.arch;
}

std::vector<std::string> split_ids(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string p; std::getline(ss, p, ',');)
    if (!p.empty()) out.push_back(p);
  return out;
}

/// Generator from an explicit path, or the best checkpoint of the default run of `stage`.
WeightFormer load_generator(const ExperimentConfig& cfg, const std::string& path, const std::string& stage,
                            const std::string& flag = "--generator") {
  if (!path.empty()) return WeightFormer::load(path);
  const fs::path p = default_run(cfg, stage) / "best.gen";
  if (!fs::exists(p))
    throw ConfigError("no generator at " + p.string() + " (run `mepl " + stage + "` with this config first, or pass " + flag + ")");
  return WeightFormer::load(p);
}

std::vector<TeacherTuple> eval_tuples_for(const ExperimentConfig& cfg, const TeacherPool& pool, const std::string& file) {
  if (!file.empty()) {
    try {
      return json::parse(read_text(file)).get<std::vector<TeacherTuple>>();
    } catch (const json::exception& e) {
      throw ConfigError("malformed tuple file " + file + ": " + e.what());
    }
  }
  return sample_tuples(pool, cfg.generator.n_teachers, cfg.eval.n_tuples, cfg.eval_seed, Split::eval);
}

void write_report(const fs::path& dir, MetricsReport r, const ExperimentConfig& cfg, const std::vector<TeacherTuple>& tuples) {
  r.config_hash = config_hash(cfg);
  r.seeds = {{"global", cfg.seed}, {"init", cfg.generator.seed}, {"train", cfg.train.seed}, {"eval", cfg.eval_seed}};
  write_text_atomic(dir / "report.json", report_to_json(r));
  write_text_atomic(dir / "report.csv", reports_to_csv({r}));
  write_text_atomic(dir / "tuples.json", json(tuples).dump(2) + "\n");
  std::printf("%-12s ACC-1 %.2f ± %.2f  ACC-%d %.2f  ECE %.2f  (%d tuples, hash %s)\n", r.method.c_str(), r.acc1, r.acc1_2s,
              r.topn, r.accn, r.ece, r.n_tuples, r.tuple_hash.c_str());
}

void write_curve(const fs::path& dir, const MetricsLog& log, const std::string& name, const std::string& y_column,
                 const std::string& y_label) {
  const auto col = std::find(log.columns.begin(), log.columns.end(), y_column) - log.columns.begin();
  if (col >= static_cast<long>(log.columns.size())) return;
  Series s{y_column, {}};
  for (const auto& row : log.rows)
    if (!std::isnan(row[col])) s.points.emplace_back(row[0], row[col]);
  if (s.points.empty()) return;
  write_text_atomic(dir / name, line_plot_svg(y_label + " during training", "step", y_label, {s}));
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------- commands

int cmd_config(const Common& c) {
  std::cout << config_to_json(load_config(c));
  return 0;
}

int cmd_zoo_build(const Common& c, bool force) {
  const auto cfg = load_config(c);
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path dir = pool_dir(cfg.output_dir, cfg.dataset, cfg.arch);
  const std::string zoo_text = json::parse(config_to_json(cfg))["zoo"].dump(2) + "\n";
  const fs::path run = open_run(cfg, c, "zoo-build-" + short_hash(cfg));
  const Dataset ds = load_dataset(cfg.dataset);
  TeacherPool pool;
  if (fs::exists(dir / "pool.json") && !force) {
    if (!fs::exists(dir / "zoo_config.json") || read_text(dir / "zoo_config.json") != zoo_text)
      throw ConfigError("a pool built with different settings exists at " + dir.string() + " (pass --force to rebuild)");
    pool = TeacherPool::open(dir);
    std::printf("pool already built at %s\n", dir.string().c_str());
  } else {
    pool = build_pool(cfg.zoo, ds, cfg.output_dir);
    write_text_atomic(dir / "zoo_config.json", zoo_text);
  }
  std::string csv = "id,split,lr,augment,seed,attempts,val_acc,test_acc\n";
  for (const auto& m : pool.manifests()) {
    const double test = accuracy(pool.load(m.id), ds, ds.test);
    csv += m.id + "," + to_string(m.split) + "," + std::to_string(m.hparams.lr) + "," + (m.hparams.augment ? "1" : "0") + "," +
           std::to_string(m.seed) + "," + std::to_string(m.attempts) + "," + std::to_string(m.val_acc) + "," +
           std::to_string(test) + "\n";
  }
  write_text_atomic(run / "pool.csv", csv);
  std::printf("%zu checkpoints (%zu train / %zu eval) in %s, %.1fs\n", pool.manifests().size(), pool.ids(Split::train).size(),
              pool.ids(Split::eval).size(), dir.string().c_str(), seconds_since(t0));
  return 0;
}

int cmd_pretrain(const Common& c, bool resume) {
  const auto cfg = load_config(c);
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path run = open_run(cfg, c, "pretrain-" + short_hash(cfg));
  const Dataset ds = load_dataset(cfg.dataset);
  const TeacherPool pool = open_pool(cfg);
  WeightFormer gen(cfg.generator, pool.arch(), pool_norm_stats(pool));
  KdCache kd(kd_root(cfg), cfg.train.kd, cfg.train.seed);
  RunOptions opt;
  opt.out_dir = run;
  opt.provenance_json = json{{"stage", "pretrain"}, {"config_hash", config_hash(cfg)}}.dump();
  std::optional<RunState> state;
  if (resume) {
    state = load_run_state(run / "run_state.mtc");
    opt.resume = &*state;
  }
  const RunResult r = pretrain(gen, pool, ds, kd, cfg.train, opt);
  write_curve(run, r.state.log, "pretrain_curve.svg", "eval_l2", "L2 matching loss");
  std::printf("pretrain: %ld steps, stop %s, KD students trained %d, %.1fs -> %s\n", r.steps, r.stop_reason.c_str(),
              kd.trained(), seconds_since(t0), (run / "best.gen").string().c_str());
  return 0;
}

int cmd_train(const Common& c, const std::string& init, bool resume) {
  const auto cfg = load_config(c);
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset ds = load_dataset(cfg.dataset);
  const TeacherPool pool = open_pool(cfg);
  std::optional<WeightFormer> gen;
  if (!init.empty() || cfg.pretrain) gen.emplace(load_generator(cfg, init, "pretrain", "--init"));
  else gen.emplace(cfg.generator, pool.arch(), pool_norm_stats(pool));
  const fs::path run = open_run(cfg, c, "train-" + short_hash(cfg));
  RunOptions opt;
  opt.out_dir = run;
  opt.provenance_json = json{{"stage", "train"}, {"config_hash", config_hash(cfg)}}.dump();
  std::optional<RunState> state;
  if (resume) {
    state = load_run_state(run / "run_state.mtc");
    opt.resume = &*state;
  }
  const RunResult r = train(*gen, pool, ds, cfg.train, opt);
  write_curve(run, r.state.log, "train_curve.svg", "val_acc", "validation ACC-1 (%)");
  std::printf("train: %ld steps, stop %s, best held-in val %.2f, %.1fs -> %s\n", r.steps, r.stop_reason.c_str(), r.best_val,
              seconds_since(t0), (run / "best.gen").string().c_str());
  return 0;
}

int cmd_finetune(const Common& c, const std::string& generator, const std::string& teachers, int tuple_index) {
  const auto cfg = load_config(c);
  const Dataset ds = load_dataset(cfg.dataset);
  const TeacherPool pool = open_pool(cfg);
  WeightFormer gen = load_generator(cfg, generator, "train");
  std::vector<std::string> ids = split_ids(teachers);
  if (ids.empty()) {
    const auto tuples = eval_tuples_for(cfg, pool, "");
    if (tuple_index < 0 || tuple_index >= static_cast<int>(tuples.size()))
      throw ConfigError("--tuple must be in [0, " + std::to_string(tuples.size()) + ")");
    ids = tuples[tuple_index];
  }
  const fs::path run = open_run(cfg, c, "finetune-" + short_hash(cfg) + "-" + KdCache::key(ids));
  RunOptions opt;
  opt.out_dir = run;
  opt.provenance_json = json{{"stage", "finetune"}, {"teachers", ids}, {"config_hash", config_hash(cfg)}}.dump();
  const RunResult r = finetune_unseen(gen, pool, ids, ds, cfg.train, opt);
  write_curve(run, r.state.log, "finetune_curve.svg", "val_acc", "validation ACC-1 (%)");
  std::printf("finetune on %s: %ld steps, stop %s, best val %.2f -> %s\n", KdCache::key(ids).c_str(), r.steps,
              r.stop_reason.c_str(), r.best_val, (run / "best.gen").string().c_str());
  return 0;
}

int cmd_generate(const Common& c, const std::string& generator, const std::string& teachers, const std::string& out) {
  const auto cfg = load_config(c);
  WeightFormer gen = load_generator(cfg, generator, "train");
  std::vector<WeightSet> ws;
  std::optional<TeacherPool> pool;
  for (const auto& t : split_ids(teachers)) {
    if (fs::exists(t)) {
      WeightSet w = load_weights(t);
      if (!(*w.arch == gen.arch())) throw StructuralError("teacher " + t + " does not match the generator architecture");
      w.arch = gen.arch_ptr();
      ws.push_back(std::move(w));
    } else {
      if (!pool) pool.emplace(open_pool(cfg));
      WeightSet w = pool->load(t);
      w.arch = gen.arch_ptr();
      ws.push_back(std::move(w));
    }
  }
  if (ws.empty()) throw ConfigError("--teachers is empty");
  const WeightSet student = generate_student(gen, ws);
  validate_weights(gen.arch(), student);
  save_weights(out, student);
  const Dataset ds = load_dataset(cfg.dataset);
  std::printf("student written to %s (test ACC-1 %.2f)\n", out.c_str(), accuracy(student, ds, ds.test));
  return 0;
}

int cmd_baseline(const Common& c, const std::string& kind, const std::string& tuple_file) {
  const auto cfg = load_config(c);
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset ds = load_dataset(cfg.dataset);
  const TeacherPool pool = open_pool(cfg);
  const fs::path run = open_run(cfg, c, "baseline-" + kind + "-" + short_hash(cfg));
  const auto tuples = eval_tuples_for(cfg, pool, tuple_file);
  const EvalSettings es = eval_settings(cfg);
  MetricsReport r;
  if (kind == "single") {
    r = evaluate_method("single", single_method(ds), tuples, pool, ds, es);
  } else if (kind == "ensemble") {
    r = evaluate_method("ensemble", ensemble_method(ds), tuples, pool, ds, es);
  } else if (kind == "kd") {
    KdCache kd(kd_root(cfg), cfg.train.kd, cfg.train.seed);
    r = evaluate_method("kd", kd_method(kd, pool, ds), tuples, pool, ds, es);
  } else {
    MlpPredictor mlp(cfg.mlp, pool.arch(), pool_norm_stats(pool));
    train_mlp_predictor(mlp, pool, ds, cfg.mlp_train);
    mlp.save(run / "mlp.mtc");
    r = evaluate_method("mlp", mlp_method(mlp, ds), tuples, pool, ds, es);
  }
  write_report(run, r, cfg, tuples);
  std::printf("%.1fs -> %s\n", seconds_since(t0), run.string().c_str());
  return 0;
}

int cmd_evaluate(const Common& c, const std::string& method, const std::string& generator, const std::string& tuple_file,
                 const std::vector<std::string>& against) {
  const auto cfg = load_config(c);
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset ds = load_dataset(cfg.dataset);
  const TeacherPool pool = open_pool(cfg);
  const auto tuples = eval_tuples_for(cfg, pool, tuple_file);
  std::vector<MetricsReport> others;
  for (const auto& a : against) others.push_back(report_from_json(read_text(a)));
  if (!others.empty()) {
    MetricsReport probe;
    probe.method = method;
    probe.tuple_hash = tuple_hash(tuples);
    others.insert(others.begin(), probe);
    check_same_tuples(others);
  }
  const fs::path run = open_run(cfg, c, "evaluate-" + std::string(method == "wf*" ? "wfstar" : method) + "-" + short_hash(cfg));
  const EvalSettings es = eval_settings(cfg);
  MetricsReport r;
  if (method == "untrained") {
    WeightFormer gen(cfg.generator, pool.arch(), pool_norm_stats(pool));
    r = evaluate_method("untrained", generator_method(gen, ds), tuples, pool, ds, es);
  } else {
    WeightFormer gen = load_generator(cfg, generator, "train");
    if (method == "wf") r = evaluate_method("wf", generator_method(gen, ds), tuples, pool, ds, es);
    else r = evaluate_method("wf*", finetuned_method(gen, pool, ds, cfg.train), tuples, pool, ds, es);
  }
  write_report(run, r, cfg, tuples);
  std::printf("%.1fs -> %s\n", seconds_since(t0), run.string().c_str());
  return 0;
}

int cmd_ablate(const Common& c, int replicates) {
  const auto cfg = load_config(c);
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset ds = load_dataset(cfg.dataset);
  const TeacherPool pool = open_pool(cfg);
  const fs::path run = open_run(cfg, c, "ablate-" + short_hash(cfg));
  const auto tuples = eval_tuples_for(cfg, pool, "");
  std::vector<Variant> variants;
  for (const auto& v : cfg.eval.ablation_variants) variants.push_back(variant_from_string(v));
  std::string csv = "replicate," + ablation_csv({}).substr(0, ablation_csv({}).size() - 1) + "\n";
  std::string md = "| Replicate | Variant | ACC-1 | ECE |\n|---:|---|---:|---:|\n";
  for (int rep = 0; rep < replicates; ++rep) {
    AblationSetup setup;
    setup.generator = cfg.generator;
    setup.train = cfg.train;
    if (rep > 0) {
      setup.generator.seed = stream_seed(cfg.generator.seed, "replicate/" + std::to_string(rep));
      setup.train.seed = stream_seed(cfg.train.seed, "replicate/" + std::to_string(rep));
    }
    setup.pretrain = cfg.pretrain;
    setup.kd_dir = kd_root(cfg);
    setup.out_dir = run / ("replicate-" + std::to_string(rep));
    const auto rows = run_ablation(variants, setup, pool, ds, tuples, eval_settings(cfg));
    std::stringstream body(ablation_csv(rows));
    std::string line;
    std::getline(body, line);
    while (std::getline(body, line)) csv += std::to_string(rep) + "," + line + "\n";
    for (const auto& r : rows) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "| %d | %s | %.2f ± %.2f | %.2f |\n", rep, to_string(r.variant).c_str(), r.report.acc1,
                    r.report.acc1_2s, r.report.ece);
      md += buf;
      std::printf("replicate %d %-20s ACC-1 %.2f\n", rep, to_string(r.variant).c_str(), r.report.acc1);
    }
  }
  write_text_atomic(run / "ablation.csv", csv);
  write_text_atomic(run / "ablation.md", md);
  std::printf("%.1fs -> %s\n", seconds_since(t0), run.string().c_str());
  return 0;
}

int cmd_sweep(const Common& c, const std::string& generator) {
  const auto cfg = load_config(c);
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset ds = load_dataset(cfg.dataset);
  const TeacherPool pool = open_pool(cfg);
  if (generator.empty()) throw ConfigError("sweep needs --generator (a generator trained with two teachers)");
  const WeightFormer gen = WeightFormer::load(generator);
  const fs::path run = open_run(cfg, c, "sweep-" + short_hash(cfg));
  SweepSettings s;
  s.m_values = cfg.eval.sweep_m;
  s.modes.clear();
  for (const auto& m : cfg.eval.sweep_modes) s.modes.push_back(scale_mode_from_string(m));
  s.tuples_per_m = cfg.eval.sweep_tuples;
  s.seed = cfg.eval_seed;
  s.eval = eval_settings(cfg);
  const auto cells = teacher_count_sweep(s, gen, pool, ds);
  write_text_atomic(run / "sweep.csv", sweep_csv(cells));
  write_text_atomic(run / "sweep_skipped.csv", sweep_skipped_csv(cells));
  write_text_atomic(run / "sweep.svg", sweep_svg(cells));
  for (const auto& cell : cells) {
    if (cell.skipped) std::printf("m=%d %-12s skipped (%s)\n", cell.m, to_string(cell.mode).c_str(), cell.reason.c_str());
    else std::printf("m=%d %-12s ACC-1 %.2f ± %.2f\n", cell.m, to_string(cell.mode).c_str(), cell.acc1, cell.acc1_2s);
  }
  std::printf("%.1fs -> %s\n", seconds_since(t0), run.string().c_str());
  return 0;
}

int method_rank(const std::string& m) {
  static const std::vector<std::string> order{"single", "ensemble", "kd", "mlp", "untrained", "wf", "wf*"};
  const auto it = std::find(order.begin(), order.end(), m);
  return static_cast<int>(it - order.begin());
}

int cmd_report(const Common& c, std::vector<std::string> files, const std::string& dir) {
  const auto cfg = load_config(c);
  if (!dir.empty()) {
    if (!fs::is_directory(dir)) throw ConfigError("no directory " + dir);
    for (const auto& e : fs::recursive_directory_iterator(dir))
      if (e.path().filename() == "report.json") files.push_back(e.path().string());
  }
  if (files.empty()) throw ConfigError("no reports given (use --reports or --dir)");
  std::sort(files.begin(), files.end());
  std::vector<MetricsReport> reports;
  for (const auto& f : files) reports.push_back(report_from_json(read_text(f)));
  std::stable_sort(reports.begin(), reports.end(),
                   [](const MetricsReport& a, const MetricsReport& b) { return method_rank(a.method) < method_rank(b.method); });
  const std::string md = report_markdown(reports);
  const fs::path run = open_run(cfg, c, "report-" + short_hash(cfg));
  write_text_atomic(run / "report.md", md);
  write_text_atomic(run / "report.csv", reports_to_csv(reports));
  std::cout << md;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-ensemble parameter learning: teacher pools, weight generator training and evaluation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", MEPL_VERSION);

  Common common;
  bool force = false, resume = false;
  std::string generator, init, teachers, out, tuple_file, method = "wf", report_dir;
  std::vector<std::string> against, reports;
  int tuple_index = 0, replicates = 1;

  auto* config = app.add_subcommand("config", "Print the resolved configuration");
  add_common(config, common);

  auto* zoo = app.add_subcommand("zoo-build", "Train the teacher pool and split it into train/eval checkpoints");
  add_common(zoo, common);
  zoo->add_flag("--force", force, "Rebuild even if a pool exists");

  auto* pre = app.add_subcommand("pretrain", "L2-match the generator to per-tuple KD students");
  add_common(pre, common);
  pre->add_flag("--resume", resume, "Continue from the run's run_state.mtc");

  auto* tr = app.add_subcommand("train", "Train the generator through its generated students");
  add_common(tr, common);
  tr->add_option("--init", init, "Starting generator (default: this config's pretrain run)");
  tr->add_flag("--resume", resume, "Continue from the run's run_state.mtc");

  auto* ft = app.add_subcommand("finetune", "Fine-tune on one unseen eval-split tuple (WF*)");
  add_common(ft, common);
  ft->add_option("--generator", generator, "Trained generator (default: this config's train run)");
  ft->add_option("--teachers", teachers, "Comma-separated eval-split ids");
  ft->add_option("--tuple", tuple_index, "Index into the shared evaluation tuples when --teachers is absent");

  auto* gen = app.add_subcommand("generate", "Generate a student from teacher checkpoints");
  add_common(gen, common);
  gen->add_option("--generator", generator, "Generator checkpoint (default: this config's train run)");
  gen->add_option("--teachers", teachers, "Comma-separated pool ids or weight files")->required();
  gen->add_option("--out", out, "Student weights file")->required();

  auto* base = app.add_subcommand("baseline", "Evaluate a reference method on the shared evaluation tuples");
  base->require_subcommand(1);
  std::string baseline_kind;
  for (const char* kind : {"single", "ensemble", "kd", "mlp"}) {
    auto* sub = base->add_subcommand(kind, std::string("Baseline: ") + kind);
    add_common(sub, common);
    sub->add_option("--tuples", tuple_file, "JSON list of teacher tuples (default: sampled from the config)");
    sub->callback([&baseline_kind, kind] { baseline_kind = kind; });
  }

  auto* ev = app.add_subcommand("evaluate", "Score a generator on the shared evaluation tuples");
  add_common(ev, common);
  ev->add_option("--method", method, "wf, wf* (fine-tune per tuple) or untrained")
      ->check(CLI::IsMember({"wf", "wf*", "wfstar", "untrained"}));
  ev->add_option("--generator", generator, "Generator checkpoint (default: this config's train run)");
  ev->add_option("--tuples", tuple_file, "JSON list of teacher tuples (default: sampled from the config)");
  ev->add_option("--against", against, "Reports that must share this run's tuples");

  auto* ab = app.add_subcommand("ablate", "Retrain with each component removed and compare");
  add_common(ab, common);
  ab->add_option("--replicates", replicates, "Seed replicates")->check(CLI::PositiveNumber);

  auto* sw = app.add_subcommand("sweep", "Teacher-count sweep with heuristic and concatenate scaling");
  add_common(sw, common);
  sw->add_option("--generator", generator, "Generator trained with two teachers")->required();

  auto* rep = app.add_subcommand("report", "Render a comparison grid from metrics reports");
  add_common(rep, common);
  rep->add_option("--reports", reports, "report.json files");
  rep->add_option("--dir", report_dir, "Collect every report.json below this directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(ErrorKind::config);
  }

  try {
    if (*config) return cmd_config(common);
    if (*zoo) return cmd_zoo_build(common, force);
    if (*pre) return cmd_pretrain(common, resume);
    if (*tr) return cmd_train(common, init, resume);
    if (*ft) return cmd_finetune(common, generator, teachers, tuple_index);
    if (*gen) return cmd_generate(common, generator, teachers, out);
    if (*base) return cmd_baseline(common, baseline_kind, tuple_file);
    if (*ev) return cmd_evaluate(common, method == "wfstar" ? "wf*" : method, generator, tuple_file, against);
    if (*ab) return cmd_ablate(common, replicates);
    if (*sw) return cmd_sweep(common, generator);
    if (*rep) return cmd_report(common, reports, report_dir);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return static_cast<int>(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
