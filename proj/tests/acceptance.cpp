// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Pass criterion numbers as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "support.hpp"

#include "mepl/baselines.hpp"
#include "mepl/codec.hpp"
#include "mepl/config.hpp"
#include "mepl/eval.hpp"
#include "mepl/generator.hpp"
#include "mepl/io.hpp"
#include "mepl/losses.hpp"
#include "mepl/metrics.hpp"
#include "mepl/training.hpp"
#include "mepl/zoo.hpp"

using namespace mepl;
using namespace mepl::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

fs::path out_root() { return MEPL_ACCEPTANCE_DIR; }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

const LayerKind kKinds[] = {LayerKind::conv, LayerKind::fc, LayerKind::norm, LayerKind::attention};

// ---------------------------------------------------------------- 1. codec

Outcome codec_round_trip() {
  Rng rng(1001);
  int layers = 0, exact = 0;
  double worst_norm = 0.0;
  for (LayerKind kind : kKinds) {
    for (int trial = 0; trial < 100; ++trial, ++layers) {
      const LayerSpec l = random_layer(kind, rng);
      auto arch = std::make_shared<ArchSpec>();
      arch->layers = {l};
      std::vector<WeightSet> pool;
      for (int i = 0; i < 3; ++i) {
        WeightSet ws = random_layer_weights(l, rng);
        ws.arch = arch;
        pool.push_back(std::move(ws));
      }
      WeightSet back;
      detokenize_layer(tokenize_layer(pool[0], l), l, back);
      if (back.tensors == pool[0].tensors) ++exact;

      const NormStats stats = fit_norm_stats(pool);
      const TokenMatrix tm = tokenize_layer(pool[1], l);
      const TokenMatrix again = invert_norm(apply_norm(tm, stats), stats);
      for (std::size_t i = 0; i < tm.tokens.size(); ++i) worst_norm = std::max(worst_norm, rel_err(again.tokens[i], tm.tokens[i]));
    }
  }
  return {exact == layers && worst_norm <= 1e-6,
          fmt("%d/%d layers exact over 4 kinds, worst norm round-trip rel err %.2e (tol 1e-6)", exact, layers, worst_norm)};
}

// ---------------------------------------------------------------- 2. shape laws

std::pair<int, int> expected_token_shape(const LayerSpec& l) {
  const int b = l.has_bias ? 1 : 0;
  switch (l.kind) {
    case LayerKind::conv: return {l.n_output, l.kernel * l.kernel * l.n_input + b};
    case LayerKind::fc: return {l.n_output, l.n_input + b};
    case LayerKind::norm: return {l.n_output, 2};
    case LayerKind::attention: return {2 * l.d_k + 2 * l.d_v, l.heads * l.d_trans};
  }
  return {0, 0};
}

Outcome shape_laws() {
  Rng rng(2002);
  int cases = 0, ok = 0;
  std::string first_bad;
  for (int trial = 0; trial < 600; ++trial, ++cases) {
    const LayerSpec l = random_layer(kKinds[trial % 4], rng);
    const auto want = expected_token_shape(l);
    const WeightSet ws = random_layer_weights(l, rng);
    const TokenMatrix tm = tokenize_layer(ws, l);
    std::size_t scalars = 0;
    for (const auto& [role, shape] : layer_tensor_shapes(l)) {
      std::size_t n = 1;
      for (int d : shape) n *= d;
      scalars += n;
    }
    const auto index = token_source_index(l);
    std::vector<std::int64_t> sorted(index.begin(), index.end());
    std::sort(sorted.begin(), sorted.end());
    bool perm = sorted.size() == scalars;
    for (std::size_t i = 0; perm && i < sorted.size(); ++i) perm = sorted[i] == static_cast<std::int64_t>(i);
    const bool good = token_shape(l) == want && tm.seq_len() == want.first && tm.d_layer() == want.second &&
                      static_cast<std::size_t>(want.first) * want.second == scalars && perm && tm.key() == layer_key(l);
    if (good) ++ok;
    else if (first_bad.empty()) first_bad = to_string(l.kind) + " layer breaks the layout";
  }
  return {ok == cases, fmt("%d/%d randomized specs match the token layout%s", ok, cases,
                           first_bad.empty() ? "" : ("; first failure: " + first_bad).c_str())};
}

// ---------------------------------------------------------------- 3. gradient

Outcome combined_gradient() {
  auto arch = std::make_shared<const ArchSpec>(two_layer_arch(6));
  std::vector<WeightSet> teachers;
  for (int i = 0; i < 3; ++i) {
    Rng r(300 + i);
    teachers.push_back(init_weights(arch, r));
  }
  GeneratorConfig cfg;
  cfg.d_model = 16;
  cfg.num_blocks = 1;
  cfg.num_heads = 2;
  cfg.ffn_dim = 24;
  cfg.n_teachers = 3;
  cfg.cutoff_rate = 0.25;
  cfg.seed = 33;
  WeightFormer gen(cfg, arch, fit_norm_stats(teachers));
  const auto prep = prepare_teachers(gen, teachers);
  const Dataset ds = load_dataset("digits");
  const std::vector<int> idx(ds.train.begin(), ds.train.begin() + 16);
  const Batch batch = make_batch(ds, idx);
  LossConfig lc;
  lc.alpha = 0.5;

  auto loss = [&](const ParamStore& ps, ParamStore* grads) {
    ad::Graph<double> g;
    const auto p = bind_params<double>(g, ps, grads != nullptr);
    Rng a(71), b(72);
    const auto terms = combined_loss(g, gen, p, prep, batch, lc, a, b);
    if (grads) {
      g.backward(terms.total);
      *grads = collect_grads(g, p);
    }
    return g.value(terms.total)[0];
  };
  ParamStore grads;
  loss(gen.params(), &grads);

  std::vector<std::pair<std::string, std::size_t>> coords;
  for (const auto& [name, t] : gen.params().tensors)
    for (std::size_t k = 0; k < t.size(); ++k) coords.emplace_back(name, k);
  Rng pick(34);
  int checked = 0, tiny = 0, bad = 0;
  double worst = 0.0;
  std::string worst_at;
  for (int draw = 0; draw < 400 && checked < 40; ++draw) {
    const auto& [name, k] = coords[pick.below(coords.size())];
    const double an = grads.at(name)[k];
    const double eps = 1e-5;
    ParamStore plus = gen.params(), minus = gen.params();
    plus.at(name)[k] += eps;
    minus.at(name)[k] -= eps;
    const double fd = (loss(plus, nullptr) - loss(minus, nullptr)) / (2 * eps);
    if (std::max(std::abs(an), std::abs(fd)) < 1e-7) {
      ++tiny;
      continue;
    }
    const double e = rel_err(an, fd);
    if (e > worst) {
      worst = e;
      worst_at = name + "[" + std::to_string(k) + "]";
    }
    if (e > 1e-3) ++bad;
    ++checked;
  }
  return {checked >= 20 && bad == 0,
          fmt("%d coordinates checked (%d with |grad| < 1e-7 skipped), worst rel err %.2e at %s (tol 1e-3)", checked, tiny,
              worst, worst_at.c_str())};
}

// ---------------------------------------------------------------- 4. consistency null case

Outcome consistency_null() {
  double worst = 0.0;
  int cases = 0;
  for (const char* preset : {"cnn_tiny", "mlp_tiny", "vit_tiny"}) {
    auto arch = std::make_shared<const ArchSpec>(build_arch(preset, 10, {1, 8, 8}));
    for (int n : {2, 3, 4}) {
      for (Mode mode : {Mode::train, Mode::eval}) {
        Rng rng(400 + n);
        const WeightSet w = init_weights(arch, rng);
        std::vector<WeightSet> same(n, w);
        GeneratorConfig cfg;
        cfg.d_model = 32;
        cfg.num_blocks = 2;
        cfg.num_heads = 4;
        cfg.ffn_dim = 64;
        cfg.n_teachers = n;
        cfg.cutoff_rate = 0.0;
        cfg.tie_model_ids = true;
        cfg.seed = 40 + n;
        std::vector<WeightSet> fit_pool = same;
        fit_pool.push_back(init_weights(arch, rng));  // non-degenerate statistics
        const WeightFormer gen(cfg, arch, fit_norm_stats(fit_pool));
        Rng a(1), b(2);
        worst = std::max(worst, std::abs(shift_consistency(gen, same, {}, a, b, mode)));
        ++cases;
      }
    }
  }
  return {worst == 0.0, fmt("%d cases over cnn/mlp/vit students and 2-4 teachers, max |shift_consistency| = %.3g", cases, worst)};
}

// ---------------------------------------------------------------- 5. metric oracles

double oracle_topn(const Tensor& logits, const std::vector<int>& labels, int n) {
  const int rows = logits.dim(0), cols = logits.dim(1);
  int hits = 0;
  for (int r = 0; r < rows; ++r) {
    const int y = labels[r];
    int ahead = 0;
    for (int c = 0; c < cols; ++c)
      if (logits.at(r, c) > logits.at(r, y) || (logits.at(r, c) == logits.at(r, y) && c < y)) ++ahead;
    if (ahead < n) ++hits;
  }
  return 100.0 * hits / rows;
}

double oracle_ece(const std::vector<double>& conf, const std::vector<int>& correct, int bins) {
  double total = 0.0;
  for (int b = 0; b < bins; ++b) {
    const double lo = static_cast<double>(b) / bins, hi = static_cast<double>(b + 1) / bins;
    double cs = 0.0, hs = 0.0;
    int count = 0;
    for (std::size_t i = 0; i < conf.size(); ++i) {
      const bool in = (conf[i] >= lo && conf[i] < hi) || (b == bins - 1 && conf[i] == 1.0);
      if (!in) continue;
      cs += conf[i];
      hs += correct[i];
      ++count;
    }
    if (count) total += std::abs(hs / count - cs / count) * count / conf.size();
  }
  return 100.0 * total;
}

Outcome metric_oracles() {
  Rng rng(5005);
  double worst_top = 0.0, worst_ece = 0.0;
  for (int set = 0; set < 1000; ++set) {
    const int rows = 1 + static_cast<int>(rng.below(60));
    const int cols = 2 + static_cast<int>(rng.below(19));
    const bool coarse = set % 3 == 0;  // rounded logits produce ties
    Tensor logits({rows, cols});
    for (auto& v : logits.vec()) v = coarse ? std::round(2 * rng.normal()) : 3 * rng.normal();
    std::vector<int> labels(rows);
    for (auto& y : labels) y = static_cast<int>(rng.below(cols));
    const int n = 1 + static_cast<int>(rng.below(cols));
    worst_top = std::max(worst_top, std::abs(acc_topn(logits, labels, n) - oracle_topn(logits, labels, n)));

    // Softmax confidence, lowest index wins argmax ties.
    std::vector<double> conf(rows);
    std::vector<int> correct(rows);
    for (int r = 0; r < rows; ++r) {
      int arg = 0;
      for (int c = 1; c < cols; ++c)
        if (logits.at(r, c) > logits.at(r, arg)) arg = c;
      double z = 0.0;
      for (int c = 0; c < cols; ++c) z += std::exp(logits.at(r, c) - logits.at(r, arg));
      conf[r] = 1.0 / z;
      correct[r] = arg == labels[r];
    }
    const int bins = 1 + static_cast<int>(rng.below(20));
    worst_ece = std::max(worst_ece, std::abs(ece_from_logits(logits, labels, bins) - oracle_ece(conf, correct, bins)));

    // Confidences placed on and next to the bin edges.
    std::vector<double> edge(rows);
    for (auto& c : edge) {
      const double e = static_cast<double>(rng.below(bins + 1)) / bins;
      const int side = static_cast<int>(rng.below(3));
      c = side == 0 ? e : side == 1 ? std::nextafter(e, 0.0) : std::nextafter(e, 1.0);
      c = std::clamp(c, 0.0, 1.0);
    }
    worst_ece = std::max(worst_ece, std::abs(ece(edge, correct, bins) - oracle_ece(edge, correct, bins)));
  }
  return {worst_top <= 1e-12 && worst_ece <= 1e-12,
          fmt("1000 random sets: max |acc_topn - oracle| %.3g, max |ece - oracle| %.3g (tol 1e-12)", worst_top, worst_ece)};
}

// ---------------------------------------------------------------- desk experiment

/// The desk pipeline shared by criteria 7-10: one pool, pretrain, train.
struct Desk {
  ExperimentConfig cfg;
  Dataset ds;
  TeacherPool pool;
  std::vector<TeacherTuple> tuples;
  fs::path kd_dir;
  fs::path pretrain_dir, train_dir;
  double seconds = 0.0;
};

fs::path kd_dir_for(const ExperimentConfig& cfg) {
  std::string d = cfg.dataset;
  std::replace(d.begin(), d.end(), ':', '_');
  return fs::path(cfg.output_dir) / "kd_cache" / d / cfg.arch;
}

WeightFormer pretrain_and_train(const ExperimentConfig& cfg, const TeacherPool& pool, const Dataset& ds, const fs::path& dir) {
  KdCache kd(kd_dir_for(cfg), cfg.train.kd, cfg.train.seed);
  WeightFormer gen(cfg.generator, pool.arch(), pool_norm_stats(pool));
  RunOptions pre;
  pre.out_dir = dir / "pretrain";
  pretrain(gen, pool, ds, kd, cfg.train, pre);
  RunOptions main;
  main.out_dir = dir / "train";
  train(gen, pool, ds, cfg.train, main);
  return gen;
}

Desk& desk() {
  static Desk d = [] {
    const auto t0 = std::chrono::steady_clock::now();
    Desk s;
    ExperimentConfig c = desk_config();
    c.output_dir = (out_root() / "desk").string();
    s.cfg = resolve(c);
    validate(s.cfg);
    fs::remove_all(s.cfg.output_dir);
    fs::create_directories(s.cfg.output_dir);
    write_text_atomic(fs::path(s.cfg.output_dir) / "config.json", config_to_json(s.cfg));
    s.ds = load_dataset(s.cfg.dataset);
    s.pool = build_pool(s.cfg.zoo, s.ds, s.cfg.output_dir);
    s.tuples = sample_tuples(s.pool, s.cfg.generator.n_teachers, s.cfg.eval.n_tuples, s.cfg.eval_seed, Split::eval);
    s.kd_dir = kd_dir_for(s.cfg);
    s.pretrain_dir = fs::path(s.cfg.output_dir) / "run" / "pretrain";
    s.train_dir = fs::path(s.cfg.output_dir) / "run" / "train";
    pretrain_and_train(s.cfg, s.pool, s.ds, fs::path(s.cfg.output_dir) / "run");
    s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return s;
  }();
  return d;
}

WeightFormer trained_generator() { return WeightFormer::load(desk().train_dir / "best.gen"); }

void write_reports(const std::string& name, const std::vector<MetricsReport>& reports) {
  write_text_atomic(out_root() / (name + ".csv"), reports_to_csv(reports));
}

// ---------------------------------------------------------------- 6. ensemble ordering

Outcome ensemble_ordering() {
  const Dataset ds = load_dataset("digits");
  int wins = 0;
  std::string detail;
  std::vector<MetricsReport> all;
  for (int seed = 0; seed < 5; ++seed) {
    ZooConfig z;
    z.dataset = "digits";
    z.arch = "cnn_tiny";
    z.pool_size = 10;
    z.n_train = 6;
    z.seed = stream_seed(seed, "zoo");
    const fs::path root = out_root() / "ensemble" / ("seed-" + std::to_string(seed));
    fs::remove_all(root);
    const TeacherPool pool = build_pool(z, ds, root);
    const auto tuples = sample_tuples(pool, 3, 4, stream_seed(seed, "eval"), Split::eval);
    const MetricsReport single = evaluate_method("single", single_method(ds), tuples, pool, ds);
    const MetricsReport ens = evaluate_method("ensemble", ensemble_method(ds), tuples, pool, ds);
    all.push_back(single);
    all.push_back(ens);
    if (ens.acc1 >= single.acc1) ++wins;
    detail += fmt("%s%.2f vs %.2f", seed ? ", " : "", ens.acc1, single.acc1);
  }
  write_reports("ensemble_ordering", all);
  return {wins >= 4, fmt("ensemble >= mean single in %d/5 seeds (10-teacher pools, ensemble vs single ACC-1: %s)", wins,
                         detail.c_str())};
}

// ---------------------------------------------------------------- 7. generator learns

Outcome generator_learns() {
  Desk& d = desk();
  const WeightFormer gen = trained_generator();
  const WeightFormer untrained(d.cfg.generator, d.pool.arch(), pool_norm_stats(d.pool));
  KdCache kd(d.kd_dir, d.cfg.train.kd, d.cfg.train.seed);
  const auto es = eval_settings(d.cfg);
  const auto t0 = std::chrono::steady_clock::now();
  const MetricsReport wf = evaluate_method("wf", generator_method(gen, d.ds), d.tuples, d.pool, d.ds, es);
  const MetricsReport un = evaluate_method("untrained", generator_method(untrained, d.ds), d.tuples, d.pool, d.ds, es);
  const MetricsReport kdr = evaluate_method("kd", kd_method(kd, d.pool, d.ds), d.tuples, d.pool, d.ds, es);
  const double total = d.seconds + std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_reports("generator_learns", {wf, un, kdr});
  const bool ok = wf.acc1 >= un.acc1 + 20.0 && wf.acc1 >= 0.9 * kdr.acc1 && total <= 7200.0;
  return {ok, fmt("WF %.2f, untrained %.2f (need >= %.2f), KD %.2f (need WF >= %.2f); pipeline %.0fs (budget 7200s)", wf.acc1,
                  un.acc1, un.acc1 + 20.0, kdr.acc1, 0.9 * kdr.acc1, total)};
}

// ---------------------------------------------------------------- 8. WF* >= WF

Outcome finetune_helps() {
  Desk& d = desk();
  const WeightFormer gen = trained_generator();
  const auto es = eval_settings(d.cfg);
  const MetricsReport wf = evaluate_method("wf", generator_method(gen, d.ds), d.tuples, d.pool, d.ds, es);
  const MetricsReport star = evaluate_method("wf*", finetuned_method(gen, d.pool, d.ds, d.cfg.train), d.tuples, d.pool, d.ds, es);
  write_reports("finetune", {wf, star});
  int ok = 0;
  std::string detail;
  for (std::size_t i = 0; i < wf.per_tuple.size(); ++i) {
    if (star.per_tuple[i].acc1 >= wf.per_tuple[i].acc1) ++ok;
    detail += fmt("%s%.2f/%.2f", i ? ", " : "", star.per_tuple[i].acc1, wf.per_tuple[i].acc1);
  }
  return {ok >= 4, fmt("WF* >= WF on %d/%zu tuples (WF*/WF ACC-1: %s)", ok, wf.per_tuple.size(), detail.c_str())};
}

// ---------------------------------------------------------------- 9. ablation direction

Outcome ablation_direction() {
  Desk& d = desk();
  std::vector<Variant> variants;
  for (const auto& v : d.cfg.eval.ablation_variants) variants.push_back(variant_from_string(v));
  int ok = 0;
  std::string detail;
  std::string csv;
  for (int rep = 0; rep < 5; ++rep) {
    AblationSetup setup;
    setup.generator = d.cfg.generator;
    setup.train = d.cfg.train;
    if (rep > 0) {
      setup.generator.seed = stream_seed(d.cfg.generator.seed, "replicate/" + std::to_string(rep));
      setup.train.seed = stream_seed(d.cfg.train.seed, "replicate/" + std::to_string(rep));
    }
    setup.pretrain = d.cfg.pretrain;
    setup.kd_dir = d.kd_dir;
    const auto rows = run_ablation(variants, setup, d.pool, d.ds, d.tuples, eval_settings(d.cfg));
    std::stringstream body(ablation_csv(rows));
    std::string line;
    std::getline(body, line);
    if (csv.empty()) csv = "replicate," + line + "\n";
    while (std::getline(body, line)) csv += std::to_string(rep) + "," + line + "\n";
    const double full = rows.front().report.acc1;
    bool holds = true;
    std::string worst;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      if (full < rows[i].report.acc1 - 0.3) holds = false;
      worst += fmt(" %s %.2f", to_string(rows[i].variant).c_str(), rows[i].report.acc1);
    }
    if (holds) ++ok;
    detail += fmt("%s[full %.2f;%s]", rep ? " " : "", full, worst.c_str());
  }
  write_text_atomic(out_root() / "ablation.csv", csv);
  return {ok >= 4, fmt("full >= every variant - 0.3 in %d/5 seeds %s", ok, detail.c_str())};
}

// ---------------------------------------------------------------- 10. reproducibility

Outcome reproducibility() {
  Desk& d = desk();
  // Re-read the resolved config as a fresh run would.
  const ExperimentConfig again = config_from_json(read_text(fs::path(d.cfg.output_dir) / "config.json"), default_config());
  if (!(again == d.cfg)) return {false, "resolved config does not survive a round trip"};
  const fs::path dir = out_root() / "rerun";
  fs::remove_all(dir);
  pretrain_and_train(again, d.pool, d.ds, dir);
  int same = 0;
  std::string detail;
  for (const auto& [stage, file] : {std::pair{"pretrain", "pretrain_log.csv"}, std::pair{"train", "train_log.csv"}}) {
    const std::string a = read_text(fs::path(d.cfg.output_dir) / "run" / stage / file);
    const std::string b = read_text(dir / stage / file);
    const bool eq = !a.empty() && a == b;
    same += eq;
    detail += fmt("%s%s %s (%zu bytes)", detail.empty() ? "" : ", ", file, eq ? "identical" : "DIFFERS", a.size());
  }
  const bool gen_eq = read_text(d.train_dir / "best.gen") == read_text(dir / "train" / "best.gen");
  detail += gen_eq ? ", best.gen identical" : ", best.gen DIFFERS";
  return {same == 2 && gen_eq, detail};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "codec round-trip", codec_round_trip},
      {2, "shape laws", shape_laws},
      {3, "end-to-end differentiability", combined_gradient},
      {4, "consistency null case", consistency_null},
      {5, "metric oracles", metric_oracles},
      {6, "ensemble ordering", ensemble_ordering},
      {7, "generator learns", generator_learns},
      {8, "WF* >= WF", finetune_helps},
      {9, "ablation direction", ablation_direction},
      {10, "reproducibility", reproducibility},
  };
  const double budget[] = {0, 60, 0, 300, 0, 0, 0, 0, 0, 0, 0};
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  fs::create_directories(out_root());

  int failed = 0;
  std::string csv = "criterion,name,status,seconds,detail\n";
  for (const auto& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (budget[c.id] > 0 && secs > budget[c.id]) {
      o.pass = false;
      o.detail += fmt("; took %.1fs, over the %.0fs budget", secs, budget[c.id]);
    }
    failed += !o.pass;
    std::printf("%s  %2d  %-30s %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), secs);
    std::fflush(stdout);
    std::string quoted = o.detail;
    std::replace(quoted.begin(), quoted.end(), '"', '\'');
    csv += fmt("%d,%s,%s,%.1f,", c.id, c.name, o.pass ? "PASS" : "FAIL", secs) + "\"" + quoted + "\"\n";
  }
  write_text_atomic(out_root() / "acceptance.csv", csv);
  return failed ? 1 : 0;
}
