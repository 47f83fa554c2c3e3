#include "mepl/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <set>

#include <nlohmann/json.hpp>

#include "mepl/plot.hpp"

namespace mepl {

using nlohmann::json;

namespace {

std::string num(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string fixed(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<double> column(const std::vector<Scores>& s, double Scores::*field) {
  std::vector<double> out;
  for (const auto& x : s) out.push_back(x.*field);
  return out;
}

double subset_count(int k, int n) {
  double c = 1;
  for (int i = 0; i < n; ++i) c = c * (k - i) / (i + 1);
  return std::round(c);
}

}  // namespace

std::vector<TeacherTuple> sample_tuples(const TeacherPool& pool, int n, int count, std::uint64_t seed, Split split) {
  const auto ids = pool.ids(split);
  const int k = static_cast<int>(ids.size());
  if (n < 1 || n > k) throw ConfigError("cannot draw " + std::to_string(n) + "-tuples from a split of " + std::to_string(k));
  const double subsets = subset_count(k, n);
  if (count < 1 || count > subsets)
    throw ConfigError("requested " + std::to_string(count) + " distinct tuples but the " + to_string(split) + " split has " +
                      num(subsets) + " subsets of size " + std::to_string(n));
  Rng rng(seed, "eval/tuples");
  std::set<std::vector<int>> seen;
  std::vector<TeacherTuple> out;
  while (static_cast<int>(out.size()) < count) {
    auto idx = rng.sample_without_replacement(k, n);
    auto key = idx;
    std::sort(key.begin(), key.end());
    if (!seen.insert(key).second) continue;
    TeacherTuple t;
    for (int i : idx) t.push_back(ids[i]);
    out.push_back(std::move(t));
  }
  return out;
}

std::string tuple_hash(const std::vector<TeacherTuple>& tuples) {
  std::string text;
  for (const auto& t : tuples) {
    for (const auto& id : t) text += id + ",";
    text += ";";
  }
  return hex64(fnv1a(text));
}

// ---------------------------------------------------------------- reports

void validate(const MetricsReport& r) {
  auto pct = [](double v) { return v >= 0.0 && v <= 100.0; };
  if (!pct(r.acc1) || !pct(r.accn) || !pct(r.ece)) throw StructuralError("report " + r.method + ": value outside [0, 100]");
  if (r.accn + 1e-9 < r.acc1) throw StructuralError("report " + r.method + ": top-n accuracy below top-1");
  if (r.acc1_2s < 0 || r.accn_2s < 0 || r.ece_2s < 0) throw StructuralError("report " + r.method + ": negative spread");
}

std::string report_to_json(const MetricsReport& r) {
  json j;
  j["method"] = r.method;
  j["dataset"] = r.dataset;
  j["arch"] = r.arch;
  j["topn"] = r.topn;
  j["acc1"] = r.acc1;
  j["accn"] = r.accn;
  j["ece"] = r.ece;
  j["acc1_2sigma"] = r.acc1_2s;
  j["accn_2sigma"] = r.accn_2s;
  j["ece_2sigma"] = r.ece_2s;
  j["n_tuples"] = r.n_tuples;
  j["tuple_hash"] = r.tuple_hash;
  j["config_hash"] = r.config_hash;
  j["seeds"] = r.seeds;
  j["per_tuple"] = json::array();
  for (const auto& s : r.per_tuple) j["per_tuple"].push_back({{"acc1", s.acc1}, {"accn", s.accn}, {"ece", s.ece}});
  return j.dump(2) + "\n";
}

MetricsReport report_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    MetricsReport r;
    r.method = j.at("method").get<std::string>();
    r.dataset = j.at("dataset").get<std::string>();
    r.arch = j.at("arch").get<std::string>();
    r.topn = j.at("topn").get<int>();
    r.acc1 = j.at("acc1").get<double>();
    r.accn = j.at("accn").get<double>();
    r.ece = j.at("ece").get<double>();
    r.acc1_2s = j.at("acc1_2sigma").get<double>();
    r.accn_2s = j.at("accn_2sigma").get<double>();
    r.ece_2s = j.at("ece_2sigma").get<double>();
    r.n_tuples = j.at("n_tuples").get<int>();
    r.tuple_hash = j.at("tuple_hash").get<std::string>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.seeds = j.at("seeds").get<std::map<std::string, std::uint64_t>>();
    for (const auto& s : j.at("per_tuple"))
      r.per_tuple.push_back({s.at("acc1").get<double>(), s.at("accn").get<double>(), s.at("ece").get<double>()});
    validate(r);
    return r;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed metrics report: ") + e.what());
  }
}

std::string reports_to_csv(const std::vector<MetricsReport>& reports) {
  std::string out = "method,dataset,arch,topn,acc1,acc1_2sigma,accn,accn_2sigma,ece,ece_2sigma,n_tuples,tuple_hash,config_hash\n";
  for (const auto& r : reports)
    out += r.method + "," + r.dataset + "," + r.arch + "," + std::to_string(r.topn) + "," + num(r.acc1) + "," +
           num(r.acc1_2s) + "," + num(r.accn) + "," + num(r.accn_2s) + "," + num(r.ece) + "," + num(r.ece_2s) + "," +
           std::to_string(r.n_tuples) + "," + r.tuple_hash + "," + r.config_hash + "\n";
  return out;
}

void check_same_tuples(const std::vector<MetricsReport>& reports) {
  for (const auto& r : reports)
    if (r.tuple_hash != reports.front().tuple_hash)
      throw ProtocolError("methods '" + reports.front().method + "' and '" + r.method +
                          "' were evaluated on different teacher tuples (hash " + reports.front().tuple_hash + " vs " +
                          r.tuple_hash + ")");
}

// ---------------------------------------------------------------- methods

MetricsReport evaluate_method(const std::string& method, const MethodFn& fn, const std::vector<TeacherTuple>& tuples,
                              const TeacherPool& pool, const Dataset& ds, const EvalSettings& settings) {
  if (tuples.empty()) throw ConfigError("evaluate_method: no tuples");
  std::vector<int> labels;
  for (int i : ds.test) labels.push_back(ds.labels[i]);
  MetricsReport r;
  r.method = method;
  r.dataset = ds.id;
  r.arch = pool.arch()->preset;
  r.topn = std::min(settings.topn, ds.num_classes);
  r.tuple_hash = tuple_hash(tuples);
  r.n_tuples = static_cast<int>(tuples.size());
  TeacherCache cache(pool);
  for (const auto& t : tuples) {
    const auto logits = fn(t, cache.get(t));
    if (logits.empty()) throw StructuralError("method " + method + " returned no predictions");
    Scores mean;
    for (const auto& l : logits) {
      const Scores s = score_logits(l, labels, r.topn, settings.bins);
      mean.acc1 += s.acc1 / static_cast<double>(logits.size());
      mean.accn += s.accn / static_cast<double>(logits.size());
      mean.ece += s.ece / static_cast<double>(logits.size());
    }
    r.per_tuple.push_back(mean);
  }
  auto fill = [&](double Scores::*field, double& m, double& two_sigma) {
    const auto v = column(r.per_tuple, field);
    const Spread s = mean_two_sigma(v);
    m = s.mean;
    two_sigma = s.two_sigma;
  };
  fill(&Scores::acc1, r.acc1, r.acc1_2s);
  fill(&Scores::accn, r.accn, r.accn_2s);
  fill(&Scores::ece, r.ece, r.ece_2s);
  validate(r);
  return r;
}

MethodFn single_method(const Dataset& ds) {
  return [&ds](const TeacherTuple&, const std::vector<WeightSet>& teachers) {
    std::vector<Tensor> out;
    for (const auto& t : teachers) out.push_back(predict_logits(t, ds, ds.test));
    return out;
  };
}

MethodFn ensemble_method(const Dataset& ds) {
  return [&ds](const TeacherTuple&, const std::vector<WeightSet>& teachers) {
    return std::vector<Tensor>{ensemble_logits(teachers, ds, ds.test)};
  };
}

MethodFn kd_method(KdCache& cache, const TeacherPool& pool, const Dataset& ds) {
  return [&cache, &pool, &ds](const TeacherTuple& ids, const std::vector<WeightSet>&) {
    return std::vector<Tensor>{predict_logits(cache.get(pool, ds, ids), ds, ds.test)};
  };
}

MethodFn generator_method(const WeightFormer& gen, const Dataset& ds) {
  return [&gen, &ds](const TeacherTuple&, const std::vector<WeightSet>& teachers) {
    return std::vector<Tensor>{predict_logits(generate_student(gen, teachers), ds, ds.test)};
  };
}

MethodFn mlp_method(const MlpPredictor& mlp, const Dataset& ds) {
  return [&mlp, &ds](const TeacherTuple&, const std::vector<WeightSet>& teachers) {
    return std::vector<Tensor>{predict_logits(mlp.generate(teachers), ds, ds.test)};
  };
}

MethodFn finetuned_method(const WeightFormer& gen, const TeacherPool& pool, const Dataset& ds, const TrainConfig& cfg) {
  return [&gen, &pool, &ds, cfg](const TeacherTuple& ids, const std::vector<WeightSet>& teachers) {
    WeightFormer tuned = gen;
    finetune_unseen(tuned, pool, ids, ds, cfg);
    return std::vector<Tensor>{predict_logits(generate_student(tuned, teachers), ds, ds.test)};
  };
}

// ---------------------------------------------------------------- ablation

std::string to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::no_cross_layer: return "-cross_layer";
    case Variant::no_shift_consistency: return "-shift_consistency";
    case Variant::no_weight_cutoff: return "-weight_cutoff";
  }
  return "?";
}

Variant variant_from_string(const std::string& s) {
  for (auto v : {Variant::full, Variant::no_cross_layer, Variant::no_shift_consistency, Variant::no_weight_cutoff})
    if (to_string(v) == s || to_string(v).substr(v == Variant::full ? 0 : 1) == s) return v;
  throw ConfigError("unknown ablation variant '" + s + "' (expected -cross_layer, -shift_consistency or -weight_cutoff)");
}

void apply_variant(Variant v, GeneratorConfig& gen, TrainConfig& train) {
  switch (v) {
    case Variant::full: break;
    case Variant::no_cross_layer: gen.cross_layer = false; break;
    case Variant::no_shift_consistency: train.loss.alpha = 0.0; break;
    case Variant::no_weight_cutoff: gen.cutoff_rate = 0.0; break;
  }
}

std::vector<AblationRow> run_ablation(std::vector<Variant> variants, const AblationSetup& setup, const TeacherPool& pool,
                                      const Dataset& ds, const std::vector<TeacherTuple>& tuples,
                                      const EvalSettings& settings) {
  variants.erase(std::remove(variants.begin(), variants.end(), Variant::full), variants.end());
  variants.insert(variants.begin(), Variant::full);
  const NormStats stats = pool_norm_stats(pool);
  std::vector<AblationRow> rows;
  for (Variant v : variants) {
    GeneratorConfig gc = setup.generator;
    TrainConfig tc = setup.train;
    apply_variant(v, gc, tc);
    WeightFormer gen(gc, pool.arch(), stats);
    RunOptions opt;
    if (!setup.out_dir.empty()) opt.out_dir = setup.out_dir / to_string(v);
    if (setup.pretrain) {
      KdCache kd(setup.kd_dir, tc.kd, tc.seed);
      RunOptions popt = opt;
      if (!popt.out_dir.empty()) popt.out_dir /= "pretrain";
      pretrain(gen, pool, ds, kd, tc, popt);
    }
    const RunResult run = train(gen, pool, ds, tc, opt);
    AblationRow row;
    row.variant = v;
    row.report = evaluate_method(to_string(v), generator_method(gen, ds), tuples, pool, ds, settings);
    row.steps = run.steps;
    row.stop_reason = run.stop_reason;
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "variant,acc1,acc1_2sigma,accn,ece,steps,stop_reason,tuple_hash\n";
  for (const auto& r : rows)
    out += to_string(r.variant) + "," + num(r.report.acc1) + "," + num(r.report.acc1_2s) + "," + num(r.report.accn) + "," +
           num(r.report.ece) + "," + std::to_string(r.steps) + "," + r.stop_reason + "," + r.report.tuple_hash + "\n";
  return out;
}

// ---------------------------------------------------------------- sweep

std::vector<SweepCell> teacher_count_sweep(const SweepSettings& s, const WeightFormer& gen, const TeacherPool& pool,
                                           const Dataset& ds) {
  if (s.m_values.empty() || s.modes.empty()) throw ConfigError("sweep needs at least one m value and one mode");
  std::vector<int> labels;
  for (int i : ds.test) labels.push_back(ds.labels[i]);
  const int topn = std::min(s.eval.topn, ds.num_classes);
  TeacherCache cache(pool);
  std::vector<SweepCell> cells;
  for (int m : s.m_values) {
    if (m < 1) throw ConfigError("sweep m values must be >= 1");
    const int k = static_cast<int>(pool.ids(s.split).size());
    if (m > k) throw ConfigError("sweep m=" + std::to_string(m) + " exceeds the " + to_string(s.split) + " split (" + std::to_string(k) + ")");
    const int count = static_cast<int>(std::min<double>(s.tuples_per_m, subset_count(k, m)));
    const auto tuples = sample_tuples(pool, m, count, stream_seed(s.seed, "sweep/m" + std::to_string(m)), s.split);
    for (ScaleMode mode : s.modes) {
      SweepCell cell;
      cell.m = m;
      cell.mode = mode;
      std::vector<Scores> scores;
      try {
        for (const auto& t : tuples) {
          const auto teachers = cache.get(t);
          if (m == 1) {
            scores.push_back(score_logits(predict_logits(teachers.front(), ds, ds.test), labels, topn, s.eval.bins));
            continue;
          }
          ScaleLog log;
          const WeightSet student = scale_teachers(teachers, mode, gen, &log);
          cell.generator_calls = log.generator_calls;
          scores.push_back(score_logits(predict_logits(student, ds, ds.test), labels, topn, s.eval.bins));
        }
      } catch (const CapacityError& e) {
        cell.skipped = true;
        cell.reason = e.what();
        cells.push_back(cell);
        continue;
      }
      const auto a1 = mean_two_sigma(column(scores, &Scores::acc1));
      cell.acc1 = a1.mean;
      cell.acc1_2s = a1.two_sigma;
      cell.accn = mean_two_sigma(column(scores, &Scores::accn)).mean;
      cell.ece = mean_two_sigma(column(scores, &Scores::ece)).mean;
      cells.push_back(cell);
    }
  }
  return cells;
}

std::string sweep_csv(const std::vector<SweepCell>& cells) {
  std::string out = "m,mode,acc1,acc1_2sigma,accn,ece,generator_calls\n";
  for (const auto& c : cells)
    if (!c.skipped)
      out += std::to_string(c.m) + "," + to_string(c.mode) + "," + num(c.acc1) + "," + num(c.acc1_2s) + "," + num(c.accn) +
             "," + num(c.ece) + "," + std::to_string(c.generator_calls) + "\n";
  return out;
}

std::string sweep_skipped_csv(const std::vector<SweepCell>& cells) {
  std::string out = "m,mode,reason\n";
  for (const auto& c : cells)
    if (c.skipped) {
      std::string reason = c.reason;
      std::replace(reason.begin(), reason.end(), ',', ';');
      std::replace(reason.begin(), reason.end(), '\n', ' ');
      out += std::to_string(c.m) + "," + to_string(c.mode) + "," + reason + "\n";
    }
  return out;
}

std::string sweep_svg(const std::vector<SweepCell>& cells) {
  std::vector<Series> series;
  for (const auto& c : cells) {
    if (c.skipped) continue;
    const std::string name = to_string(c.mode);
    auto it = std::find_if(series.begin(), series.end(), [&](const Series& s) { return s.name == name; });
    if (it == series.end()) {
      series.push_back({name, {}});
      it = series.end() - 1;
    }
    it->points.emplace_back(c.m, c.acc1);
  }
  return line_plot_svg("Teacher count sweep", "teachers (m)", "ACC-1 (%)", series);
}

// ---------------------------------------------------------------- grid

std::string report_markdown(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) throw ConfigError("no reports to render");
  check_same_tuples(reports);
  const auto& f = reports.front();
  std::string out = "Dataset `" + f.dataset + "`, architecture `" + f.arch + "`, " + std::to_string(f.n_tuples) +
                    " evaluation tuples (hash " + f.tuple_hash + "). Values are mean ± 2σ over tuples.\n\n";
  out += "| Method | ACC-1 | ACC-" + std::to_string(f.topn) + " | ECE |\n|---|---:|---:|---:|\n";
  for (const auto& r : reports)
    out += "| " + r.method + " | " + fixed(r.acc1) + " ± " + fixed(r.acc1_2s) + " | " + fixed(r.accn) + " ± " +
           fixed(r.accn_2s) + " | " + fixed(r.ece) + " ± " + fixed(r.ece_2s) + " |\n";
  return out;
}

}  // namespace mepl
