#include "doctest.h"
#include "support.hpp"

#include <set>

#include "mepl/config.hpp"
#include "mepl/eval.hpp"
#include "mepl/plot.hpp"

using namespace mepl;
using namespace mepl::testing;

namespace {

WeightFormer pair_generator(const TeacherPool& pool) {
  GeneratorConfig cfg;
  cfg.d_model = 16;
  cfg.num_blocks = 1;
  cfg.num_heads = 2;
  cfg.ffn_dim = 16;
  cfg.n_teachers = 2;
  cfg.max_seq_len = 1 + 3 * 32;
  return WeightFormer(cfg, pool.arch(), pool_norm_stats(pool));
}

}  // namespace

TEST_CASE("shared evaluation tuples") {
  const TeacherPool& pool = small_pool();
  const auto a = sample_tuples(pool, 2, 1, 5);
  CHECK(a == sample_tuples(pool, 2, 1, 5));
  CHECK(a.front().size() == 2);
  for (const auto& id : a.front()) CHECK(pool.manifest(id).split == Split::eval);
  CHECK_THROWS_AS(sample_tuples(pool, 2, 2, 5), ConfigError);
  const auto train = sample_tuples(pool, 2, 6, 5, Split::train);
  std::set<std::vector<std::string>> distinct;
  for (auto t : train) {
    std::sort(t.begin(), t.end());
    distinct.insert(t);
  }
  CHECK(distinct.size() == 6);
  CHECK(tuple_hash(a) != tuple_hash(train));
}

TEST_CASE("method reports") {
  const TeacherPool& pool = small_pool();
  const Dataset& ds = small_digits();
  pool.lift_restriction();
  const auto eval = pool.ids(Split::eval);
  const std::vector<TeacherTuple> one{{eval[0], eval[1]}};

  SUBCASE("deterministic method on one tuple has zero spread") {
    const MetricsReport r = evaluate_method("ensemble", ensemble_method(ds), one, pool, ds);
    CHECK(r.acc1_2s == 0.0);
    CHECK(r.ece_2s == 0.0);
    CHECK(r.n_tuples == 1);
    CHECK(r.acc1 <= r.accn);
  }

  SUBCASE("ensemble of copies equals the single model") {
    const std::vector<TeacherTuple> copies{{eval[0], eval[0], eval[0]}};
    const MetricsReport e = evaluate_method("ensemble", ensemble_method(ds), copies, pool, ds);
    const MetricsReport s = evaluate_method("single", single_method(ds), copies, pool, ds);
    CHECK(e.acc1 == doctest::Approx(s.acc1).epsilon(1e-12));
    CHECK(e.accn == doctest::Approx(s.accn).epsilon(1e-12));
    CHECK(e.ece == doctest::Approx(s.ece).epsilon(1e-9));
  }

  SUBCASE("single baseline averages the per-teacher scores") {
    const MetricsReport s = evaluate_method("single", single_method(ds), one, pool, ds);
    const double a0 = accuracy(pool.load(eval[0]), ds, ds.test), a1 = accuracy(pool.load(eval[1]), ds, ds.test);
    CHECK(s.acc1 == doctest::Approx((a0 + a1) / 2).epsilon(1e-12));
  }

  SUBCASE("json round trip and tuple checks") {
    MetricsReport r = evaluate_method("ensemble", ensemble_method(ds), one, pool, ds);
    r.config_hash = "abc";
    r.seeds["eval"] = 7;
    const MetricsReport back = report_from_json(report_to_json(r));
    CHECK(report_to_json(back) == report_to_json(r));
    MetricsReport other = r;
    other.method = "kd";
    CHECK_NOTHROW(check_same_tuples({r, other}));
    other.tuple_hash = "different";
    CHECK_THROWS_AS(check_same_tuples({r, other}), ProtocolError);
    CHECK_THROWS_AS(report_markdown({r, other}), ProtocolError);
    const std::string md = report_markdown({r});
    CHECK(md.find("ensemble") != std::string::npos);
    const std::string csv = reports_to_csv({r, r});
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
  }

  SUBCASE("malformed reports are rejected") {
    MetricsReport r;
    r.acc1 = 60;
    r.accn = 50;
    CHECK_THROWS_AS(validate(r), StructuralError);
    CHECK_THROWS_AS(report_from_json("{}"), ConfigError);
  }
}

TEST_CASE("ablation variants") {
  GeneratorConfig g;
  TrainConfig t;
  apply_variant(Variant::no_cross_layer, g, t);
  CHECK_FALSE(g.cross_layer);
  apply_variant(Variant::no_shift_consistency, g, t);
  CHECK(t.loss.alpha == 0.0);
  apply_variant(Variant::no_weight_cutoff, g, t);
  CHECK(g.cutoff_rate == 0.0);
  for (Variant v : {Variant::full, Variant::no_cross_layer, Variant::no_shift_consistency, Variant::no_weight_cutoff})
    CHECK(variant_from_string(to_string(v)) == v);
  CHECK_THROWS_AS(variant_from_string("-everything"), ConfigError);

  // Variant flags survive the config serializer.
  ExperimentConfig c = default_config();
  apply_variant(Variant::no_cross_layer, c.generator, c.train);
  apply_variant(Variant::no_weight_cutoff, c.generator, c.train);
  apply_variant(Variant::no_shift_consistency, c.generator, c.train);
  CHECK(config_from_json(config_to_json(c)) == c);
}

TEST_CASE("ablation run keeps the full model first on shared tuples") {
  const TeacherPool& pool = small_pool();
  const Dataset& ds = small_digits();
  AblationSetup setup;
  setup.generator = pair_generator(pool).config();
  setup.train.max_steps = 3;
  setup.train.eval_interval = 3;
  setup.train.batch_size = 16;
  setup.train.val_tuples = 1;
  setup.pretrain = false;
  const auto eval = pool.ids(Split::eval);
  const auto rows = run_ablation({Variant::no_weight_cutoff, Variant::full}, setup, pool, ds, {{eval[0], eval[1]}});
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].variant == Variant::full);
  CHECK(rows[1].variant == Variant::no_weight_cutoff);
  CHECK(rows[0].report.tuple_hash == rows[1].report.tuple_hash);
  const std::string csv = ablation_csv(rows);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
}

TEST_CASE("teacher-count sweep") {
  const TeacherPool& pool = small_pool();
  const Dataset& ds = small_digits();
  const WeightFormer gen = pair_generator(pool);
  SweepSettings s;
  s.m_values = {1, 2, 3};
  s.split = Split::train;
  s.tuples_per_m = 2;
  s.seed = 3;
  const auto cells = teacher_count_sweep(s, gen, pool, ds);
  REQUIRE(cells.size() == 6);

  // m = 1 is the single-model baseline.
  const auto singles = sample_tuples(pool, 1, 2, stream_seed(3, "sweep/m1"), Split::train);
  pool.lift_restriction();
  double acc = 0;
  for (const auto& t : singles) acc += accuracy(pool.load(t[0]), ds, ds.test) / 2;
  CHECK(cells[0].acc1 == doctest::Approx(acc).epsilon(1e-12));
  CHECK(cells[1].acc1 == cells[0].acc1);

  // Concatenating three 32-row layers needs 97 rows; the generator has 97, so nothing is skipped here.
  int skipped = 0;
  for (const auto& c : cells) skipped += c.skipped;
  CHECK(skipped == 0);
  CHECK(cells[4].generator_calls == 2);  // heuristic, m = 3
  CHECK(cells[5].generator_calls == 1);  // concatenate, m = 3

  SUBCASE("capacity skips and file outputs") {
    s.m_values = {1, 2, 3, 4};
    const auto more = teacher_count_sweep(s, gen, pool, ds);
    int n_skipped = 0;
    for (const auto& c : more) n_skipped += c.skipped;
    CHECK(n_skipped == 1);
    CHECK(more.back().skipped);
    CHECK(more.back().reason.find("max_seq_len") != std::string::npos);

    const std::string csv = sweep_csv(more);
    CHECK(static_cast<int>(std::count(csv.begin(), csv.end(), '\n')) - 1 == 4 * 2 - n_skipped);
    const std::string skipped_csv = sweep_skipped_csv(more);
    CHECK(std::count(skipped_csv.begin(), skipped_csv.end(), '\n') == 2);

    // Plotted markers carry the CSV values exactly.
    const auto series = parse_plot_svg(sweep_svg(more));
    std::size_t points = 0;
    for (const auto& sr : series) {
      points += sr.points.size();
      const ScaleMode mode = scale_mode_from_string(sr.name);
      for (const auto& [x, y] : sr.points) {
        bool found = false;
        for (const auto& c : more)
          if (!c.skipped && c.mode == mode && c.m == static_cast<int>(x)) found = c.acc1 == y;
        CHECK(found);
      }
    }
    CHECK(points == static_cast<std::size_t>(4 * 2 - n_skipped));
  }
}

TEST_CASE("plot parse-back") {
  const std::vector<Series> in{{"a", {{0, 1.5}, {1, 0.1 + 0.2}, {2, -3e-9}}}, {"b & c", {{10, 1e6}}}};
  const std::string svg = line_plot_svg("title <x>", "x", "y", in);
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(parse_plot_svg(svg) == in);
}
