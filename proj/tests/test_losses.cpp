#include "doctest.h"
#include "support.hpp"

#include "mepl/losses.hpp"

using namespace mepl;
using namespace mepl::testing;

namespace {

std::vector<double> softmax_row(const Tensor& t, int r, double temp) {
  std::vector<double> p(t.dim(1));
  double mx = -1e300, z = 0;
  for (int c = 0; c < t.dim(1); ++c) mx = std::max(mx, t.at(r, c) / temp);
  for (int c = 0; c < t.dim(1); ++c) z += p[c] = std::exp(t.at(r, c) / temp - mx);
  for (auto& v : p) v /= z;
  return p;
}

std::shared_ptr<const ArchSpec> cnn_arch() {
  static auto arch = std::make_shared<const ArchSpec>(build_arch("cnn_tiny", 10, {1, 8, 8}));
  return arch;
}

WeightFormer small_generator(const std::vector<WeightSet>& teachers, double cutoff, bool tied) {
  GeneratorConfig cfg;
  cfg.d_model = 16;
  cfg.num_blocks = 1;
  cfg.num_heads = 2;
  cfg.ffn_dim = 16;
  cfg.n_teachers = static_cast<int>(teachers.size());
  cfg.cutoff_rate = cutoff;
  cfg.tie_model_ids = tied;
  return WeightFormer(cfg, cnn_arch(), fit_norm_stats(teachers));
}

}  // namespace

TEST_CASE("distillation loss") {
  Rng rng(3);
  const Tensor s = random_tensor({4, 5}, rng);
  CHECK(kd_loss(s, {s, s}, 2.0) == doctest::Approx(0.0).epsilon(1e-15));

  const Tensor t1({1, 2}, std::vector<double>{std::log(0.8), std::log(0.2)});
  const Tensor t2({1, 2}, std::vector<double>{std::log(0.2), std::log(0.8)});
  CHECK(std::abs(kd_loss(Tensor({1, 2}), {t1, t2}, 1.0)) < 1e-15);

  const Tensor student = random_tensor({6, 4}, rng);
  const std::vector<Tensor> teachers{random_tensor({6, 4}, rng), random_tensor({6, 4}, rng), random_tensor({6, 4}, rng)};
  for (double temp : {1.0, 2.0, 4.0}) {
    double sf = 0, tf = 0;
    for (int r = 0; r < 6; ++r) {
      const auto ps = softmax_row(student, r, temp);
      std::vector<double> pt(4, 0.0);
      for (const auto& t : teachers) {
        const auto p = softmax_row(t, r, temp);
        for (int c = 0; c < 4; ++c) pt[c] += p[c] / 3.0;
      }
      for (int c = 0; c < 4; ++c) {
        sf += ps[c] * std::log(ps[c] / pt[c]);
        tf += pt[c] * std::log(pt[c] / ps[c]);
      }
    }
    sf *= temp * temp / 6.0;
    tf *= temp * temp / 6.0;
    CHECK(kd_loss(student, teachers, temp, KlDirection::student_first) == doctest::Approx(sf).epsilon(1e-10));
    CHECK(kd_loss(student, teachers, temp, KlDirection::teacher_first) == doctest::Approx(tf).epsilon(1e-10));
  }
}

TEST_CASE("cross-entropy") {
  const std::vector<int> labels{2, 0};
  Tensor confident({2, 3});
  confident.at(0, 2) = 60.0;
  confident.at(1, 0) = 60.0;
  CHECK(ce_loss(confident, labels) < 1e-20);
  CHECK(ce_loss(Tensor({2, 3}), labels) == doctest::Approx(std::log(3.0)).epsilon(1e-14));

  Rng rng(5);
  const Tensor logits = random_tensor({5, 7}, rng, 3.0);
  const std::vector<int> y{0, 6, 3, 3, 1};
  double expect = 0;
  for (int r = 0; r < 5; ++r) expect -= std::log(softmax_row(logits, r, 1.0)[y[r]]);
  CHECK(ce_loss(logits, y) == doctest::Approx(expect / 5).epsilon(1e-10));
}

TEST_CASE("weight matching loss") {
  Rng rng(2);
  const WeightSet a = init_weights(cnn_arch(), rng);
  CHECK(l2_match_loss(a, a) == 0.0);
  WeightSet shifted = a;
  for (auto& [k, t] : shifted.tensors)
    for (auto& v : t.vec()) v += 0.3;
  CHECK(l2_match_loss(a, shifted) == doctest::Approx(0.09).epsilon(1e-12));
  const WeightSet b = init_weights(cnn_arch(), rng);
  double sq = 0;
  std::size_t n = 0;
  for (const auto& [k, t] : a.tensors)
    for (std::size_t i = 0; i < t.size(); ++i, ++n) sq += (t[i] - b.tensors.at(k)[i]) * (t[i] - b.tensors.at(k)[i]);
  CHECK(l2_match_loss(a, b) == doctest::Approx(sq / n).epsilon(1e-12));
}

TEST_CASE("weight mse over flattened sets") {
  Rng rng(6);
  const WeightSet a = init_weights(cnn_arch(), rng), b = init_weights(cnn_arch(), rng);
  ad::Graph<double> g;
  const auto va = bind_weights(g, a, false), vb = bind_weights(g, b, false);
  double sq = 0;
  std::size_t n = 0;
  for (const auto& [k, t] : a.tensors)
    for (std::size_t i = 0; i < t.size(); ++i, ++n) sq += (t[i] - b.tensors.at(k)[i]) * (t[i] - b.tensors.at(k)[i]);
  CHECK(g.value(weight_mse(va, vb, ConsistencyReduction::mean))[0] == doctest::Approx(sq / n).epsilon(1e-10));
  CHECK(g.value(weight_mse(va, vb, ConsistencyReduction::sum))[0] == doctest::Approx(sq).epsilon(1e-10));
}

TEST_CASE("shift consistency") {
  Rng rng(9);
  const WeightSet t0 = init_weights(cnn_arch(), rng);
  const std::vector<WeightSet> same(3, t0);

  SUBCASE("identical teachers, tied ids, no cutoff -> exactly zero") {
    const WeightFormer gen = small_generator(same, 0.0, true);
    Rng a(1), b(2);
    CHECK(shift_consistency(gen, same, {}, a, b) == 0.0);
  }

  SUBCASE("matches recomputation from two explicit passes") {
    std::vector<WeightSet> teachers{t0, init_weights(cnn_arch(), rng), init_weights(cnn_arch(), rng)};
    const WeightFormer gen = small_generator(teachers, 0.25, false);
    Rng a(1), b(2);
    const double value = shift_consistency(gen, teachers, {}, a, b);

    const auto prep = prepare_teachers(gen, teachers);
    ad::Graph<double> g;
    const auto p = bind_params<double>(g, gen.params(), false);
    Rng a2(1), b2(2);
    const auto w1 = to_weight_set(g, generate_student(g, gen, p, prep, {Mode::train, &a2}), cnn_arch());
    const auto w2 = to_weight_set(g, generate_student(g, gen, p, prep.rotated(), {Mode::train, &b2}), cnn_arch());
    double sq = 0;
    std::size_t n = 0;
    for (const auto& [k, t] : w1.tensors)
      for (std::size_t i = 0; i < t.size(); ++i, ++n) sq += (t[i] - w2.tensors.at(k)[i]) * (t[i] - w2.tensors.at(k)[i]);
    CHECK(value == doctest::Approx(sq / n).epsilon(1e-10));
    CHECK(value > 0.0);
  }
}

TEST_CASE("combined loss") {
  Rng rng(12);
  std::vector<WeightSet> teachers{init_weights(cnn_arch(), rng), init_weights(cnn_arch(), rng)};
  const Dataset& ds = small_digits();
  const std::vector<int> idx(ds.train.begin(), ds.train.begin() + 8);
  const Batch batch = make_batch(ds, idx);

  auto eval = [&](const WeightFormer& gen, const std::vector<WeightSet>& ts, LossConfig cfg) {
    const auto prep = prepare_teachers(gen, ts);
    ad::Graph<double> g;
    const auto p = bind_params<double>(g, gen.params(), false);
    Rng a(1), b(2);
    const auto terms = combined_loss(g, gen, p, prep, batch, cfg, a, b);
    const double student_ce = ce_loss(forward_logits(gen.arch(), to_weight_set(g, terms.student, gen.arch_ptr()), batch, true),
                                      batch.labels);
    return std::tuple{g.value(terms.total)[0], g.value(terms.ce)[0], g.value(terms.consist)[0], student_ce};
  };

  const WeightFormer gen = small_generator(teachers, 0.1, false);
  LossConfig cfg;
  cfg.alpha = 0.7;
  const auto [total, ce, consist, student_ce] = eval(gen, teachers, cfg);
  CHECK(total == doctest::Approx(ce + 0.7 * consist).epsilon(1e-12));
  CHECK(ce == doctest::Approx(student_ce).epsilon(1e-10));

  cfg.alpha = 0.0;
  const auto [t0, ce0, c0, s0] = eval(gen, teachers, cfg);
  CHECK(t0 == ce0);
  CHECK(ce0 == doctest::Approx(s0).epsilon(1e-10));

  const std::vector<WeightSet> same(2, teachers[0]);
  const WeightFormer tied = small_generator(same, 0.0, true);
  cfg.alpha = 1.0;
  const auto [t1, ce1, c1, s1] = eval(tied, same, cfg);
  CHECK(c1 == 0.0);
  CHECK(t1 == ce1);
}

TEST_CASE("loss config validation") {
  LossConfig c;
  c.alpha = -1;
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = {};
  c.kd_temperature = 0;
  CHECK_THROWS_AS(validate(c), ConfigError);
}
