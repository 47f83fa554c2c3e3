#include "doctest.h"
#include "support.hpp"

#include "mepl/baselines.hpp"

using namespace mepl;
using namespace mepl::testing;

namespace {

std::shared_ptr<const ArchSpec> cnn_arch() {
  static auto arch = std::make_shared<const ArchSpec>(build_arch("cnn_tiny", 10, {1, 8, 8}));
  return arch;
}

std::vector<WeightSet> random_teachers(int n, std::uint64_t seed) {
  std::vector<WeightSet> out;
  for (int i = 0; i < n; ++i) {
    Rng rng(seed + i);
    out.push_back(init_weights(cnn_arch(), rng));
  }
  return out;
}

WeightFormer pair_generator(const std::vector<WeightSet>& stats_from, int max_teachers = 8) {
  GeneratorConfig cfg;
  cfg.d_model = 16;
  cfg.num_blocks = 1;
  cfg.num_heads = 2;
  cfg.ffn_dim = 16;
  cfg.n_teachers = 2;
  cfg.max_teachers = max_teachers;
  cfg.max_seq_len = 1 + 5 * 32;
  return WeightFormer(cfg, cnn_arch(), fit_norm_stats(stats_from));
}

}  // namespace

TEST_CASE("logit averaging") {
  const Dataset& ds = small_digits();
  const std::vector<int> idx(ds.test.begin(), ds.test.begin() + 9);
  const Batch b = make_batch(ds, idx);
  const auto t = random_teachers(3, 1);
  CHECK(ensemble_predict({t[0]}, b) == forward_logits(*cnn_arch(), t[0], b));
  const Tensor same = ensemble_predict({t[1], t[1], t[1]}, b);
  const Tensor one = forward_logits(*cnn_arch(), t[1], b);
  for (std::size_t i = 0; i < one.size(); ++i) CHECK(same[i] == doctest::Approx(one[i]).epsilon(1e-12));

  const Tensor mean = ensemble_predict(t, b);
  std::vector<Tensor> each;
  for (const auto& w : t) each.push_back(forward_logits(*cnn_arch(), w, b));
  for (std::size_t i = 0; i < mean.size(); ++i)
    CHECK(std::abs(mean[i] - (each[0][i] + each[1][i] + each[2][i]) / 3.0) <= 1e-12);

  // Teacher order does not matter beyond rounding.
  const Tensor perm = ensemble_predict({t[2], t[0], t[1]}, b);
  for (std::size_t i = 0; i < mean.size(); ++i) CHECK(std::abs(mean[i] - perm[i]) <= 1e-12);
}

TEST_CASE("knowledge distillation student") {
  const TeacherPool& pool = small_pool();
  const Dataset& ds = small_digits();
  const auto ids = pool.ids(Split::train);
  const WeightSet teacher = pool.load(ids[0]);

  FitConfig kd;
  kd.epochs = 0;
  const WeightSet untrained = train_kd_student({teacher}, ds, kd, pool.manifest(ids[0]).init_seed + 1, 3);
  CHECK(accuracy(untrained, ds, ds.test) < 30.0);

  // Copies of a converged teacher, on the full digits set.
  const Dataset full = load_dataset("digits");
  Rng init_rng(41);
  FitConfig sup;
  sup.epochs = 15;
  Rng fit_rng(42);
  const WeightSet converged = fit_classifier(init_weights(cnn_arch(), init_rng), full, sup, fit_rng).weights;
  const double converged_acc = accuracy(converged, full, full.test);
  kd.epochs = 15;
  double val = 0;
  const WeightSet copy = train_kd_student({converged, converged, converged}, full, kd, 43, 44, &val);
  CHECK_NOTHROW(validate_weights(*cnn_arch(), copy));
  const double copy_acc = accuracy(copy, full, full.test);
  CHECK(std::abs(copy_acc - converged_acc) <= 2.0);
  CHECK(val > 50.0);
}

TEST_CASE("per-layer MLP predictor") {
  const auto t = random_teachers(3, 20);
  MLPPredictorConfig cfg;
  cfg.n_teachers = 3;
  const MlpPredictor mlp(cfg, cnn_arch(), fit_norm_stats(t));
  const WeightSet out = mlp.generate(t);
  CHECK_NOTHROW(validate_weights(*cnn_arch(), out));
  CHECK(mlp.generate(t).tensors == out.tensors);
  CHECK_THROWS_AS(mlp.generate({t[0], t[1]}), ConfigError);

  SUBCASE("save/load") {
    const auto path = scratch_dir("mlp") / "m.mtc";
    mlp.save(path);
    const MlpPredictor back = MlpPredictor::load(path);
    CHECK(back.generate(t).tensors == out.tensors);
  }

  SUBCASE("parameter count exceeds the generator's for deep students") {
    CHECK(cnn_arch()->layers.size() >= 4);
    GeneratorConfig gc;  // default generator size
    gc.n_teachers = 3;
    const WeightFormer gen(gc, cnn_arch(), fit_norm_stats(t));
    CHECK(mlp.parameter_count() > gen.parameter_count());
  }
}

TEST_CASE("teacher-count scaling") {
  const auto t = random_teachers(4, 30);
  const WeightFormer gen = pair_generator(t);

  SUBCASE("two teachers: both modes equal plain generation") {
    ScaleLog hl, cl;
    const WeightSet direct = generate_student(gen, {t[0], t[1]});
    CHECK(scale_teachers({t[0], t[1]}, ScaleMode::heuristic, gen, &hl).tensors == direct.tensors);
    CHECK(scale_teachers({t[0], t[1]}, ScaleMode::concatenate, gen, &cl).tensors == direct.tensors);
    CHECK(hl.generator_calls == 1);
    CHECK(cl.generator_calls == 1);
  }

  SUBCASE("heuristic folds left") {
    ScaleLog log;
    const WeightSet three = scale_teachers({t[0], t[1], t[2]}, ScaleMode::heuristic, gen, &log);
    CHECK(log.generator_calls == 2);
    CHECK(log.steps == std::vector<std::string>{"t0+t1", "g1+t2"});
    const WeightSet g1 = generate_student(gen, {t[0], t[1]});
    CHECK(three.tensors == generate_student(gen, {g1, t[2]}).tensors);
  }

  SUBCASE("concatenation past capacity") {
    const WeightFormer small = pair_generator(t, 3);
    CHECK_THROWS_AS(scale_teachers(t, ScaleMode::concatenate, small), CapacityError);
    CHECK_NOTHROW(scale_teachers(t, ScaleMode::heuristic, small));
  }

  CHECK(scale_mode_from_string(to_string(ScaleMode::concatenate)) == ScaleMode::concatenate);
  CHECK_THROWS_AS(scale_mode_from_string("pairwise"), ConfigError);
}
