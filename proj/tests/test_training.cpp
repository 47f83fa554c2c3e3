#include "doctest.h"
#include "support.hpp"

#include "mepl/io.hpp"
#include "mepl/training.hpp"

using namespace mepl;
using namespace mepl::testing;

namespace {

GeneratorConfig tiny_generator() {
  GeneratorConfig cfg;
  cfg.d_model = 16;
  cfg.num_blocks = 1;
  cfg.num_heads = 2;
  cfg.ffn_dim = 32;
  cfg.n_teachers = 2;
  cfg.seed = 5;
  return cfg;
}

TrainConfig quick_train() {
  TrainConfig c;
  c.main_lr = 3e-4;
  c.reload_interval = 2;
  c.max_steps = 12;
  c.eval_interval = 4;
  c.batch_size = 16;
  c.val_tuples = 1;
  c.pretrain_lr = 1e-3;
  c.pretrain_max_steps = 8;
  c.pretrain_eval_interval = 2;
  c.pretrain_tuples = 2;
  c.kd.epochs = 3;
  c.seed = 17;
  return c;
}

WeightFormer make_gen() { return WeightFormer(tiny_generator(), small_pool().arch(), pool_norm_stats(small_pool())); }

KdCache& kd_cache() {
  static KdCache cache(scratch_dir("kd"), quick_train().kd, 99);
  return cache;
}

}  // namespace

TEST_CASE("learning-rate schedule") {
  TrainConfig c;
  c.main_lr = 1e-3;
  c.lr_decay = 0.5;
  c.decay_every_epochs = 3;
  CHECK(lr_at_epoch(c, 0) == 1e-3);
  CHECK(lr_at_epoch(c, 2) == 1e-3);
  CHECK(lr_at_epoch(c, 3) == 5e-4);
  CHECK(lr_at_epoch(c, 7) == 2.5e-4);
}

TEST_CASE("train config validation") {
  TrainConfig c;
  c.patience = 0;
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = {};
  c.main_lr = 0;
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = {};
  c.lr_decay = 1.5;
  CHECK_THROWS_AS(validate(c), ConfigError);
}

TEST_CASE("metrics log csv") {
  MetricsLog log;
  log.columns = {"step", "loss"};
  log.rows = {{0, 0.5}, {1, std::nan("")}};
  CHECK(log.to_csv() == "step,loss\n0,0.5\n1,\n");
}

TEST_CASE("optimizers") {
  ParamStore p, g;
  p.tensors["w"] = Tensor({2}, std::vector<double>{1.0, -1.0});
  g.tensors["w"] = Tensor({2}, std::vector<double>{0.5, -2.0});
  ParamStore sgd = p;
  SgdOptimizer{0.1}.step(sgd, g);
  CHECK(sgd.at("w")[0] == doctest::Approx(0.95));
  CHECK(sgd.at("w")[1] == doctest::Approx(-0.8));
  // First Adam step moves each coordinate by lr against the gradient sign.
  AdamOptimizer adam;
  ParamStore a = p;
  adam.step(a, g, 0.01);
  CHECK(a.at("w")[0] == doctest::Approx(0.99).epsilon(1e-6));
  CHECK(a.at("w")[1] == doctest::Approx(-0.99).epsilon(1e-6));
  CHECK(adam.step_count == 1);
}

TEST_CASE("run state round trip") {
  RunState s;
  s.stage = "train";
  s.step = 42;
  s.ids = {"t01", "t03"};
  s.best_val = 91.5;
  s.evals_since_improvement = 2;
  s.lr_scale = 0.5;
  s.nan_restarts = 1;
  s.adam.step_count = 42;
  s.adam.m.tensors["x"] = Tensor({2}, 0.25);
  s.adam.v.tensors["x"] = Tensor({2}, 0.125);
  s.params.tensors["x"] = Tensor({2}, 3.0);
  s.best_params.tensors["x"] = Tensor({2}, 2.0);
  Rng r(1);
  r.normal();
  s.rng["sampler"] = r.state();
  s.order = {3, 1, 2};
  s.pos = 2;
  s.history = {1.0, 0.5};
  s.log.columns = {"step", "val"};
  s.log.rows = {{0, std::nan("")}, {1, 2.5}};
  const auto path = scratch_dir("state") / "s.mtc";
  save_run_state(path, s);
  const RunState b = load_run_state(path);
  CHECK(b.stage == s.stage);
  CHECK(b.step == s.step);
  CHECK(b.ids == s.ids);
  CHECK(b.best_val == s.best_val);
  CHECK(b.evals_since_improvement == 2);
  CHECK(b.lr_scale == 0.5);
  CHECK(b.nan_restarts == 1);
  CHECK(b.adam.step_count == 42);
  CHECK(b.adam.m.tensors == s.adam.m.tensors);
  CHECK(b.adam.v.tensors == s.adam.v.tensors);
  CHECK(b.params.tensors == s.params.tensors);
  CHECK(b.best_params.tensors == s.best_params.tensors);
  CHECK(b.rng == s.rng);
  CHECK(b.order == s.order);
  CHECK(b.pos == 2);
  CHECK(b.history == s.history);
  CHECK(b.log.to_csv() == s.log.to_csv());
}

TEST_CASE("kd cache keys and reuse") {
  CHECK(KdCache::key({"b", "a", "c"}) == "a-b-c");
  KdCache& kd = kd_cache();
  const auto ids = small_pool().ids(Split::train);
  const int before = kd.trained();
  const WeightSet a = kd.get(small_pool(), small_digits(), {ids[1], ids[0]});
  const WeightSet b = kd.get(small_pool(), small_digits(), {ids[0], ids[1]});
  CHECK(kd.trained() - before <= 1);
  CHECK(a.tensors == b.tensors);
}

TEST_CASE("pretraining") {
  const TeacherPool& pool = small_pool();
  const Dataset& ds = small_digits();

  SUBCASE("zero steps leave the generator unchanged") {
    WeightFormer gen = make_gen();
    const ParamStore before = gen.params();
    TrainConfig c = quick_train();
    c.pretrain_max_steps = 0;
    const RunResult r = pretrain(gen, pool, ds, kd_cache(), c);
    CHECK(r.steps == 0);
    CHECK(gen.params().tensors == before.tensors);
  }

  SUBCASE("matching loss does not rise between evaluations on one tuple") {
    WeightFormer gen = make_gen();
    TrainConfig c = quick_train();
    c.pretrain_tuples = 1;
    c.pretrain_max_steps = 20;
    c.pretrain_eval_interval = 5;
    c.plateau_tol = 0;
    const RunResult r = pretrain(gen, pool, ds, kd_cache(), c);
    REQUIRE(r.state.history.size() >= 3);
    for (std::size_t i = 1; i < r.state.history.size(); ++i) CHECK(r.state.history[i] <= r.state.history[i - 1]);
  }

  SUBCASE("halt and resume reproduce the uninterrupted run") {
    const TrainConfig c = quick_train();
    WeightFormer full = make_gen();
    const RunResult whole = pretrain(full, pool, ds, kd_cache(), c);

    WeightFormer part = make_gen();
    RunOptions halt;
    halt.halt_at_step = 3;
    const RunResult first = pretrain(part, pool, ds, kd_cache(), c, halt);
    CHECK(first.stop_reason == "halted");
    const auto path = scratch_dir("pretrain_resume") / "state.mtc";
    save_run_state(path, first.state);
    const RunState loaded = load_run_state(path);
    WeightFormer resumed = make_gen();
    RunOptions cont;
    cont.resume = &loaded;
    const RunResult second = pretrain(resumed, pool, ds, kd_cache(), c, cont);
    CHECK(second.state.log.to_csv() == whole.state.log.to_csv());
    CHECK(resumed.params().tensors == full.params().tensors);
  }
}

TEST_CASE("main training") {
  const TeacherPool& pool = small_pool();
  const Dataset& ds = small_digits();
  const TrainConfig c = quick_train();

  SUBCASE("fixed seed gives a bit-identical log and writes outputs") {
    WeightFormer a = make_gen(), b = make_gen();
    RunOptions o;
    o.out_dir = scratch_dir("train_a");
    const RunResult ra = train(a, pool, ds, c, o);
    const RunResult rb = train(b, pool, ds, c);
    CHECK(ra.state.log.to_csv() == rb.state.log.to_csv());
    CHECK(read_text(o.out_dir / "train_log.csv") == ra.state.log.to_csv());
    for (const char* f : {"best.gen", "last.gen", "run_state.mtc"}) CHECK(std::filesystem::exists(o.out_dir / f));
    CHECK(ra.stop_reason == "max_steps");
    CHECK(WeightFormer::load(o.out_dir / "best.gen").params().tensors == a.params().tensors);
  }

  SUBCASE("training never reads eval checkpoints") {
    pool.lift_restriction();
    pool.clear_access_log();
    WeightFormer g = make_gen();
    train(g, pool, ds, c);
    for (const auto& rec : pool.access_log()) CHECK(rec.split == Split::train);
  }

  SUBCASE("no consistency weight and no cutoff log a zero consistency term") {
    GeneratorConfig gc = tiny_generator();
    gc.cutoff_rate = 0;
    WeightFormer g(gc, pool.arch(), pool_norm_stats(pool));
    TrainConfig z = c;
    z.loss.alpha = 0;
    const RunResult r = train(g, pool, ds, z);
    int rows = 0;
    for (const auto& row : r.state.log.rows)
      if (!std::isnan(row[4])) {
        CHECK(row[4] == 0.0);
        CHECK(row[5] == row[3]);
        ++rows;
      }
    CHECK(rows == c.max_steps);
  }

  SUBCASE("halt and resume reproduce the uninterrupted run") {
    WeightFormer full = make_gen();
    const RunResult whole = train(full, pool, ds, c);
    WeightFormer part = make_gen();
    RunOptions halt;
    halt.halt_at_step = 5;
    const RunResult first = train(part, pool, ds, c, halt);
    CHECK(first.steps == 5);
    const auto path = scratch_dir("train_resume") / "state.mtc";
    save_run_state(path, first.state);
    const RunState loaded = load_run_state(path);
    WeightFormer resumed = make_gen();
    RunOptions cont;
    cont.resume = &loaded;
    const RunResult second = train(resumed, pool, ds, c, cont);
    CHECK(second.state.log.to_csv() == whole.state.log.to_csv());
    CHECK(resumed.params().tensors == full.params().tensors);
  }

  SUBCASE("patience stops the run") {
    WeightFormer g = make_gen();
    TrainConfig p = c;
    p.main_lr = 1e-12;
    p.max_steps = 200;
    p.eval_interval = 2;
    p.patience = 2;
    const RunResult r = train(g, pool, ds, p);
    CHECK(r.stop_reason == "patience");
    CHECK(r.steps < 200);
  }
}

TEST_CASE("fine-tuning on an unseen tuple") {
  const TeacherPool& pool = small_pool();
  const Dataset& ds = small_digits();
  const auto unseen = pool.ids(Split::eval);

  SUBCASE("zero steps equals one-shot generation") {
    WeightFormer gen = make_gen();
    pool.lift_restriction();
    const WeightSet before = generate_student(gen, pool.load(unseen));
    TrainConfig c = quick_train();
    c.max_steps = 0;
    finetune_unseen(gen, pool, unseen, ds, c);
    pool.lift_restriction();
    CHECK(generate_student(gen, pool.load(unseen)).tensors == before.tensors);
  }

  SUBCASE("reads only its own eval checkpoints and never loses validation accuracy") {
    WeightFormer gen = make_gen();
    pool.lift_restriction();
    const double before = accuracy(generate_student(gen, pool.load(unseen)), ds, ds.val);
    pool.clear_access_log();
    const RunResult r = finetune_unseen(gen, pool, unseen, ds, quick_train());
    for (const auto& rec : pool.access_log())
      if (rec.split == Split::eval) CHECK((rec.id == unseen[0] || rec.id == unseen[1]));
    CHECK(r.best_val >= before);
  }

  SUBCASE("train-split teachers are refused") {
    WeightFormer gen = make_gen();
    const auto train_ids = pool.ids(Split::train);
    CHECK_THROWS_AS(finetune_unseen(gen, pool, {train_ids[0], train_ids[1]}, ds, quick_train()), ConfigError);
    CHECK_THROWS_AS(finetune_unseen(gen, pool, {unseen[0]}, ds, quick_train()), ConfigError);
  }
}
