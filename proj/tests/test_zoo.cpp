#include "doctest.h"
#include "support.hpp"

#include <map>
#include <set>

#include "mepl/fit.hpp"
#include "mepl/io.hpp"
#include "mepl/zoo.hpp"

using namespace mepl;
using namespace mepl::testing;

namespace {

TeacherPool fake_pool(int n_train, int n_eval) {
  auto arch = std::make_shared<const ArchSpec>(build_arch("mlp_tiny", 10, {1, 8, 8}));
  std::vector<CheckpointManifest> ms;
  for (int i = 0; i < n_train + n_eval; ++i) {
    CheckpointManifest m;
    m.id = "m" + std::to_string(i);
    m.dataset = "digits";
    m.arch_fingerprint = arch_fingerprint(*arch);
    m.path = m.id + ".mtc";
    m.split = i < n_train ? Split::train : Split::eval;
    ms.push_back(m);
  }
  return TeacherPool(scratch_dir("fake_pool"), "digits", arch, ms);
}

}  // namespace

TEST_CASE("split ratios") {
  CHECK(parse_split("10:2", 12) == std::pair{10, 2});
  CHECK(parse_split("5:1", 30) == std::pair{25, 5});
  CHECK_THROWS_AS(parse_split("1:0", 12), ConfigError);
  CHECK_THROWS_AS(parse_split("ten", 12), ConfigError);
}

TEST_CASE("pool build, manifests and re-evaluation") {
  const TeacherPool& pool = small_pool();
  CHECK(pool.ids(Split::train).size() == 4);
  CHECK(pool.ids(Split::eval).size() == 2);
  std::set<std::string> prints;
  for (const auto& m : pool.manifests()) prints.insert(m.arch_fingerprint);
  CHECK(prints.size() == 1);
  pool.lift_restriction();
  const Dataset& ds = small_digits();
  for (const auto& m : pool.manifests()) {
    const double acc = accuracy(pool.load(m.id), ds, ds.val);
    CHECK(std::abs(acc - m.val_acc) <= 0.1);
    CHECK(m.val_acc > 100.0 / ds.num_classes + 2.0);
  }
  const TeacherPool reopened = TeacherPool::open(pool.dir());
  CHECK(reopened.manifests() == pool.manifests());
}

TEST_CASE("manifest json round trip") {
  CheckpointManifest m;
  m.id = "t07";
  m.dataset = "digits";
  m.arch_fingerprint = "abc";
  m.seed = 18446744073709551615ULL;
  m.init_seed = 3;
  m.hparams.lr = 1e-3;
  m.hparams.augment = true;
  m.val_acc = 93.25;
  m.path = "t07.mtc";
  m.split = Split::eval;
  m.attempts = 2;
  CHECK(manifest_from_json(manifest_to_json(m)) == m);
}

TEST_CASE("eval checkpoints are gated") {
  const TeacherPool& pool = small_pool();
  const auto eval = pool.ids(Split::eval);
  pool.clear_access_log();
  pool.restrict_eval({eval[0]});
  CHECK_NOTHROW(pool.load(eval[0]));
  CHECK_THROWS_AS(pool.load(eval[1]), ProtocolError);
  CHECK_NOTHROW(pool.load(pool.ids(Split::train)[0]));
  const auto log = pool.access_log();
  REQUIRE(log.size() == 2);
  CHECK(log[0].id == eval[0]);
  CHECK(log[0].split == Split::eval);
  CHECK(log[1].split == Split::train);
  pool.lift_restriction();
  CHECK_NOTHROW(pool.load(eval[1]));
}

TEST_CASE("teacher sampling") {
  const TeacherPool pool = fake_pool(10, 3);
  Rng a(5), b(5);
  const auto all = sample_teacher_ids(pool, 10, Split::train, a);
  CHECK(std::set<std::string>(all.begin(), all.end()).size() == 10);
  CHECK(sample_teacher_ids(pool, 10, Split::train, b) == all);
  CHECK_THROWS_AS(sample_teacher_ids(pool, 11, Split::train, a), ConfigError);

  std::map<std::string, int> hits;
  Rng rng(77);
  for (int i = 0; i < 1000; ++i) {
    const auto ids = sample_teacher_ids(pool, 3, Split::train, rng);
    CHECK(std::set<std::string>(ids.begin(), ids.end()).size() == 3);
    for (const auto& id : ids) {
      ++hits[id];
      CHECK(pool.manifest(id).split == Split::train);
    }
  }
  for (const auto& [id, n] : hits) CHECK(std::abs(n / 1000.0 - 0.3) <= 0.05);
}

TEST_CASE("invalid zoo configs") {
  ZooConfig cfg;
  cfg.pool_size = 3;
  cfg.min_tuple = 3;
  CHECK_THROWS_AS(build_pool(cfg, small_digits(), scratch_dir("bad_zoo")), ConfigError);
}

TEST_CASE("tensor container") {
  const auto dir = scratch_dir("io");
  TensorContainer c;
  c.meta = R"({"kind":"test"})";
  Rng rng(1);
  c.tensors["b"] = random_tensor({2, 3}, rng);
  c.tensors["a"] = Tensor({4}, std::vector<double>{0.0, -0.0, 1e-310, -1e300});
  save_container(dir / "c.mtc", c);
  const TensorContainer back = load_container(dir / "c.mtc");
  CHECK(back.meta == c.meta);
  CHECK(back.tensors == c.tensors);
  CHECK(std::signbit(back.tensors.at("a")[1]));

  write_text_atomic(dir / "bad.mtc", "NOTMEPL!");
  CHECK_THROWS(load_container(dir / "bad.mtc"));

  auto arch = std::make_shared<const ArchSpec>(build_arch("cnn_tiny", 10, {1, 8, 8}));
  const WeightSet ws = init_weights(arch, rng);
  save_weights(dir / "w.mtc", ws);
  const WeightSet wb = load_weights(dir / "w.mtc");
  CHECK(wb.tensors == ws.tensors);
  CHECK(*wb.arch == *arch);
}
