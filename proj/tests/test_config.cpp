#include "doctest.h"
#include "support.hpp"

#include "mepl/config.hpp"

using namespace mepl;

TEST_CASE("config json round trip") {
  for (const char* preset : {"default", "desk"}) {
    const ExperimentConfig c = resolve(preset_config(preset));
    CHECK(config_from_json(config_to_json(c)) == c);
    CHECK_NOTHROW(validate(c));
  }
}

TEST_CASE("partial config keeps base values") {
  const ExperimentConfig base = desk_config();
  const ExperimentConfig c = config_from_json(R"({"train": {"max_steps": 77}, "seed": 9})", base);
  CHECK(c.train.max_steps == 77);
  CHECK(c.seed == 9);
  CHECK(c.train.main_lr == base.train.main_lr);
  CHECK(c.generator == base.generator);
}

TEST_CASE("config errors") {
  CHECK_THROWS_AS(config_from_json(R"({"trian": {}})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"train": {"max_step": 1}})"), ConfigError);
  CHECK_THROWS_AS(config_from_json("[1, 2]"), ConfigError);
  CHECK_THROWS_AS(config_from_json("{not json"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"train": {"max_steps": "many"}})"), ConfigError);
  CHECK_THROWS_AS(preset_config("huge"), ConfigError);

  ExperimentConfig c = default_config();
  c.generator.n_teachers = c.zoo.n_train + 1;
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = default_config();
  c.arch = "resnet50";
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = default_config();
  c.eval.sweep_modes = {"pairwise"};
  CHECK_THROWS_AS(validate(c), ConfigError);
}

TEST_CASE("resolve derives named seeds") {
  ExperimentConfig c = default_config();
  c.seed = 3;
  const ExperimentConfig r = resolve(c);
  CHECK(resolve(r) == r);
  CHECK(r.zoo.seed == stream_seed(3, "zoo"));
  CHECK(r.train.seed == stream_seed(3, "train"));
  CHECK(r.generator.seed != r.train.seed);
  c.seed = 4;
  CHECK(resolve(c).train.seed != r.train.seed);
  CHECK(config_hash(resolve(c)) != config_hash(r));
  CHECK(config_hash(r) == config_hash(resolve(r)));
}

TEST_CASE("default and desk presets differ only where documented") {
  const ExperimentConfig p = default_config(), d = desk_config();
  CHECK(p.train.main_lr == 3e-5);
  CHECK(p.train.reload_interval == 5000);
  CHECK(p.zoo.pool_size == 30);
  CHECK(p.zoo.n_train == 25);
  CHECK(d.zoo == p.zoo);
  CHECK(d.train.loss == p.train.loss);
  CHECK(d.generator.d_model < p.generator.d_model);
}
