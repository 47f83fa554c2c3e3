#include "support.hpp"

#include <map>
#include <mutex>

namespace mepl::testing {

std::filesystem::path scratch_dir(const std::string& name) {
  static std::map<std::string, std::filesystem::path> made;
  auto it = made.find(name);
  if (it != made.end()) return it->second;
  const auto dir = std::filesystem::path(MEPL_TEST_SCRATCH) / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  made[name] = dir;
  return dir;
}

const Dataset& small_digits() {
  static const Dataset ds = load_dataset("digits:600");
  return ds;
}

const TeacherPool& small_pool() {
  static const TeacherPool pool = [] {
    ZooConfig cfg;
    cfg.dataset = "digits:600";
    cfg.pool_size = 6;
    cfg.n_train = 4;
    cfg.seed = 11;
    cfg.min_tuple = 2;
    for (auto& h : cfg.grid) h.epochs = 6;
    return build_pool(cfg, small_digits(), scratch_dir("pool"));
  }();
  return pool;
}

LayerSpec random_layer(LayerKind kind, Rng& rng, const std::string& name) {
  auto pick = [&](int lo, int hi) { return lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1))); };
  LayerSpec l;
  l.name = name;
  l.kind = kind;
  switch (kind) {
    case LayerKind::conv:
      l.kernel = pick(1, 5);
      l.n_input = pick(1, 12);
      l.n_output = pick(1, 24);
      l.has_bias = rng.uniform() < 0.7;
      break;
    case LayerKind::fc:
      l.n_input = pick(1, 64);
      l.n_output = pick(1, 48);
      l.has_bias = rng.uniform() < 0.7;
      break;
    case LayerKind::norm:
      l.n_input = l.n_output = pick(1, 32);
      l.frozen_mean.assign(l.n_output, 0.0);
      l.frozen_std.assign(l.n_output, 1.0);
      break;
    case LayerKind::attention:
      l.heads = pick(1, 4);
      l.d_trans = pick(2, 24);
      l.d_k = pick(1, 12);
      l.d_v = pick(1, 12);
      l.has_bias = false;
      break;
  }
  return l;
}

WeightSet random_layer_weights(const LayerSpec& spec, Rng& rng) {
  WeightSet ws;
  for (const auto& [role, shape] : layer_tensor_shapes(spec)) ws.tensors[{spec.name, role}] = random_tensor(shape, rng);
  return ws;
}

ArchSpec wide_conv_arch() {
  ArchSpec a;
  a.preset = "wide_conv";
  a.family = Family::cnn;
  a.num_classes = 10;
  a.input_shape = {16, 4, 4};
  LayerSpec c;
  c.name = "conv";
  c.kind = LayerKind::conv;
  c.kernel = 3;
  c.n_input = 16;
  c.n_output = 32;
  c.padding = 1;
  c.has_bias = false;
  LayerSpec f;
  f.name = "fc";
  f.kind = LayerKind::fc;
  f.n_input = 32 * 16;
  f.n_output = 10;
  a.layers = {c, f};
  validate_arch(a);
  return a;
}

ArchSpec two_layer_arch(int hidden) {
  ArchSpec a;
  a.preset = "fc2";
  a.family = Family::mlp;
  a.num_classes = 10;
  a.input_shape = {1, 8, 8};
  LayerSpec l1;
  l1.name = "fc1";
  l1.kind = LayerKind::fc;
  l1.n_input = 64;
  l1.n_output = hidden;
  l1.activation = Activation::relu;
  LayerSpec l2;
  l2.name = "fc2";
  l2.kind = LayerKind::fc;
  l2.n_input = hidden;
  l2.n_output = 10;
  a.layers = {l1, l2};
  validate_arch(a);
  return a;
}

}  // namespace mepl::testing
