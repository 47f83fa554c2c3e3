#include <benchmark/benchmark.h>

#include "mepl/codec.hpp"
#include "mepl/dataset.hpp"
#include "mepl/generator.hpp"
#include "mepl/losses.hpp"
#include "mepl/metrics.hpp"

using namespace mepl;

namespace {

std::shared_ptr<const ArchSpec> cnn_arch() {
  static auto arch = std::make_shared<const ArchSpec>(build_arch("cnn_tiny", 10, {1, 8, 8}));
  return arch;
}

std::vector<WeightSet> teachers(int n) {
  std::vector<WeightSet> out;
  for (int i = 0; i < n; ++i) {
    Rng rng(10 + i);
    out.push_back(init_weights(cnn_arch(), rng));
  }
  return out;
}

GeneratorConfig desk_generator(int n) {
  GeneratorConfig c;
  c.d_model = 64;
  c.num_blocks = 2;
  c.num_heads = 4;
  c.ffn_dim = 128;
  c.n_teachers = n;
  return c;
}

const Dataset& digits() {
  static const Dataset ds = load_dataset("digits");
  return ds;
}

void BM_Tokenize(benchmark::State& state) {
  const WeightSet w = teachers(1).front();
  for (auto _ : state) {
    auto tms = tokenize(w);
    benchmark::DoNotOptimize(detokenize(tms, cnn_arch()));
  }
}
BENCHMARK(BM_Tokenize);

void BM_Generate(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto t = teachers(n);
  const WeightFormer gen(desk_generator(n), cnn_arch(), fit_norm_stats(t));
  for (auto _ : state) benchmark::DoNotOptimize(generate_student(gen, t));
}
BENCHMARK(BM_Generate)->Arg(2)->Arg(3)->Arg(5)->Unit(benchmark::kMillisecond);

// One forward and backward pass of the combined loss on a 32-image batch.
void BM_CombinedLossStep(benchmark::State& state) {
  const auto t = teachers(3);
  const WeightFormer gen(desk_generator(3), cnn_arch(), fit_norm_stats(t));
  const auto prep = prepare_teachers(gen, t);
  const std::vector<int> idx(digits().train.begin(), digits().train.begin() + 32);
  const Batch batch = make_batch(digits(), idx);
  for (auto _ : state) {
    ad::Graph<float> g;
    const auto p = bind_params<float>(g, gen.params(), true);
    Rng a(1), b(2);
    const auto terms = combined_loss(g, gen, p, prep, batch, {}, a, b);
    g.backward(terms.total);
    benchmark::DoNotOptimize(collect_grads(g, p));
  }
}
BENCHMARK(BM_CombinedLossStep)->Unit(benchmark::kMillisecond);

void BM_Metrics(benchmark::State& state) {
  Rng rng(3);
  Tensor logits({static_cast<int>(state.range(0)), 10});
  for (auto& v : logits.vec()) v = rng.normal();
  std::vector<int> labels(logits.dim(0));
  for (auto& y : labels) y = static_cast<int>(rng.below(10));
  for (auto _ : state) benchmark::DoNotOptimize(score_logits(logits, labels));
}
BENCHMARK(BM_Metrics)->Arg(512)->Arg(4096);

}  // namespace
BENCHMARK_MAIN();
