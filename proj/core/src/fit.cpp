#include "mepl/fit.hpp"

#include <numeric>

#include "mepl/metrics.hpp"

namespace mepl {

ParamStore to_param_store(const WeightSet& ws) {
  ParamStore ps;
  for (const auto& [key, t] : ws.tensors) ps.tensors.emplace(key.str(), t);
  return ps;
}

WeightSet from_param_store(const ParamStore& ps, std::shared_ptr<const ArchSpec> arch) {
  WeightSet ws;
  ws.arch = std::move(arch);
  for (const auto& l : ws.arch->layers)
    for (const auto& [role, shape] : layer_tensor_shapes(l)) {
      TensorKey key{l.name, role};
      ws.tensors.emplace(key, ps.at(key.str()));
    }
  return ws;
}

Tensor predict_logits(const WeightSet& ws, const Dataset& ds, std::span<const int> indices) {
  constexpr int chunk = 256;
  const int classes = ws.arch->num_classes;
  Tensor out({static_cast<int>(indices.size()), classes});
  for (std::size_t i = 0; i < indices.size(); i += chunk) {
    const std::size_t n = std::min<std::size_t>(chunk, indices.size() - i);
    const Tensor part = forward_logits(*ws.arch, ws, make_batch(ds, indices.subspan(i, n)));
    std::copy(part.data(), part.data() + part.size(), out.data() + i * classes);
  }
  return out;
}

double accuracy(const WeightSet& ws, const Dataset& ds, std::span<const int> indices) {
  std::vector<int> labels;
  labels.reserve(indices.size());
  for (int i : indices) labels.push_back(ds.labels[i]);
  return acc_topn(predict_logits(ws, ds, indices), labels, 1);
}

FitResult fit_classifier(const WeightSet& init, const Dataset& ds, const FitConfig& cfg, Rng& rng,
                         const std::vector<WeightSet>& teachers) {
  if (cfg.epochs < 0 || cfg.batch_size < 1 || !(cfg.lr > 0)) throw ConfigError("invalid classifier fit settings");
  validate_weights(*init.arch, init);
  FitResult res;
  res.weights = init;
  res.val_acc = accuracy(init, ds, ds.val);
  if (cfg.epochs == 0) return res;

  ParamStore params = to_param_store(init);
  AdamOptimizer opt;
  opt.weight_decay = cfg.weight_decay;
  std::vector<int> order = ds.train;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    for (std::size_t i = 0; i < order.size(); i += cfg.batch_size) {
      const std::size_t n = std::min<std::size_t>(cfg.batch_size, order.size() - i);
      const Batch batch = make_batch(ds, std::span<const int>(order).subspan(i, n), cfg.augment, &rng);
      ad::Graph<float> g;
      auto bound = bind_params<float>(g, params, true);
      WeightVars<float> wv;
      for (const auto& [key, t] : init.tensors) wv.emplace(key, bound.at(key.str()));
      auto logits = functional_forward(g, *init.arch, wv, batch);
      ad::Var<float> loss;
      if (teachers.empty()) {
        loss = ad::cross_entropy(logits, batch.labels);
      } else {
        std::vector<Tensor> tl;
        for (const auto& t : teachers) tl.push_back(forward_logits(*t.arch, t, batch));
        loss = kd_loss(logits, tl, cfg.kd_temperature, cfg.kl_direction);
      }
      if (!std::isfinite(g.value(loss)[0])) {
        res.finite = false;
        return res;
      }
      g.backward(loss);
      opt.step(params, collect_grads(g, bound), cfg.lr);
    }
    if (!params.all_finite()) {
      res.finite = false;
      return res;
    }
    WeightSet current = from_param_store(params, init.arch);
    const double acc = accuracy(current, ds, ds.val);
    if (acc > res.val_acc || res.best_epoch < 0) {
      res.val_acc = acc;
      res.best_epoch = epoch;
      res.weights = std::move(current);
    }
  }
  return res;
}

}  // namespace mepl
