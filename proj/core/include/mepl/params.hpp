#pragma once

#include <map>
#include <string>

#include "mepl/autograd.hpp"
#include "mepl/tensor.hpp"

namespace mepl {

/// Flat, name-ordered collection of trainable tensors.
struct ParamStore {
  std::map<std::string, Tensor> tensors;

  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return tensors.count(name) != 0; }
  std::size_t scalar_count() const;
  bool all_finite() const;
};

template <typename T>
using BoundParams = std::map<std::string, ad::Var<T>>;

template <typename T>
BoundParams<T> bind_params(ad::Graph<T>& g, const ParamStore& store, bool requires_grad) {
  BoundParams<T> out;
  for (const auto& [name, t] : store.tensors)
    out.emplace(name, requires_grad ? g.param(t.template cast<T>()) : g.constant(t.template cast<T>()));
  return out;
}

/// Gradients of every bound parameter after Graph::backward, in double.
template <typename T>
ParamStore collect_grads(const ad::Graph<T>& g, const BoundParams<T>& bound) {
  ParamStore out;
  for (const auto& [name, v] : bound) out.tensors.emplace(name, g.grad(v).template cast<double>());
  return out;
}

template <typename T>
ad::Var<T> param_var(const BoundParams<T>& bound, const std::string& name) {
  auto it = bound.find(name);
  if (it == bound.end()) throw StructuralError("missing generator parameter '" + name + "'");
  return it->second;
}

// ---- optimizers ----

struct SgdOptimizer {
  double lr = 1e-3;
  void step(ParamStore& params, const ParamStore& grads) const;
};

/// Adaptive-moment optimizer; the moments are part of the resumable run state.
struct AdamOptimizer {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  long step_count = 0;
  ParamStore m;
  ParamStore v;

  void step(ParamStore& params, const ParamStore& grads, double lr);
};

}  // namespace mepl
