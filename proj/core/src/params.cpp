#include "mepl/params.hpp"

#include <cmath>

namespace mepl {

Tensor& ParamStore::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw StructuralError("missing parameter '" + name + "'");
  return it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw StructuralError("missing parameter '" + name + "'");
  return it->second;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [k, t] : tensors) n += t.size();
  return n;
}

bool ParamStore::all_finite() const {
  for (const auto& [k, t] : tensors)
    if (!t.all_finite()) return false;
  return true;
}

void SgdOptimizer::step(ParamStore& params, const ParamStore& grads) const {
  for (auto& [name, p] : params.tensors) {
    auto it = grads.tensors.find(name);
    if (it == grads.tensors.end()) continue;
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * it->second[i];
  }
}

void AdamOptimizer::step(ParamStore& params, const ParamStore& grads, double lr) {
  ++step_count;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
  for (auto& [name, p] : params.tensors) {
    auto it = grads.tensors.find(name);
    if (it == grads.tensors.end()) continue;
    const Tensor& g = it->second;
    auto [mi, mnew] = m.tensors.try_emplace(name, Tensor(p.shape()));
    auto [vi, vnew] = v.tensors.try_emplace(name, Tensor(p.shape()));
    Tensor& mt = mi->second;
    Tensor& vt = vi->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i] + weight_decay * p[i];
      mt[i] = beta1 * mt[i] + (1.0 - beta1) * gi;
      vt[i] = beta2 * vt[i] + (1.0 - beta2) * gi * gi;
      p[i] -= lr * (mt[i] / c1) / (std::sqrt(vt[i] / c2) + eps);
    }
  }
}

}  // namespace mepl
