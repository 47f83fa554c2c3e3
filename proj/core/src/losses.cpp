#include "mepl/losses.hpp"

#include <cmath>

namespace mepl {

void validate(const LossConfig& c) {
  if (!(c.alpha >= 0.0)) throw ConfigError("alpha must be non-negative");
  if (!(c.kd_temperature > 0.0)) throw ConfigError("kd_temperature must be positive");
}

namespace {

// Row-wise log of the mean teacher distribution at temperature t.
Tensor mean_teacher_log_probs(const std::vector<Tensor>& teacher_logits, const Shape& shape, double t) {
  if (teacher_logits.empty()) throw ConfigError("kd_loss: no teacher logits");
  const int rows = shape[0], cols = shape[1];
  Tensor mean_p({rows, cols});
  for (const auto& tl : teacher_logits) {
    if (tl.shape() != shape) throw StructuralError("kd_loss: teacher logits " + shape_str(tl.shape()) + " vs student " + shape_str(shape));
    for (int r = 0; r < rows; ++r) {
      double mx = -INFINITY;
      for (int c = 0; c < cols; ++c) mx = std::max(mx, tl.at(r, c) / t);
      double s = 0;
      for (int c = 0; c < cols; ++c) s += std::exp(tl.at(r, c) / t - mx);
      for (int c = 0; c < cols; ++c) mean_p.at(r, c) += std::exp(tl.at(r, c) / t - mx) / s / teacher_logits.size();
    }
  }
  for (auto& v : mean_p.vec()) v = std::log(v);
  return mean_p;
}

}  // namespace

template <typename T>
ad::Var<T> kd_loss(ad::Var<T> student_logits, const std::vector<Tensor>& teacher_logits, double temperature,
                   KlDirection dir) {
  if (!(temperature > 0.0)) throw ConfigError("kd_loss: temperature must be positive");
  const Shape shape = student_logits.shape();
  if (shape.size() != 2) throw StructuralError("kd_loss: student logits must be [batch, classes]");
  const TensorT<T> log_target = mean_teacher_log_probs(teacher_logits, shape, temperature).template cast<T>();
  auto log_student = ad::log_softmax(ad::scale(student_logits, static_cast<T>(1.0 / temperature)));
  ad::Var<T> kl;
  if (dir == KlDirection::student_first) {
    // sum p_s * (log p_s - log p_bar)
    auto p_s = ad::exp(log_student);
    kl = ad::sum(ad::mul(p_s, ad::add_const(log_student, [&] {
                           TensorT<T> neg = log_target;
                           for (auto& v : neg.vec()) v = -v;
                           return neg;
                         }())));
  } else {
    // sum p_bar * (log p_bar - log p_s)
    TensorT<T> p_bar = log_target;
    T const_part = 0;
    for (std::size_t i = 0; i < p_bar.size(); ++i) {
      p_bar[i] = std::exp(log_target[i]);
      const_part += p_bar[i] * log_target[i];
    }
    kl = ad::scale(ad::sum(ad::mul_const(log_student, p_bar)), T(-1));
    kl = ad::add_const(kl, TensorT<T>({}, std::vector<T>{const_part}));
  }
  const double factor = temperature * temperature / shape[0];
  return ad::scale(kl, static_cast<T>(factor));
}

double kd_loss(const Tensor& student_logits, const std::vector<Tensor>& teacher_logits, double temperature, KlDirection dir) {
  ad::Graph<double> g;
  return g.value(kd_loss(g.constant(student_logits), teacher_logits, temperature, dir))[0];
}

double ce_loss(const Tensor& logits, std::span<const int> labels) {
  ad::Graph<double> g;
  return g.value(ad::cross_entropy(g.constant(logits), labels))[0];
}

template <typename T>
ad::Var<T> weight_mse(const WeightVars<T>& a, const WeightVars<T>& b, ConsistencyReduction red) {
  if (a.size() != b.size() || a.empty()) throw StructuralError("weight_mse: weight sets differ in tensor count");
  std::vector<ad::Var<T>> parts;
  std::size_t n = 0;
  for (const auto& [key, va] : a) {
    auto it = b.find(key);
    if (it == b.end()) throw StructuralError("weight_mse: missing tensor " + key.str());
    auto d = ad::sub(va, it->second);
    parts.push_back(ad::sum(ad::square(d)));
    n += va.value().size();
  }
  auto total = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) total = ad::add(total, parts[i]);
  return red == ConsistencyReduction::mean ? ad::scale(total, static_cast<T>(1.0 / static_cast<double>(n))) : total;
}

template <typename T>
ad::Var<T> l2_match_loss(ad::Graph<T>& g, const WeightVars<T>& generated, const WeightSet& target) {
  WeightVars<T> tv;
  for (const auto& [key, t] : target.tensors) {
    auto it = generated.find(key);
    if (it == generated.end()) throw StructuralError("l2_match_loss: generated set lacks " + key.str());
    if (it->second.shape() != t.shape()) throw StructuralError("l2_match_loss: shape mismatch for " + key.str());
    tv.emplace(key, g.constant(t.template cast<T>()));
  }
  if (tv.size() != generated.size()) throw StructuralError("l2_match_loss: architecture mismatch");
  return weight_mse(generated, tv, ConsistencyReduction::mean);
}

double l2_match_loss(const WeightSet& generated, const WeightSet& target) {
  if (!generated.arch || !target.arch || !(*generated.arch == *target.arch))
    throw StructuralError("l2_match_loss: architecture mismatch");
  ad::Graph<double> g;
  return g.value(l2_match_loss(g, bind_weights(g, generated, false), target))[0];
}

template <typename T>
ad::Var<T> shift_consistency(ad::Graph<T>& g, const WeightFormer& gen, const BoundParams<T>& p,
                             const PreparedTeachers& teachers, const LossConfig& cfg, Rng& cutoff_a, Rng& cutoff_b,
                             Mode mode) {
  if (teachers.count() < 2) throw ConfigError("shift consistency needs at least two teachers");
  GenOptions oa{mode, &cutoff_a, nullptr};
  GenOptions ob{mode, &cutoff_b, nullptr};
  auto original = generate_student(g, gen, p, teachers, oa);
  auto shifted = generate_student(g, gen, p, teachers.rotated(1), ob);
  return weight_mse(original, shifted, cfg.consistency);
}

double shift_consistency(const WeightFormer& gen, const std::vector<WeightSet>& teachers, const LossConfig& cfg,
                         Rng& cutoff_a, Rng& cutoff_b, Mode mode) {
  ad::Graph<double> g;
  auto p = bind_params<double>(g, gen.params(), false);
  return g.value(shift_consistency(g, gen, p, prepare_teachers(gen, teachers), cfg, cutoff_a, cutoff_b, mode))[0];
}

template <typename T>
LossTerms<T> combined_loss(ad::Graph<T>& g, const WeightFormer& gen, const BoundParams<T>& p,
                           const PreparedTeachers& teachers, const Batch& batch, const LossConfig& cfg, Rng& cutoff_a,
                           Rng& cutoff_b, Mode mode) {
  validate(cfg);
  LossTerms<T> out;
  GenOptions oa{mode, &cutoff_a, nullptr};
  out.student = generate_student(g, gen, p, teachers, oa);
  out.ce = ce_loss(functional_forward(g, gen.arch(), out.student, batch), batch.labels);
  if (cfg.alpha > 0.0) {
    if (teachers.count() < 2) throw ConfigError("shift consistency needs at least two teachers");
    GenOptions ob{mode, &cutoff_b, nullptr};
    auto shifted = generate_student(g, gen, p, teachers.rotated(1), ob);
    out.consist = weight_mse(out.student, shifted, cfg.consistency);
    out.total = ad::add(out.ce, ad::scale(out.consist, static_cast<T>(cfg.alpha)));
  } else {
    out.consist = g.constant(TensorT<T>({}, std::vector<T>{T(0)}));
    out.total = out.ce;
  }
  return out;
}

#define MEPL_INSTANTIATE(T)                                                                                         \
  template ad::Var<T> kd_loss(ad::Var<T>, const std::vector<Tensor>&, double, KlDirection);                         \
  template ad::Var<T> weight_mse(const WeightVars<T>&, const WeightVars<T>&, ConsistencyReduction);                 \
  template ad::Var<T> l2_match_loss(ad::Graph<T>&, const WeightVars<T>&, const WeightSet&);                         \
  template ad::Var<T> shift_consistency(ad::Graph<T>&, const WeightFormer&, const BoundParams<T>&,                  \
                                        const PreparedTeachers&, const LossConfig&, Rng&, Rng&, Mode);              \
  template LossTerms<T> combined_loss(ad::Graph<T>&, const WeightFormer&, const BoundParams<T>&,                    \
                                      const PreparedTeachers&, const Batch&, const LossConfig&, Rng&, Rng&, Mode);

MEPL_INSTANTIATE(float)
MEPL_INSTANTIATE(double)

#undef MEPL_INSTANTIATE

}  // namespace mepl
