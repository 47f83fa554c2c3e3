#pragma once

#include <span>
#include <vector>

#include "mepl/arch.hpp"
#include "mepl/generator.hpp"

namespace mepl {

/// Which distribution sits in the first KL slot. The distillation objective
/// places the student first; the flag allows the conventional order.
enum class KlDirection { student_first, teacher_first };
/// Mean over generated scalars (scale-stable across presets) or the raw squared norm.
enum class ConsistencyReduction { mean, sum };

struct LossConfig {
  double alpha = 1.0;
  double kd_temperature = 2.0;
  KlDirection kl_direction = KlDirection::student_first;
  ConsistencyReduction consistency = ConsistencyReduction::mean;

  bool operator==(const LossConfig&) const = default;
};

void validate(const LossConfig& c);

/// T^2 * mean over rows of KL between student and mean-teacher distributions at temperature T.
template <typename T>
ad::Var<T> kd_loss(ad::Var<T> student_logits, const std::vector<Tensor>& teacher_logits, double temperature,
                   KlDirection dir = KlDirection::student_first);
double kd_loss(const Tensor& student_logits, const std::vector<Tensor>& teacher_logits, double temperature,
               KlDirection dir = KlDirection::student_first);

template <typename T>
ad::Var<T> ce_loss(ad::Var<T> logits, std::span<const int> labels) {
  return ad::cross_entropy(logits, labels);
}
double ce_loss(const Tensor& logits, std::span<const int> labels);

/// Squared difference between two generated weight sets, reduced per `red`.
template <typename T>
ad::Var<T> weight_mse(const WeightVars<T>& a, const WeightVars<T>& b, ConsistencyReduction red);

/// Mean squared error between generated weights and a fixed target.
template <typename T>
ad::Var<T> l2_match_loss(ad::Graph<T>& g, const WeightVars<T>& generated, const WeightSet& target);
double l2_match_loss(const WeightSet& generated, const WeightSet& target);

/// Two generator passes, original and one-rotated teacher order, each with
/// its own cutoff stream; returns the reduced squared difference.
template <typename T>
ad::Var<T> shift_consistency(ad::Graph<T>& g, const WeightFormer& gen, const BoundParams<T>& p,
                             const PreparedTeachers& teachers, const LossConfig& cfg, Rng& cutoff_a, Rng& cutoff_b,
                             Mode mode = Mode::train);
double shift_consistency(const WeightFormer& gen, const std::vector<WeightSet>& teachers, const LossConfig& cfg,
                         Rng& cutoff_a, Rng& cutoff_b, Mode mode = Mode::train);

template <typename T>
struct LossTerms {
  ad::Var<T> total;
  ad::Var<T> ce;
  ad::Var<T> consist;
  WeightVars<T> student;  // primary (unshifted) generated student
};

/// CE of the primary generated student on the batch plus alpha * shift consistency.
template <typename T>
LossTerms<T> combined_loss(ad::Graph<T>& g, const WeightFormer& gen, const BoundParams<T>& p,
                           const PreparedTeachers& teachers, const Batch& batch, const LossConfig& cfg, Rng& cutoff_a,
                           Rng& cutoff_b, Mode mode = Mode::train);

}  // namespace mepl
