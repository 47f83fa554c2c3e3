#pragma once

#include <span>
#include <vector>

#include "mepl/arch.hpp"
#include "mepl/dataset.hpp"
#include "mepl/losses.hpp"
#include "mepl/params.hpp"

namespace mepl {

/// Direct training of one network's weights (teachers, KD students).
struct FitConfig {
  double lr = 3e-3;
  int epochs = 20;
  int batch_size = 32;
  double weight_decay = 0.0;
  bool augment = false;
  double kd_temperature = 2.0;
  KlDirection kl_direction = KlDirection::student_first;

  bool operator==(const FitConfig&) const = default;
};

struct FitResult {
  WeightSet weights;  // best validation epoch
  double val_acc = 0.0;
  int best_epoch = -1;
  bool finite = true;
};

/// Cross-entropy on labels when `teachers` is empty, otherwise distillation
/// toward the teachers' mean soft labels. Keeps the best validation epoch;
/// zero epochs returns `init` unchanged.
FitResult fit_classifier(const WeightSet& init, const Dataset& ds, const FitConfig& cfg, Rng& rng,
                         const std::vector<WeightSet>& teachers = {});

Tensor predict_logits(const WeightSet& ws, const Dataset& ds, std::span<const int> indices);
double accuracy(const WeightSet& ws, const Dataset& ds, std::span<const int> indices);

ParamStore to_param_store(const WeightSet& ws);
WeightSet from_param_store(const ParamStore& ps, std::shared_ptr<const ArchSpec> arch);

}  // namespace mepl
