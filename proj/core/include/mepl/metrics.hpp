#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mepl/tensor.hpp"

namespace mepl {

/// Percentage of rows whose label is among the n largest logits. Ties are
/// broken toward the lower class index, so a tied label at a higher index
/// ranks behind it.
double acc_topn(const Tensor& logits, std::span<const int> labels, int n);

/// Row-wise max softmax probability and argmax (lowest index on ties).
std::vector<double> max_confidence(const Tensor& logits);
std::vector<int> argmax_rows(const Tensor& logits);

struct CalibrationBin {
  double lo = 0.0;
  double hi = 0.0;
  int count = 0;
  double mean_confidence = 0.0;
  double accuracy = 0.0;
};

/// Equal-width bins over [0, 1]; bin b holds confidences in [b/B, (b+1)/B),
/// with 1.0 falling into the last bin.
struct CalibrationBins {
  int num_bins = 15;
  std::vector<CalibrationBin> bins;
};

CalibrationBins calibration_bins(std::span<const double> confidences, std::span<const int> correct, int num_bins = 15);
/// Expected calibration error as a percentage.
double ece(std::span<const double> confidences, std::span<const int> correct, int num_bins = 15);
double ece_from_logits(const Tensor& logits, std::span<const int> labels, int num_bins = 15);

struct Scores {
  double acc1 = 0.0;
  double accn = 0.0;
  double ece = 0.0;
};

Scores score_logits(const Tensor& logits, std::span<const int> labels, int topn = 5, int num_bins = 15);

/// Mean and two population standard deviations.
struct Spread {
  double mean = 0.0;
  double two_sigma = 0.0;
};
Spread mean_two_sigma(std::span<const double> values);

}  // namespace mepl
