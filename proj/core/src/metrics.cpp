#include "mepl/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "mepl/errors.hpp"

namespace mepl {

namespace {

void check_logits(const Tensor& logits, std::size_t rows) {
  if (logits.rank() != 2) throw StructuralError("logits must be [rows, classes], got " + shape_str(logits.shape()));
  if (static_cast<std::size_t>(logits.dim(0)) != rows)
    throw StructuralError("logits have " + std::to_string(logits.dim(0)) + " rows but " + std::to_string(rows) + " labels");
  if (rows == 0) throw ConfigError("empty prediction set");
}

}  // namespace

double acc_topn(const Tensor& logits, std::span<const int> labels, int n) {
  check_logits(logits, labels.size());
  const int classes = logits.dim(1);
  if (n < 1 || n > classes) throw ConfigError("top-n must be in [1, " + std::to_string(classes) + "], got " + std::to_string(n));
  std::size_t hits = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    const int y = labels[r];
    if (y < 0 || y >= classes) throw ConfigError("label " + std::to_string(y) + " out of range");
    const double v = logits.at(static_cast<int>(r), y);
    // rank of y: classes strictly above it, plus equal ones at a lower index
    int ahead = 0;
    for (int c = 0; c < classes; ++c) {
      const double u = logits.at(static_cast<int>(r), c);
      if (u > v || (u == v && c < y)) ++ahead;
    }
    if (ahead < n) ++hits;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(labels.size());
}

std::vector<int> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw StructuralError("logits must be [rows, classes]");
  std::vector<int> out(logits.dim(0));
  for (int r = 0; r < logits.dim(0); ++r) {
    int best = 0;
    for (int c = 1; c < logits.dim(1); ++c)
      if (logits.at(r, c) > logits.at(r, best)) best = c;
    out[r] = best;
  }
  return out;
}

std::vector<double> max_confidence(const Tensor& logits) {
  if (logits.rank() != 2) throw StructuralError("logits must be [rows, classes]");
  std::vector<double> out(logits.dim(0));
  for (int r = 0; r < logits.dim(0); ++r) {
    double mx = logits.at(r, 0);
    for (int c = 1; c < logits.dim(1); ++c) mx = std::max(mx, logits.at(r, c));
    double s = 0.0;
    for (int c = 0; c < logits.dim(1); ++c) s += std::exp(logits.at(r, c) - mx);
    out[r] = 1.0 / s;
  }
  return out;
}

CalibrationBins calibration_bins(std::span<const double> confidences, std::span<const int> correct, int num_bins) {
  if (confidences.empty()) throw ConfigError("ece: empty input");
  if (confidences.size() != correct.size()) throw StructuralError("ece: confidences and correctness differ in length");
  if (num_bins < 1) throw ConfigError("ece: bin count must be positive");
  CalibrationBins cb;
  cb.num_bins = num_bins;
  cb.bins.resize(num_bins);
  std::vector<double> conf_sum(num_bins, 0.0), hit_sum(num_bins, 0.0);
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    const double c = confidences[i];
    if (!(c >= 0.0 && c <= 1.0)) throw ConfigError("ece: confidence outside [0, 1]");
    int b = std::min(static_cast<int>(std::floor(c * num_bins)), num_bins - 1);
    // c * num_bins can round across an edge; settle against the edges themselves.
    while (b > 0 && c < static_cast<double>(b) / num_bins) --b;
    while (b < num_bins - 1 && c >= static_cast<double>(b + 1) / num_bins) ++b;
    cb.bins[b].count += 1;
    conf_sum[b] += c;
    hit_sum[b] += correct[i] ? 1.0 : 0.0;
  }
  for (int b = 0; b < num_bins; ++b) {
    auto& bin = cb.bins[b];
    bin.lo = static_cast<double>(b) / num_bins;
    bin.hi = static_cast<double>(b + 1) / num_bins;
    if (bin.count > 0) {
      bin.mean_confidence = conf_sum[b] / bin.count;
      bin.accuracy = hit_sum[b] / bin.count;
    }
  }
  return cb;
}

double ece(std::span<const double> confidences, std::span<const int> correct, int num_bins) {
  const auto cb = calibration_bins(confidences, correct, num_bins);
  const double n = static_cast<double>(confidences.size());
  double e = 0.0;
  for (const auto& bin : cb.bins)
    if (bin.count > 0) e += bin.count / n * std::abs(bin.accuracy - bin.mean_confidence);
  return 100.0 * e;
}

double ece_from_logits(const Tensor& logits, std::span<const int> labels, int num_bins) {
  check_logits(logits, labels.size());
  const auto conf = max_confidence(logits);
  const auto pred = argmax_rows(logits);
  std::vector<int> correct(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) correct[i] = pred[i] == labels[i];
  return ece(conf, correct, num_bins);
}

Scores score_logits(const Tensor& logits, std::span<const int> labels, int topn, int num_bins) {
  check_logits(logits, labels.size());
  Scores s;
  s.acc1 = acc_topn(logits, labels, 1);
  s.accn = acc_topn(logits, labels, std::min(topn, logits.dim(1)));
  s.ece = ece_from_logits(logits, labels, num_bins);
  return s;
}

Spread mean_two_sigma(std::span<const double> values) {
  Spread s;
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - s.mean) * (v - s.mean);
  var /= static_cast<double>(values.size());
  s.two_sigma = 2.0 * std::sqrt(var);
  return s;
}

}  // namespace mepl
