#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "mepl/arch.hpp"
#include "mepl/dataset.hpp"
#include "mepl/rng.hpp"
#include "mepl/zoo.hpp"

namespace mepl::testing {

/// Scratch directory under the build tree, wiped on first use per process.
std::filesystem::path scratch_dir(const std::string& name);

/// 600-image digits subset, loaded once.
const Dataset& small_digits();

/// Six cnn_tiny teachers (4 train / 2 eval) trained for a few epochs, built once.
const TeacherPool& small_pool();

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12}); }

inline Tensor random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
  Tensor t(shape);
  for (auto& v : t.vec()) v = scale * rng.normal();
  return t;
}

/// Layer of the given kind with random dimensions (small enough to be fast).
LayerSpec random_layer(LayerKind kind, Rng& rng, const std::string& name = "l");

/// Weight set holding only `spec`'s tensors, filled with normals.
WeightSet random_layer_weights(const LayerSpec& spec, Rng& rng);

/// conv 3x3 16->32 without bias (tokens 32x144) followed by a classifier.
ArchSpec wide_conv_arch();

/// Tiny two-layer fc student on the digits input.
ArchSpec two_layer_arch(int hidden = 6);

}  // namespace mepl::testing
