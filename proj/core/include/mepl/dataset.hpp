#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mepl/arch.hpp"
#include "mepl/rng.hpp"

namespace mepl {

/// In-memory image classification set with a fixed train/val/test split.
struct Dataset {
  std::string id;
  int num_classes = 0;
  std::array<int, 3> input_shape{1, 8, 8};
  Tensor images;  // [N, C, H, W]
  std::vector<int> labels;
  std::vector<int> train;
  std::vector<int> val;
  std::vector<int> test;

  int size() const { return static_cast<int>(labels.size()); }
};

/// Directory holding bundled data files; MEPL_DATA_DIR overrides the build default.
std::filesystem::path default_data_dir();

/// Known ids: "digits" (8x8 handwritten digits, 1797 images), and
/// "digits:<n>" for a seeded subsample of n images. The split is fixed
/// (independent of any experiment seed) so every method sees the same test set.
Dataset load_dataset(const std::string& id, const std::filesystem::path& data_dir = default_data_dir());

/// Gathers rows into a batch. With `augment`, each image is shifted by up to one
/// pixel in each direction (zero fill) using `rng`.
Batch make_batch(const Dataset& ds, std::span<const int> indices, bool augment = false, Rng* rng = nullptr);

/// Splits `indices` into consecutive batches of at most `batch_size`.
std::vector<Batch> make_batches(const Dataset& ds, std::span<const int> indices, int batch_size);

}  // namespace mepl
