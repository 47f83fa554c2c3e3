#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "mepl/arch.hpp"
#include "mepl/tensor.hpp"

namespace mepl {

/// Portable tensor container. Layout (all integers little-endian):
///
///   magic   "MEPLTC01"            8 bytes
///   meta    u64 length + UTF-8    free-form JSON document
///   count   u32
///   entries count x { u32 name_len, name bytes, u32 rank, rank x i32 dims,
///                     numel x f64 (IEEE-754 binary64) }
///
/// Entries are written in name order.
struct TensorContainer {
  std::string meta;
  std::map<std::string, Tensor> tensors;
};

void save_container(const std::filesystem::path& path, const TensorContainer& c);
TensorContainer load_container(const std::filesystem::path& path);

/// Write-to-temp then rename, so readers never observe a partial file.
void write_text_atomic(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

/// Weight-set checkpoint: tensors keyed "<layer>.<role>", architecture text in meta.
void save_weights(const std::filesystem::path& path, const WeightSet& ws);
WeightSet load_weights(const std::filesystem::path& path);

}  // namespace mepl
