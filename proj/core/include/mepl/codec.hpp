#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mepl/arch.hpp"
#include "mepl/params.hpp"
#include "mepl/rng.hpp"

namespace mepl {

/// Identifies a weight-embedding dictionary entry: layers sharing kind and
/// token width share one pair of maps.
struct LayerKey {
  LayerKind kind = LayerKind::fc;
  int d_layer = 0;
  auto operator<=>(const LayerKey&) const = default;
  std::string str() const { return to_string(kind) + "_" + std::to_string(d_layer); }
};

/// One layer's weights as a token sequence.
///
/// Token layout (row r = token r):
///   conv      [n_output, k*k*n_input + 1]  row r = output channel r's kernel
///             flattened (in_channel, ky, kx), then its bias.
///   fc        [n_output, n_input + 1]      row r = weight row r, then bias r.
///   norm      [channels, 2]                row r = (scale r, shift r).
///   attention [2*d_k + 2*d_v, h*d_trans]   rows in Q,K,V,O order. Q/K/V row j is
///             column j of every head's projection, heads concatenated; O row j
///             is row (head*d_v + j) of W^O, heads concatenated.
/// The bias column is absent when a layer has no bias.
struct TokenMatrix {
  Tensor tokens;  // [seq_len, d_layer]
  LayerKind layer_kind = LayerKind::fc;
  std::string layer_name;

  int seq_len() const { return tokens.dim(0); }
  int d_layer() const { return tokens.dim(1); }
  LayerKey key() const { return {layer_kind, d_layer()}; }
};

/// (seq_len, d_layer) dictated by the token layout above.
std::pair<int, int> token_shape(const LayerSpec& spec);
LayerKey layer_key(const LayerSpec& spec);

/// For each token entry (row-major), the index into the layer's flat parameter
/// vector (tensors concatenated in layer_tensor_shapes order). A permutation.
std::vector<std::int64_t> token_source_index(const LayerSpec& spec);

TokenMatrix tokenize_layer(const WeightSet& ws, const LayerSpec& spec);
/// Writes the layer's tensors into `ws` (exact inverse of tokenize_layer).
void detokenize_layer(const TokenMatrix& tm, const LayerSpec& spec, WeightSet& ws);
std::vector<TokenMatrix> tokenize(const WeightSet& ws);
WeightSet detokenize(const std::vector<TokenMatrix>& tms, std::shared_ptr<const ArchSpec> arch);

/// Differentiable detokenization of generated tokens into per-role tensors.
template <typename T>
std::map<Role, ad::Var<T>> detokenize_vars(ad::Var<T> tokens, const LayerSpec& spec);

// ---- input conditioning ----

/// Per token column (length d_layer).
struct NormEntry {
  std::vector<double> mean;
  std::vector<double> std;
};

struct NormStats {
  std::map<LayerKey, NormEntry> entries;
  const NormEntry& at(const LayerKey& key) const;
};

constexpr double kNormStdFloor = 1e-6;

/// Mean/std of each token column per layer key, pooled over all rows of all
/// matching layers of the given teachers.
NormStats fit_norm_stats(const std::vector<WeightSet>& teachers);
TokenMatrix apply_norm(const TokenMatrix& tm, const NormStats& stats);
TokenMatrix invert_norm(const TokenMatrix& tm, const NormStats& stats);

// ---- weight embedding dictionary ----

/// Parameter names of the affine maps d_layer -> d_model and back.
struct DictionaryEntry {
  LayerKey key;
  std::string in_weight;   // [d_layer, d_model]
  std::string in_bias;     // [d_model]
  std::string out_weight;  // [d_model, d_layer]
  std::string out_bias;    // [d_layer]
};

class Dictionary {
 public:
  Dictionary() = default;
  Dictionary(const ArchSpec& arch, int d_model);

  /// The shared entry for a key; throws ConfigError naming the key when absent.
  const DictionaryEntry& entry(const LayerKey& key) const;
  const std::map<LayerKey, DictionaryEntry>& entries() const { return entries_; }
  int d_model() const { return d_model_; }

  /// Adds freshly initialised map parameters for every entry.
  void init_params(ParamStore& store, Rng& rng) const;

 private:
  int d_model_ = 0;
  std::map<LayerKey, DictionaryEntry> entries_;
};

/// tokens [n, d_layer] -> [n, d_model].
template <typename T>
ad::Var<T> embed_tokens(ad::Var<T> tokens, const DictionaryEntry& entry, const BoundParams<T>& params);
/// hidden [n, d_model] -> [n, d_layer].
template <typename T>
ad::Var<T> project_tokens(ad::Var<T> hidden, const DictionaryEntry& entry, const BoundParams<T>& params);

Tensor embed_tokens(const TokenMatrix& tm, const Dictionary& dict, const ParamStore& params);
TokenMatrix project_tokens(const Tensor& hidden, const Dictionary& dict, const LayerKey& key, const ParamStore& params);

}  // namespace mepl
