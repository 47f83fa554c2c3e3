#pragma once

#include <array>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mepl/autograd.hpp"
#include "mepl/rng.hpp"
#include "mepl/tensor.hpp"

namespace mepl {

enum class LayerKind { conv, fc, attention, norm };
enum class Activation { none, relu };
/// Spatial/token reduction applied after a layer's activation.
enum class Pool { none, max2, token_mean };
enum class Family { cnn, vit, mlp };
enum class Preset { cnn_tiny, vit_tiny, mlp_tiny };

/// Tensor roles. Attention layers carry four projection matrices.
enum class Role { weight, bias, scale, shift, query, key, value, output };

std::string to_string(LayerKind k);
std::string to_string(Role r);
std::string to_string(Preset p);
LayerKind layer_kind_from_string(const std::string& s);
Role role_from_string(const std::string& s);
Preset preset_from_string(const std::string& s);

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::fc;
  // conv / fc / norm (norm uses n_output as channel count)
  int kernel = 1;
  int n_input = 0;
  int n_output = 0;
  int stride = 1;
  int padding = 0;
  // attention
  int heads = 0;
  int d_trans = 0;
  int d_k = 0;
  int d_v = 0;
  bool has_bias = true;
  Activation activation = Activation::none;
  Pool pool = Pool::none;
  /// Frozen per-channel statistics for norm layers; never generated.
  std::vector<double> frozen_mean;
  std::vector<double> frozen_std;

  bool operator==(const LayerSpec&) const = default;
};

struct ArchSpec {
  std::string preset;
  Family family = Family::cnn;
  std::vector<LayerSpec> layers;
  int num_classes = 0;
  std::array<int, 3> input_shape{1, 8, 8};  // channels, height, width
  /// Patch edge for vit family; inputs are cut into non-overlapping patches.
  int patch = 0;

  const LayerSpec& layer(const std::string& name) const;
  bool operator==(const ArchSpec&) const = default;
};

struct TensorKey {
  std::string layer;
  Role role = Role::weight;
  auto operator<=>(const TensorKey&) const = default;
  std::string str() const { return layer + "." + to_string(role); }
};

/// Named parameter tensors of one network.
struct WeightSet {
  std::shared_ptr<const ArchSpec> arch;
  std::map<TensorKey, Tensor> tensors;

  const Tensor& at(const std::string& layer, Role role) const;
  Tensor& at(const std::string& layer, Role role);
  std::size_t scalar_count() const;
};

struct Batch {
  Tensor inputs;  // [B, C, H, W]
  std::vector<int> labels;
  int size() const { return inputs.rank() ? inputs.dim(0) : 0; }
};

/// Parameter-tensor roles and shapes a layer must carry.
std::vector<std::pair<Role, Shape>> layer_tensor_shapes(const LayerSpec& spec);

ArchSpec build_arch(Preset preset, int num_classes, std::array<int, 3> input_shape);
ArchSpec build_arch(const std::string& preset, int num_classes, std::array<int, 3> input_shape);
/// Throws StructuralError naming the first inconsistent layer.
void validate_arch(const ArchSpec& arch);
void validate_weights(const ArchSpec& arch, const WeightSet& weights);
std::size_t param_count(const ArchSpec& arch);

std::string arch_to_text(const ArchSpec& arch);
ArchSpec arch_from_text(const std::string& text);
/// Stable hash of the canonical text form.
std::string arch_fingerprint(const ArchSpec& arch);

WeightSet init_weights(std::shared_ptr<const ArchSpec> arch, Rng& rng);
WeightSet zero_weights(std::shared_ptr<const ArchSpec> arch);

template <typename T>
using WeightVars = std::map<TensorKey, ad::Var<T>>;

template <typename T>
WeightVars<T> bind_weights(ad::Graph<T>& g, const WeightSet& ws, bool requires_grad);

/// Logits [B, num_classes] as a differentiable function of the supplied weights.
template <typename T>
ad::Var<T> functional_forward(ad::Graph<T>& g, const ArchSpec& arch, const WeightVars<T>& weights, const Batch& batch);

/// Evaluation-only forward in the requested precision.
Tensor forward_logits(const ArchSpec& arch, const WeightSet& weights, const Batch& batch, bool double_precision = false);

}  // namespace mepl
