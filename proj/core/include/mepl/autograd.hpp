#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "mepl/tensor.hpp"

namespace mepl::ad {

template <typename T>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  int id = -1;

  bool valid() const noexcept { return graph != nullptr && id >= 0; }
  const TensorT<T>& value() const { return graph->value(*this); }
  Shape shape() const { return graph->value(*this).shape(); }
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so a reverse
/// sweep over the node list is a valid topological order for backprop.
template <typename T>
class Graph {
 public:
  using BackFn = std::function<void(Graph&, int)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(TensorT<T> value);
  Var<T> param(TensorT<T> value);

  const TensorT<T>& value(Var<T> v) const { return nodes_[v.id].value; }
  /// Gradient accumulated by the last backward(); zeros if the node received none.
  TensorT<T> grad(Var<T> v) const;
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  void backward(Var<T> root);
  std::size_t size() const noexcept { return nodes_.size(); }

  // Op plumbing.
  Var<T> push(TensorT<T> value, std::initializer_list<int> inputs, BackFn back);
  Var<T> push(TensorT<T> value, const std::vector<int>& inputs, BackFn back);
  const TensorT<T>& value_at(int id) const { return nodes_[id].value; }
  const TensorT<T>& grad_at(int id) const { return nodes_[id].grad; }
  TensorT<T>& grad_mut(int id);

 private:
  struct Node {
    TensorT<T> value;
    TensorT<T> grad;
    BackFn back;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

// ---- elementwise / structural ----
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T c);
template <typename T> Var<T> add_const(Var<T> a, const TensorT<T>& c);
template <typename T> Var<T> mul_const(Var<T> a, const TensorT<T>& c);
/// a[..., n] + b[n], broadcast over leading dims.
template <typename T> Var<T> add_bias(Var<T> a, Var<T> b);
template <typename T> Var<T> relu(Var<T> a);
template <typename T> Var<T> exp(Var<T> a);
template <typename T> Var<T> square(Var<T> a);
template <typename T> Var<T> reshape(Var<T> a, Shape shape);
template <typename T> Var<T> transpose(Var<T> a);
/// General axis permutation (rank <= 4).
template <typename T> Var<T> permute(Var<T> a, std::vector<int> perm);
/// out.flat[i] = a.flat[index[i]]; backward scatter-adds.
template <typename T> Var<T> gather(Var<T> a, std::vector<std::int64_t> index, Shape out_shape);
template <typename T> Var<T> slice_rows(Var<T> a, int begin, int count);
template <typename T> Var<T> slice_cols(Var<T> a, int begin, int count);
template <typename T> Var<T> concat_rows(const std::vector<Var<T>>& parts);
template <typename T> Var<T> concat_cols(const std::vector<Var<T>>& parts);

// ---- reductions ----
template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> mean(Var<T> a);
/// Row groups of size rows/groups averaged: [groups*s, d] -> [groups, d].
template <typename T> Var<T> mean_groups(Var<T> a, int groups);

// ---- linear algebra / nn ----
template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
template <typename T> Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps);
template <typename T> Var<T> log_softmax(Var<T> a);
/// Scaled dot-product attention over `batch` sequences laid out as
/// consecutive row blocks. q,k: [batch*seq, heads*dk], v: [batch*seq, heads*dv].
template <typename T> Var<T> attention(Var<T> q, Var<T> k, Var<T> v, int batch, int heads);
/// x: [B,C,H,W], w: [O,C,k,k], bias: [O] or invalid Var.
template <typename T> Var<T> conv2d(Var<T> x, Var<T> w, Var<T> bias, int stride, int padding);
/// Per-channel (x - mean) / std * scale + shift with frozen statistics.
template <typename T>
Var<T> channel_affine(Var<T> x, Var<T> scale, Var<T> shift, std::span<const double> mean, std::span<const double> stdev);
template <typename T> Var<T> maxpool2(Var<T> x);
/// Mean cross-entropy of logits [B,C] against integer labels.
template <typename T> Var<T> cross_entropy(Var<T> logits, std::span<const int> labels);

}  // namespace mepl::ad
