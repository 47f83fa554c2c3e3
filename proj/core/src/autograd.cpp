#include "mepl/autograd.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <memory>

namespace mepl::ad {

namespace {

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

void require(bool ok, const std::string& msg) {
  if (!ok) throw StructuralError(msg);
}

template <typename T>
void check_same(Var<T> a, Var<T> b, const char* op) {
  require(a.graph == b.graph, std::string(op) + ": operands from different graphs");
  require(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T>
void require_rank2(Var<T> a, const char* op) {
  require(a.shape().size() == 2, std::string(op) + ": expected rank-2 tensor, got " + shape_str(a.shape()));
}

// Adds `f(i)` into grad of node `id` for every element, when that node needs a gradient.
template <typename T, typename F>
void accumulate(Graph<T>& g, int id, F&& f) {
  if (!g.requires_grad(id)) return;
  TensorT<T>& gr = g.grad_mut(id);
  const std::size_t n = gr.size();
  for (std::size_t i = 0; i < n; ++i) gr[i] += f(i);
}

}  // namespace

// ---------------------------------------------------------------- Graph

template <typename T>
Var<T> Graph<T>::constant(TensorT<T> value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var<T> Graph<T>::param(TensorT<T> value) {
  nodes_.push_back(Node{std::move(value), {}, {}, true});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var<T> Graph<T>::push(TensorT<T> value, const std::vector<int>& inputs, BackFn back) {
  bool rg = false;
  for (int id : inputs) rg = rg || nodes_[id].requires_grad;
  nodes_.push_back(Node{std::move(value), {}, rg ? std::move(back) : BackFn{}, rg});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var<T> Graph<T>::push(TensorT<T> value, std::initializer_list<int> inputs, BackFn back) {
  return push(std::move(value), std::vector<int>(inputs), std::move(back));
}

template <typename T>
TensorT<T>& Graph<T>::grad_mut(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() != n.value.size()) n.grad = TensorT<T>(n.value.shape());
  return n.grad;
}

template <typename T>
TensorT<T> Graph<T>::grad(Var<T> v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.size() != n.value.size()) return TensorT<T>(n.value.shape());
  return n.grad;
}

template <typename T>
void Graph<T>::backward(Var<T> root) {
  require(root.graph == this, "backward: root from another graph");
  require(nodes_[root.id].value.size() == 1, "backward: root must be a scalar");
  for (auto& n : nodes_) n.grad = TensorT<T>();
  grad_mut(root.id)[0] = T(1);
  for (int id = root.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (n.back && n.grad.size() == n.value.size()) n.back(*this, id);
  }
}

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  check_same(a, b, "add");
  TensorT<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.graph->push(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Graph<T>& g, int o) {
    const auto& go = g.grad_at(o);
    accumulate(g, a, [&](std::size_t i) { return go[i]; });
    accumulate(g, b, [&](std::size_t i) { return go[i]; });
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  check_same(a, b, "sub");
  TensorT<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.graph->push(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Graph<T>& g, int o) {
    const auto& go = g.grad_at(o);
    accumulate(g, a, [&](std::size_t i) { return go[i]; });
    accumulate(g, b, [&](std::size_t i) { return -go[i]; });
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  check_same(a, b, "mul");
  TensorT<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.graph->push(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Graph<T>& g, int o) {
    const auto& go = g.grad_at(o);
    const auto& av = g.value_at(a);
    const auto& bv = g.value_at(b);
    accumulate(g, a, [&](std::size_t i) { return go[i] * bv[i]; });
    accumulate(g, b, [&](std::size_t i) { return go[i] * av[i]; });
  });
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
  TensorT<T> out = a.value();
  for (auto& v : out.vec()) v *= c;
  return a.graph->push(std::move(out), {a.id}, [a = a.id, c](Graph<T>& g, int o) {
    const auto& go = g.grad_at(o);
    accumulate(g, a, [&](std::size_t i) { return go[i] * c; });
  });
}

template <typename T>
Var<T> add_const(Var<T> a, const TensorT<T>& c) {
  require(a.shape() == c.shape(), "add_const: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(c.shape()));
  TensorT<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += c[i];
  return a.graph->push(std::move(out), {a.id}, [a = a.id](Graph<T>& g, int o) {
    const auto& go = g.grad_at(o);
    accumulate(g, a, [&](std::size_t i) { return go[i]; });
  });
}

template <typename T>
Var<T> mul_const(Var<T> a, const TensorT<T>& c) {
  require(a.shape() == c.shape(), "mul_const: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(c.shape()));
  TensorT<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c[i];
  return a.graph->push(std::move(out), {a.id}, [a = a.id, c](Graph<T>& g, int o) {
    const auto& go = g.grad_at(o);
    accumulate(g, a, [&](std::size_t i) { return go[i] * c[i]; });
  });
}

template <typename T>
Var<T> add_bias(Var<T> a, Var<T> b) {
  require(b.shape().size() == 1, "add_bias: bias must be rank 1, got " + shape_str(b.shape()));
  require(!a.shape().empty() && a.shape().back() == b.shape()[0],
          "add_bias: last dim of " + shape_str(a.shape()) + " does not match bias " + shape_str(b.shape()));
  const std::size_t n = b.shape()[0];
  TensorT<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % n];
  return a.graph->push(std::move(out), {a.id, b.id}, [a = a.id, b = b.id, n](Graph<T>& g, int o) {
    const auto& go = g.grad_at(o);
    accumulate(g, a, [&](std::size_t i) { return go[i]; });
    if (g.requires_grad(b)) {
      auto& gb = g.grad_mut(b);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i % n] += go[i];
    }
  });
}

template <typename T>
Var<T> relu(Var<T> a) {
  TensorT<T> out = a.value();
  for (auto& v : out.vec()) v = v > T(0) ? v : T(0);
  return a.graph->push(std::move(out), {a.id}, [a = a.id](Graph<T>& g, int o) {
    const auto& go = g.grad_at(o);
    const auto& av = g.value_at(a);
    accumulate(g, a, [&](std::size_t i) { return av[i] > T(0) ? go[i] : T(0); });
  });
}

template <typename T>
Var<T> exp(Var<T> a) {
  TensorT<T> out = a.value();
  for (auto& v : out.vec()) v = std::exp(v);
  return a.graph->push(std::move(out), {a.id}, [a = a.id](Graph<T>& g, int o) {
    const auto& go = g.grad_at(o);
    const auto& ov = g.value_at(o);
    accumulate(g, a, [&](std::size_t i) { return go[i] * ov[i]; });
  });
}

template <typename T>
Var<T> square(Var<T> a) {
  TensorT<T> out = a.value();
  for (auto& v : out.vec()) v = v * v;
  return a.graph->push(std::move(out), {a.id}, [a = a.id](Graph<T>& g, int o) {
    const auto& go = g.grad_at(o);
    const auto& av = g.value_at(a);
    accumulate(g, a, [&](std::size_t i) { return T(2) * av[i] * go[i]; });
  });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  TensorT<T> out = a.value().reshaped(std::move(shape));
  return a.graph->push(std::move(out), {a.id}, [a = a.id](Graph<T>& g, int o) {
    const auto& go = g.grad_at(o);
    accumulate(g, a, [&](std::size_t i) { return go[i]; });
  });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  require_rank2(a, "transpose");
  return permute(a, {1, 0});
}

template <typename T>
Var<T> permute(Var<T> a, std::vector<int> perm) {
  const Shape& in = a.shape();
  const std::size_t r = in.size();
  require(perm.size() == r && r >= 1 && r <= 4, "permute: bad permutation for " + shape_str(in));
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in[perm[i]];
  std::vector<std::int64_t> in_strides(r, 1);
  for (int i = static_cast<int>(r) - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * in[i + 1];
  // Build the flat gather index once; gather handles values and grads.
  std::vector<std::int64_t> index(shape_numel(out_shape));
  std::vector<int> idx(r, 0);
  for (std::size_t flat = 0; flat < index.size(); ++flat) {
    std::int64_t src = 0;
    for (std::size_t d = 0; d < r; ++d) src += idx[d] * in_strides[perm[d]];
    index[flat] = src;
    for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  return gather(a, std::move(index), std::move(out_shape));
}

template <typename T>
Var<T> gather(Var<T> a, std::vector<std::int64_t> index, Shape out_shape) {
  require(index.size() == shape_numel(out_shape), "gather: index count does not match output shape");
  const auto& av = a.value();
  TensorT<T> out(out_shape);
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] >= 0 && static_cast<std::size_t>(index[i]) < av.size(), "gather: index out of range");
    out[i] = av[static_cast<std::size_t>(index[i])];
  }
  return a.graph->push(std::move(out), {a.id}, [a = a.id, index = std::move(index)](Graph<T>& g, int o) {
    if (!g.requires_grad(a)) return;
    const auto& go = g.grad_at(o);
    auto& ga = g.grad_mut(a);
    for (std::size_t i = 0; i < index.size(); ++i) ga[static_cast<std::size_t>(index[i])] += go[i];
  });
}

template <typename T>
Var<T> slice_rows(Var<T> a, int begin, int count) {
  require_rank2(a, "slice_rows");
  const int rows = a.shape()[0], cols = a.shape()[1];
  require(begin >= 0 && count >= 0 && begin + count <= rows, "slice_rows: range out of bounds");
  const auto& av = a.value();
  std::vector<T> data(av.data() + static_cast<std::size_t>(begin) * cols,
                      av.data() + static_cast<std::size_t>(begin + count) * cols);
  TensorT<T> out({count, cols}, std::move(data));
  return a.graph->push(std::move(out), {a.id}, [a = a.id, begin, cols](Graph<T>& g, int o) {
    if (!g.requires_grad(a)) return;
    const auto& go = g.grad_at(o);
    auto& ga = g.grad_mut(a);
    const std::size_t off = static_cast<std::size_t>(begin) * cols;
    for (std::size_t i = 0; i < go.size(); ++i) ga[off + i] += go[i];
  });
}

template <typename T>
Var<T> slice_cols(Var<T> a, int begin, int count) {
  require_rank2(a, "slice_cols");
  const int rows = a.shape()[0], cols = a.shape()[1];
  require(begin >= 0 && count >= 0 && begin + count <= cols, "slice_cols: range out of bounds");
  const auto& av = a.value();
  TensorT<T> out({rows, count});
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < count; ++c) out.at(r, c) = av.at(r, begin + c);
  return a.graph->push(std::move(out), {a.id}, [a = a.id, begin, rows, count](Graph<T>& g, int o) {
    if (!g.requires_grad(a)) return;
    const auto& go = g.grad_at(o);
    auto& ga = g.grad_mut(a);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < count; ++c) ga.at(r, begin + c) += go.at(r, c);
  });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const int cols = parts[0].shape().at(1);
  int rows = 0;
  std::vector<int> ids;
  for (const auto& p : parts) {
    require_rank2(p, "concat_rows");
    require(p.shape()[1] == cols, "concat_rows: column mismatch");
    require(p.graph == parts[0].graph, "concat_rows: operands from different graphs");
    rows += p.shape()[0];
    ids.push_back(p.id);
  }
  std::vector<T> data;
  data.reserve(static_cast<std::size_t>(rows) * cols);
  for (const auto& p : parts) data.insert(data.end(), p.value().vec().begin(), p.value().vec().end());
  TensorT<T> out({rows, cols}, std::move(data));
  return parts[0].graph->push(std::move(out), ids, [ids](Graph<T>& g, int o) {
    const auto& go = g.grad_at(o);
    std::size_t off = 0;
    for (int id : ids) {
      const std::size_t n = g.value_at(id).size();
      if (g.requires_grad(id)) {
        auto& gi = g.grad_mut(id);
        for (std::size_t i = 0; i < n; ++i) gi[i] += go[off + i];
      }
      off += n;
    }
  });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const int rows = parts[0].shape().at(0);
  int cols = 0;
  std::vector<int> ids;
  for (const auto& p : parts) {
    require_rank2(p, "concat_cols");
    require(p.shape()[0] == rows, "concat_cols: row mismatch");
    cols += p.shape()[1];
    ids.push_back(p.id);
  }
  TensorT<T> out({rows, cols});
  int c0 = 0;
  for (const auto& p : parts) {
    const auto& pv = p.value();
    const int pc = p.shape()[1];
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < pc; ++c) out.at(r, c0 + c) = pv.at(r, c);
    c0 += pc;
  }
  return parts[0].graph->push(std::move(out), ids, [ids, rows](Graph<T>& g, int o) {
    const auto& go = g.grad_at(o);
    int c0 = 0;
    for (int id : ids) {
      const int pc = g.value_at(id).shape()[1];
      if (g.requires_grad(id)) {
        auto& gi = g.grad_mut(id);
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < pc; ++c) gi.at(r, c) += go.at(r, c0 + c);
      }
      c0 += pc;
    }
  });
}

// ---------------------------------------------------------------- reductions

template <typename T>
Var<T> sum(Var<T> a) {
  T s = 0;
  for (T v : a.value().vec()) s += v;
  return a.graph->push(TensorT<T>({}, std::vector<T>{s}), {a.id}, [a = a.id](Graph<T>& g, int o) {
    const T go = g.grad_at(o)[0];
    accumulate(g, a, [&](std::size_t) { return go; });
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  const T n = static_cast<T>(a.value().size());
  return scale(sum(a), T(1) / n);
}

template <typename T>
Var<T> mean_groups(Var<T> a, int groups) {
  require_rank2(a, "mean_groups");
  const int rows = a.shape()[0], cols = a.shape()[1];
  require(groups > 0 && rows % groups == 0, "mean_groups: rows not divisible by groups");
  const int per = rows / groups;
  const auto& av = a.value();
  TensorT<T> out({groups, cols});
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out.at(r / per, c) += av.at(r, c) / T(per);
  return a.graph->push(std::move(out), {a.id}, [a = a.id, rows, cols, per](Graph<T>& g, int o) {
    if (!g.requires_grad(a)) return;
    const auto& go = g.grad_at(o);
    auto& ga = g.grad_mut(a);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) ga.at(r, c) += go.at(r / per, c) / T(per);
  });
}

// ---------------------------------------------------------------- linear algebra / nn

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  require(b.shape()[0] == k, "matmul: inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  TensorT<T> out({m, n});
  MatMap<T>(out.data(), m, n).noalias() = ConstMatMap<T>(a.value().data(), m, k) * ConstMatMap<T>(b.value().data(), k, n);
  return a.graph->push(std::move(out), {a.id, b.id}, [a = a.id, b = b.id, m, k, n](Graph<T>& g, int o) {
    ConstMatMap<T> go(g.grad_at(o).data(), m, n);
    if (g.requires_grad(a)) {
      MatMap<T>(g.grad_mut(a).data(), m, k).noalias() += go * ConstMatMap<T>(g.value_at(b).data(), k, n).transpose();
    }
    if (g.requires_grad(b)) {
      MatMap<T>(g.grad_mut(b).data(), k, n).noalias() += ConstMatMap<T>(g.value_at(a).data(), m, k).transpose() * go;
    }
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  require_rank2(x, "layer_norm");
  const int rows = x.shape()[0], cols = x.shape()[1];
  require(gamma.shape() == Shape{cols} && beta.shape() == Shape{cols}, "layer_norm: affine shape mismatch");
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  TensorT<T> out({rows, cols});
  // xhat and 1/sigma per row are recomputed in backward from stored input.
  for (int r = 0; r < rows; ++r) {
    T mu = 0;
    for (int c = 0; c < cols; ++c) mu += xv.at(r, c);
    mu /= T(cols);
    T var = 0;
    for (int c = 0; c < cols; ++c) var += (xv.at(r, c) - mu) * (xv.at(r, c) - mu);
    var /= T(cols);
    const T inv = T(1) / std::sqrt(var + eps);
    for (int c = 0; c < cols; ++c) out.at(r, c) = (xv.at(r, c) - mu) * inv * gv[c] + bv[c];
  }
  return x.graph->push(std::move(out), {x.id, gamma.id, beta.id},
                       [x = x.id, gm = gamma.id, bt = beta.id, rows, cols, eps](Graph<T>& g, int o) {
                         const auto& go = g.grad_at(o);
                         const auto& xv = g.value_at(x);
                         const auto& gv = g.value_at(gm);
                         std::vector<T> xhat(cols), dxhat(cols);
                         for (int r = 0; r < rows; ++r) {
                           T mu = 0;
                           for (int c = 0; c < cols; ++c) mu += xv.at(r, c);
                           mu /= T(cols);
                           T var = 0;
                           for (int c = 0; c < cols; ++c) var += (xv.at(r, c) - mu) * (xv.at(r, c) - mu);
                           var /= T(cols);
                           const T inv = T(1) / std::sqrt(var + eps);
                           T sum_d = 0, sum_dx = 0;
                           for (int c = 0; c < cols; ++c) {
                             xhat[c] = (xv.at(r, c) - mu) * inv;
                             dxhat[c] = go.at(r, c) * gv[c];
                             sum_d += dxhat[c];
                             sum_dx += dxhat[c] * xhat[c];
                           }
                           if (g.requires_grad(x)) {
                             auto& gx = g.grad_mut(x);
                             for (int c = 0; c < cols; ++c)
                               gx.at(r, c) += inv / T(cols) * (T(cols) * dxhat[c] - sum_d - xhat[c] * sum_dx);
                           }
                           if (g.requires_grad(gm)) {
                             auto& gg = g.grad_mut(gm);
                             for (int c = 0; c < cols; ++c) gg[c] += go.at(r, c) * xhat[c];
                           }
                           if (g.requires_grad(bt)) {
                             auto& gb = g.grad_mut(bt);
                             for (int c = 0; c < cols; ++c) gb[c] += go.at(r, c);
                           }
                         }
                       });
}

template <typename T>
Var<T> log_softmax(Var<T> a) {
  require_rank2(a, "log_softmax");
  const int rows = a.shape()[0], cols = a.shape()[1];
  const auto& av = a.value();
  TensorT<T> out({rows, cols});
  for (int r = 0; r < rows; ++r) {
    T mx = -std::numeric_limits<T>::infinity();
    for (int c = 0; c < cols; ++c) mx = std::max(mx, av.at(r, c));
    T s = 0;
    for (int c = 0; c < cols; ++c) s += std::exp(av.at(r, c) - mx);
    const T lse = mx + std::log(s);
    for (int c = 0; c < cols; ++c) out.at(r, c) = av.at(r, c) - lse;
  }
  return a.graph->push(std::move(out), {a.id}, [a = a.id, rows, cols](Graph<T>& g, int o) {
    if (!g.requires_grad(a)) return;
    const auto& go = g.grad_at(o);
    const auto& ov = g.value_at(o);
    auto& ga = g.grad_mut(a);
    for (int r = 0; r < rows; ++r) {
      T s = 0;
      for (int c = 0; c < cols; ++c) s += go.at(r, c);
      for (int c = 0; c < cols; ++c) ga.at(r, c) += go.at(r, c) - std::exp(ov.at(r, c)) * s;
    }
  });
}

template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, int batch, int heads) {
  require_rank2(q, "attention");
  require(q.shape() == k.shape(), "attention: query/key shape mismatch");
  require(v.shape()[0] == q.shape()[0], "attention: value rows mismatch");
  const int rows = q.shape()[0];
  require(batch > 0 && rows % batch == 0, "attention: rows not divisible by batch");
  require(heads > 0 && q.shape()[1] % heads == 0 && v.shape()[1] % heads == 0, "attention: width not divisible by heads");
  const int seq = rows / batch;
  const int dk = q.shape()[1] / heads, dv = v.shape()[1] / heads;
  const int qw = q.shape()[1], vw = v.shape()[1];
  const T sc = T(1) / std::sqrt(static_cast<T>(dk));

  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Stride = Eigen::OuterStride<>;
  using Block = Eigen::Map<const Mat, 0, Stride>;
  using MBlock = Eigen::Map<Mat, 0, Stride>;

  // Softmax probabilities kept for backward: [batch, heads, seq, seq].
  auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(batch) * heads * seq * seq);
  TensorT<T> out({rows, vw});
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      Block Q(q.value().data() + static_cast<std::size_t>(b) * seq * qw + h * dk, seq, dk, Stride(qw));
      Block K(k.value().data() + static_cast<std::size_t>(b) * seq * qw + h * dk, seq, dk, Stride(qw));
      Block V(v.value().data() + static_cast<std::size_t>(b) * seq * vw + h * dv, seq, dv, Stride(vw));
      Eigen::Map<Mat> P(probs->data() + (static_cast<std::size_t>(b) * heads + h) * seq * seq, seq, seq);
      P.noalias() = (Q * K.transpose()) * sc;
      for (int i = 0; i < seq; ++i) {
        const T mx = P.row(i).maxCoeff();
        P.row(i) = (P.row(i).array() - mx).exp();
        P.row(i) /= P.row(i).sum();
      }
      MBlock O(out.data() + static_cast<std::size_t>(b) * seq * vw + h * dv, seq, dv, Stride(vw));
      O.noalias() = P * V;
    }
  }
  return q.graph->push(
      std::move(out), {q.id, k.id, v.id},
      [q = q.id, k = k.id, v = v.id, probs, batch, heads, seq, dk, dv, qw, vw, sc](Graph<T>& g, int o) {
        const auto& go = g.grad_at(o);
        const bool gq = g.requires_grad(q), gk = g.requires_grad(k), gvr = g.requires_grad(v);
        T* dq = gq ? g.grad_mut(q).data() : nullptr;
        T* dkp = gk ? g.grad_mut(k).data() : nullptr;
        T* dvp = gvr ? g.grad_mut(v).data() : nullptr;
        Mat dP(seq, seq), dS(seq, seq);
        for (int b = 0; b < batch; ++b) {
          for (int h = 0; h < heads; ++h) {
            const std::size_t qoff = static_cast<std::size_t>(b) * seq * qw + h * dk;
            const std::size_t voff = static_cast<std::size_t>(b) * seq * vw + h * dv;
            Block Q(g.value_at(q).data() + qoff, seq, dk, Stride(qw));
            Block K(g.value_at(k).data() + qoff, seq, dk, Stride(qw));
            Block V(g.value_at(v).data() + voff, seq, dv, Stride(vw));
            Block dO(go.data() + voff, seq, dv, Stride(vw));
            Eigen::Map<const Mat> P(probs->data() + (static_cast<std::size_t>(b) * heads + h) * seq * seq, seq, seq);
            if (dvp) MBlock(dvp + voff, seq, dv, Stride(vw)).noalias() += P.transpose() * dO;
            dP.noalias() = dO * V.transpose();
            for (int i = 0; i < seq; ++i) {
              const T dot = P.row(i).dot(dP.row(i));
              dS.row(i) = P.row(i).array() * (dP.row(i).array() - dot);
            }
            dS *= sc;
            if (dq) MBlock(dq + qoff, seq, dk, Stride(qw)).noalias() += dS * K;
            if (dkp) MBlock(dkp + qoff, seq, dk, Stride(qw)).noalias() += dS.transpose() * Q;
          }
        }
      });
}

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> bias, int stride, int padding) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  require(xs.size() == 4, "conv2d: input must be [B,C,H,W], got " + shape_str(xs));
  require(ws.size() == 4 && ws[2] == ws[3], "conv2d: weight must be [O,C,k,k], got " + shape_str(ws));
  require(ws[1] == xs[1], "conv2d: input channels " + std::to_string(xs[1]) + " vs weight " + shape_str(ws));
  const int B = xs[0], C = xs[1], H = xs[2], W = xs[3], O = ws[0], K = ws[2];
  const int OH = (H + 2 * padding - K) / stride + 1, OW = (W + 2 * padding - K) / stride + 1;
  require(OH > 0 && OW > 0, "conv2d: empty output");
  const bool has_bias = bias.valid();
  if (has_bias) require(bias.shape() == Shape{O}, "conv2d: bias shape " + shape_str(bias.shape()));
  const int ckk = C * K * K, P = OH * OW;

  // im2col per image: cols [ckk, P]; out[b] = W[O, ckk] * cols.
  auto cols = std::make_shared<std::vector<T>>(static_cast<std::size_t>(B) * ckk * P, T(0));
  const auto& xv = x.value();
  for (int b = 0; b < B; ++b) {
    T* cb = cols->data() + static_cast<std::size_t>(b) * ckk * P;
    for (int c = 0; c < C; ++c)
      for (int ki = 0; ki < K; ++ki)
        for (int kj = 0; kj < K; ++kj) {
          const int row = (c * K + ki) * K + kj;
          for (int oy = 0; oy < OH; ++oy) {
            const int iy = oy * stride - padding + ki;
            if (iy < 0 || iy >= H) continue;
            for (int ox = 0; ox < OW; ++ox) {
              const int ix = ox * stride - padding + kj;
              if (ix < 0 || ix >= W) continue;
              cb[static_cast<std::size_t>(row) * P + oy * OW + ox] =
                  xv[((static_cast<std::size_t>(b) * C + c) * H + iy) * W + ix];
            }
          }
        }
  }
  TensorT<T> out({B, O, OH, OW});
  ConstMatMap<T> Wm(w.value().data(), O, ckk);
  for (int b = 0; b < B; ++b) {
    MatMap<T> ob(out.data() + static_cast<std::size_t>(b) * O * P, O, P);
    ob.noalias() = Wm * ConstMatMap<T>(cols->data() + static_cast<std::size_t>(b) * ckk * P, ckk, P);
    if (has_bias) ob.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(bias.value().data(), O);
  }
  std::vector<int> inputs{x.id, w.id};
  if (has_bias) inputs.push_back(bias.id);
  const int bid = has_bias ? bias.id : -1;
  return x.graph->push(std::move(out), inputs,
                       [x = x.id, w = w.id, bid, cols, B, C, H, W, O, K, OH, OW, ckk, P, stride, padding](Graph<T>& g,
                                                                                                        int o) {
                         const auto& go = g.grad_at(o);
                         ConstMatMap<T> Wm(g.value_at(w).data(), O, ckk);
                         const bool gx = g.requires_grad(x);
                         std::vector<T> dcols(gx ? static_cast<std::size_t>(ckk) * P : 0);
                         for (int b = 0; b < B; ++b) {
                           ConstMatMap<T> gb(go.data() + static_cast<std::size_t>(b) * O * P, O, P);
                           if (g.requires_grad(w)) {
                             MatMap<T>(g.grad_mut(w).data(), O, ckk).noalias() +=
                                 gb * ConstMatMap<T>(cols->data() + static_cast<std::size_t>(b) * ckk * P, ckk, P).transpose();
                           }
                           if (bid >= 0 && g.requires_grad(bid)) {
                             Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(g.grad_mut(bid).data(), O) += gb.rowwise().sum();
                           }
                           if (gx) {
                             MatMap<T>(dcols.data(), ckk, P).noalias() = Wm.transpose() * gb;
                             auto& gxv = g.grad_mut(x);
                             for (int c = 0; c < C; ++c)
                               for (int ki = 0; ki < K; ++ki)
                                 for (int kj = 0; kj < K; ++kj) {
                                   const int row = (c * K + ki) * K + kj;
                                   for (int oy = 0; oy < OH; ++oy) {
                                     const int iy = oy * stride - padding + ki;
                                     if (iy < 0 || iy >= H) continue;
                                     for (int ox = 0; ox < OW; ++ox) {
                                       const int ix = ox * stride - padding + kj;
                                       if (ix < 0 || ix >= W) continue;
                                       gxv[((static_cast<std::size_t>(b) * C + c) * H + iy) * W + ix] +=
                                           dcols[static_cast<std::size_t>(row) * P + oy * OW + ox];
                                     }
                                   }
                                 }
                           }
                         }
                       });
}

template <typename T>
Var<T> channel_affine(Var<T> x, Var<T> scale_v, Var<T> shift_v, std::span<const double> mean_c,
                      std::span<const double> std_c) {
  const Shape& xs = x.shape();
  require(xs.size() == 4, "channel_affine: input must be [B,C,H,W], got " + shape_str(xs));
  const int B = xs[0], C = xs[1], HW = xs[2] * xs[3];
  require(scale_v.shape() == Shape{C} && shift_v.shape() == Shape{C}, "channel_affine: parameter shape mismatch");
  require(mean_c.size() == static_cast<std::size_t>(C) && std_c.size() == static_cast<std::size_t>(C),
          "channel_affine: statistics size mismatch");
  std::vector<T> mu(C), inv(C);
  for (int c = 0; c < C; ++c) {
    mu[c] = static_cast<T>(mean_c[c]);
    inv[c] = static_cast<T>(1.0 / std_c[c]);
  }
  const auto& xv = x.value();
  const auto& sv = scale_v.value();
  const auto& hv = shift_v.value();
  TensorT<T> out(xs);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < HW; ++i) {
        const std::size_t idx = (static_cast<std::size_t>(b) * C + c) * HW + i;
        out[idx] = (xv[idx] - mu[c]) * inv[c] * sv[c] + hv[c];
      }
  return x.graph->push(std::move(out), {x.id, scale_v.id, shift_v.id},
                       [x = x.id, s = scale_v.id, h = shift_v.id, mu, inv, B, C, HW](Graph<T>& g, int o) {
                         const auto& go = g.grad_at(o);
                         const auto& xv = g.value_at(x);
                         const auto& sv = g.value_at(s);
                         const bool gx = g.requires_grad(x), gs = g.requires_grad(s), gh = g.requires_grad(h);
                         for (int b = 0; b < B; ++b)
                           for (int c = 0; c < C; ++c)
                             for (int i = 0; i < HW; ++i) {
                               const std::size_t idx = (static_cast<std::size_t>(b) * C + c) * HW + i;
                               if (gx) g.grad_mut(x)[idx] += go[idx] * inv[c] * sv[c];
                               if (gs) g.grad_mut(s)[c] += go[idx] * (xv[idx] - mu[c]) * inv[c];
                               if (gh) g.grad_mut(h)[c] += go[idx];
                             }
                       });
}

template <typename T>
Var<T> maxpool2(Var<T> x) {
  const Shape& xs = x.shape();
  require(xs.size() == 4, "maxpool2: input must be [B,C,H,W], got " + shape_str(xs));
  const int B = xs[0], C = xs[1], H = xs[2], W = xs[3], OH = H / 2, OW = W / 2;
  require(OH > 0 && OW > 0, "maxpool2: spatial size too small");
  const auto& xv = x.value();
  TensorT<T> out({B, C, OH, OW});
  std::vector<std::int64_t> arg(out.size());
  for (int bc = 0; bc < B * C; ++bc)
    for (int oy = 0; oy < OH; ++oy)
      for (int ox = 0; ox < OW; ++ox) {
        std::int64_t best = (static_cast<std::int64_t>(bc) * H + 2 * oy) * W + 2 * ox;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const std::int64_t idx = (static_cast<std::int64_t>(bc) * H + 2 * oy + dy) * W + 2 * ox + dx;
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t oi = (static_cast<std::size_t>(bc) * OH + oy) * OW + ox;
        out[oi] = xv[best];
        arg[oi] = best;
      }
  return x.graph->push(std::move(out), {x.id}, [x = x.id, arg = std::move(arg)](Graph<T>& g, int o) {
    if (!g.requires_grad(x)) return;
    const auto& go = g.grad_at(o);
    auto& gx = g.grad_mut(x);
    for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += go[i];
  });
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> labels) {
  require_rank2(logits, "cross_entropy");
  const int rows = logits.shape()[0], cols = logits.shape()[1];
  require(static_cast<int>(labels.size()) == rows, "cross_entropy: label count does not match batch");
  for (int y : labels) {
    if (y < 0 || y >= cols) throw ConfigError("cross_entropy: label " + std::to_string(y) + " out of range");
  }
  auto lsm = log_softmax(logits);
  std::vector<std::int64_t> pick(rows);
  for (int r = 0; r < rows; ++r) pick[r] = static_cast<std::int64_t>(r) * cols + labels[r];
  return scale(mean(gather(lsm, std::move(pick), Shape{rows})), T(-1));
}

// ---------------------------------------------------------------- instantiations

#define MEPL_INSTANTIATE(T)                                                                                     \
  template class Graph<T>;                                                                                      \
  template Var<T> add(Var<T>, Var<T>);                                                                          \
  template Var<T> sub(Var<T>, Var<T>);                                                                          \
  template Var<T> mul(Var<T>, Var<T>);                                                                          \
  template Var<T> scale(Var<T>, T);                                                                             \
  template Var<T> add_const(Var<T>, const TensorT<T>&);                                                         \
  template Var<T> mul_const(Var<T>, const TensorT<T>&);                                                         \
  template Var<T> add_bias(Var<T>, Var<T>);                                                                     \
  template Var<T> relu(Var<T>);                                                                                 \
  template Var<T> exp(Var<T>);                                                                                  \
  template Var<T> square(Var<T>);                                                                               \
  template Var<T> reshape(Var<T>, Shape);                                                                       \
  template Var<T> transpose(Var<T>);                                                                            \
  template Var<T> permute(Var<T>, std::vector<int>);                                                            \
  template Var<T> gather(Var<T>, std::vector<std::int64_t>, Shape);                                             \
  template Var<T> slice_rows(Var<T>, int, int);                                                                 \
  template Var<T> slice_cols(Var<T>, int, int);                                                                 \
  template Var<T> concat_rows(const std::vector<Var<T>>&);                                                      \
  template Var<T> concat_cols(const std::vector<Var<T>>&);                                                      \
  template Var<T> sum(Var<T>);                                                                                  \
  template Var<T> mean(Var<T>);                                                                                 \
  template Var<T> mean_groups(Var<T>, int);                                                                     \
  template Var<T> matmul(Var<T>, Var<T>);                                                                       \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                                                        \
  template Var<T> log_softmax(Var<T>);                                                                          \
  template Var<T> attention(Var<T>, Var<T>, Var<T>, int, int);                                                  \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>, int, int);                                                     \
  template Var<T> channel_affine(Var<T>, Var<T>, Var<T>, std::span<const double>, std::span<const double>);     \
  template Var<T> maxpool2(Var<T>);                                                                             \
  template Var<T> cross_entropy(Var<T>, std::span<const int>);

MEPL_INSTANTIATE(float)
MEPL_INSTANTIATE(double)

#undef MEPL_INSTANTIATE

}  // namespace mepl::ad
