#include "mepl/codec.hpp"

#include <cmath>

namespace mepl {

std::pair<int, int> token_shape(const LayerSpec& l) {
  const int bias = l.has_bias ? 1 : 0;
  switch (l.kind) {
    case LayerKind::conv: return {l.n_output, l.kernel * l.kernel * l.n_input + bias};
    case LayerKind::fc: return {l.n_output, l.n_input + bias};
    case LayerKind::norm: return {l.n_output, 2};
    case LayerKind::attention: return {2 * l.d_k + 2 * l.d_v, l.heads * l.d_trans};
  }
  return {0, 0};
}

LayerKey layer_key(const LayerSpec& spec) { return {spec.kind, token_shape(spec).second}; }

std::vector<std::int64_t> token_source_index(const LayerSpec& l) {
  const auto [seq, d] = token_shape(l);
  std::vector<std::int64_t> idx(static_cast<std::size_t>(seq) * d);
  auto at = [&](int r, int c) -> std::int64_t& { return idx[static_cast<std::size_t>(r) * d + c]; };
  switch (l.kind) {
    case LayerKind::conv:
    case LayerKind::fc: {
      const int width = l.kind == LayerKind::conv ? l.kernel * l.kernel * l.n_input : l.n_input;
      for (int r = 0; r < seq; ++r) {
        for (int c = 0; c < width; ++c) at(r, c) = static_cast<std::int64_t>(r) * width + c;
        if (l.has_bias) at(r, width) = static_cast<std::int64_t>(seq) * width + r;
      }
      break;
    }
    case LayerKind::norm:
      for (int r = 0; r < seq; ++r) {
        at(r, 0) = r;
        at(r, 1) = seq + r;
      }
      break;
    case LayerKind::attention: {
      const std::int64_t h = l.heads, dt = l.d_trans, dk = l.d_k, dv = l.d_v;
      const std::int64_t off_k = h * dt * dk, off_v = 2 * h * dt * dk, off_o = off_v + h * dt * dv;
      for (int j = 0; j < seq; ++j)
        for (std::int64_t hh = 0; hh < h; ++hh)
          for (std::int64_t t = 0; t < dt; ++t) {
            std::int64_t src;
            if (j < dk) src = (hh * dt + t) * dk + j;
            else if (j < 2 * dk) src = off_k + (hh * dt + t) * dk + (j - dk);
            else if (j < 2 * dk + dv) src = off_v + (hh * dt + t) * dv + (j - 2 * dk);
            else src = off_o + (hh * dv + (j - 2 * dk - dv)) * dt + t;
            at(j, static_cast<int>(hh * dt + t)) = src;
          }
      break;
    }
  }
  return idx;
}

TokenMatrix tokenize_layer(const WeightSet& ws, const LayerSpec& spec) {
  std::vector<double> flat;
  for (const auto& [role, shape] : layer_tensor_shapes(spec)) {
    auto it = ws.tensors.find({spec.name, role});
    if (it == ws.tensors.end()) throw StructuralError("layer '" + spec.name + "': missing " + to_string(role) + " tensor");
    if (it->second.shape() != shape)
      throw StructuralError("layer '" + spec.name + "': " + to_string(role) + " has shape " +
                            shape_str(it->second.shape()) + ", expected " + shape_str(shape));
    flat.insert(flat.end(), it->second.vec().begin(), it->second.vec().end());
  }
  const auto [seq, d] = token_shape(spec);
  const auto idx = token_source_index(spec);
  TokenMatrix tm;
  tm.layer_kind = spec.kind;
  tm.layer_name = spec.name;
  tm.tokens = Tensor({seq, d});
  for (std::size_t i = 0; i < idx.size(); ++i) tm.tokens[i] = flat[static_cast<std::size_t>(idx[i])];
  return tm;
}

void detokenize_layer(const TokenMatrix& tm, const LayerSpec& spec, WeightSet& ws) {
  const auto [seq, d] = token_shape(spec);
  if (tm.tokens.shape() != Shape{seq, d})
    throw StructuralError("layer '" + spec.name + "': token matrix " + shape_str(tm.tokens.shape()) + " does not match (" +
                          std::to_string(seq) + "," + std::to_string(d) + ")");
  if (tm.layer_kind != spec.kind) throw StructuralError("layer '" + spec.name + "': token matrix kind mismatch");
  const auto idx = token_source_index(spec);
  std::vector<double> flat(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) flat[static_cast<std::size_t>(idx[i])] = tm.tokens[i];
  std::size_t off = 0;
  for (const auto& [role, shape] : layer_tensor_shapes(spec)) {
    const std::size_t n = shape_numel(shape);
    ws.tensors[{spec.name, role}] = Tensor(shape, std::vector<double>(flat.begin() + off, flat.begin() + off + n));
    off += n;
  }
}

std::vector<TokenMatrix> tokenize(const WeightSet& ws) {
  if (!ws.arch) throw StructuralError("weight set has no architecture attached");
  std::vector<TokenMatrix> out;
  for (const auto& l : ws.arch->layers) out.push_back(tokenize_layer(ws, l));
  return out;
}

WeightSet detokenize(const std::vector<TokenMatrix>& tms, std::shared_ptr<const ArchSpec> arch) {
  if (tms.size() != arch->layers.size()) throw StructuralError("token matrix count does not match layer count");
  WeightSet ws;
  for (std::size_t i = 0; i < tms.size(); ++i) detokenize_layer(tms[i], arch->layers[i], ws);
  ws.arch = std::move(arch);
  return ws;
}

template <typename T>
std::map<Role, ad::Var<T>> detokenize_vars(ad::Var<T> tokens, const LayerSpec& spec) {
  const auto [seq, d] = token_shape(spec);
  if (tokens.shape() != Shape{seq, d})
    throw StructuralError("layer '" + spec.name + "': generated tokens " + shape_str(tokens.shape()) + " do not match (" +
                          std::to_string(seq) + "," + std::to_string(d) + ")");
  const auto idx = token_source_index(spec);
  std::vector<std::int64_t> inverse(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) inverse[static_cast<std::size_t>(idx[i])] = static_cast<std::int64_t>(i);
  std::map<Role, ad::Var<T>> out;
  std::size_t off = 0;
  for (const auto& [role, shape] : layer_tensor_shapes(spec)) {
    const std::size_t n = shape_numel(shape);
    std::vector<std::int64_t> pick(inverse.begin() + off, inverse.begin() + off + n);
    out.emplace(role, ad::gather(tokens, std::move(pick), shape));
    off += n;
  }
  return out;
}

template std::map<Role, ad::Var<float>> detokenize_vars(ad::Var<float>, const LayerSpec&);
template std::map<Role, ad::Var<double>> detokenize_vars(ad::Var<double>, const LayerSpec&);

// ---------------------------------------------------------------- norm stats

const NormEntry& NormStats::at(const LayerKey& key) const {
  auto it = entries.find(key);
  if (it == entries.end()) throw ConfigError("no normalization statistics for layer key " + key.str());
  return it->second;
}

NormStats fit_norm_stats(const std::vector<WeightSet>& teachers) {
  if (teachers.empty()) throw ConfigError("cannot fit normalization statistics on an empty pool");
  struct Acc {
    std::vector<double> sum, sq;
    std::size_t rows = 0;
  };
  std::map<LayerKey, Acc> acc;
  std::vector<std::vector<TokenMatrix>> all;
  for (const auto& t : teachers) all.push_back(tokenize(t));
  for (const auto& tms : all)
    for (const auto& tm : tms) {
      auto& a = acc[tm.key()];
      const int d = tm.d_layer();
      a.sum.resize(d, 0.0);
      for (int r = 0; r < tm.seq_len(); ++r)
        for (int c = 0; c < d; ++c) a.sum[c] += tm.tokens.at(r, c);
      a.rows += tm.seq_len();
    }
  for (const auto& tms : all)
    for (const auto& tm : tms) {
      auto& a = acc[tm.key()];
      const int d = tm.d_layer();
      a.sq.resize(d, 0.0);
      for (int r = 0; r < tm.seq_len(); ++r)
        for (int c = 0; c < d; ++c) {
          const double dv = tm.tokens.at(r, c) - a.sum[c] / static_cast<double>(a.rows);
          a.sq[c] += dv * dv;
        }
    }
  NormStats stats;
  for (const auto& [key, a] : acc) {
    NormEntry e;
    for (std::size_t c = 0; c < a.sum.size(); ++c) {
      e.mean.push_back(a.sum[c] / static_cast<double>(a.rows));
      e.std.push_back(std::max(std::sqrt(a.sq[c] / static_cast<double>(a.rows)), kNormStdFloor));
    }
    stats.entries[key] = std::move(e);
  }
  return stats;
}

namespace {

const NormEntry& checked_entry(const TokenMatrix& tm, const NormStats& stats) {
  const NormEntry& e = stats.at(tm.key());
  if (e.mean.size() != static_cast<std::size_t>(tm.d_layer()) || e.std.size() != e.mean.size())
    throw StructuralError("normalization statistics for " + tm.key().str() + " have the wrong width");
  return e;
}

}  // namespace

TokenMatrix apply_norm(const TokenMatrix& tm, const NormStats& stats) {
  const NormEntry& e = checked_entry(tm, stats);
  TokenMatrix out = tm;
  for (int r = 0; r < tm.seq_len(); ++r)
    for (int c = 0; c < tm.d_layer(); ++c) out.tokens.at(r, c) = (tm.tokens.at(r, c) - e.mean[c]) / e.std[c];
  return out;
}

TokenMatrix invert_norm(const TokenMatrix& tm, const NormStats& stats) {
  const NormEntry& e = checked_entry(tm, stats);
  TokenMatrix out = tm;
  for (int r = 0; r < tm.seq_len(); ++r)
    for (int c = 0; c < tm.d_layer(); ++c) out.tokens.at(r, c) = tm.tokens.at(r, c) * e.std[c] + e.mean[c];
  return out;
}

// ---------------------------------------------------------------- dictionary

Dictionary::Dictionary(const ArchSpec& arch, int d_model) : d_model_(d_model) {
  if (d_model < 1) throw ConfigError("d_model must be positive");
  for (const auto& l : arch.layers) {
    const LayerKey key = layer_key(l);
    if (entries_.count(key)) continue;
    const std::string p = "dict." + key.str();
    entries_.emplace(key, DictionaryEntry{key, p + ".in_w", p + ".in_b", p + ".out_w", p + ".out_b"});
  }
}

const DictionaryEntry& Dictionary::entry(const LayerKey& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw ConfigError("weight dictionary has no entry for layer key " + key.str());
  return it->second;
}

void Dictionary::init_params(ParamStore& store, Rng& rng) const {
  for (const auto& [key, e] : entries_) {
    Tensor in_w({key.d_layer, d_model_}), out_w({d_model_, key.d_layer});
    const double s_in = 1.0 / std::sqrt(static_cast<double>(key.d_layer));
    const double s_out = 1.0 / std::sqrt(static_cast<double>(d_model_));
    for (auto& v : in_w.vec()) v = s_in * rng.normal();
    for (auto& v : out_w.vec()) v = s_out * rng.normal();
    store.tensors[e.in_weight] = std::move(in_w);
    store.tensors[e.in_bias] = Tensor({d_model_});
    store.tensors[e.out_weight] = std::move(out_w);
    store.tensors[e.out_bias] = Tensor({key.d_layer});
  }
}

template <typename T>
ad::Var<T> embed_tokens(ad::Var<T> tokens, const DictionaryEntry& e, const BoundParams<T>& params) {
  if (tokens.shape().size() != 2 || tokens.shape()[1] != e.key.d_layer)
    throw StructuralError("embed_tokens: tokens " + shape_str(tokens.shape()) + " do not match key " + e.key.str());
  return ad::add_bias(ad::matmul(tokens, param_var(params, e.in_weight)), param_var(params, e.in_bias));
}

template <typename T>
ad::Var<T> project_tokens(ad::Var<T> hidden, const DictionaryEntry& e, const BoundParams<T>& params) {
  return ad::add_bias(ad::matmul(hidden, param_var(params, e.out_weight)), param_var(params, e.out_bias));
}

template ad::Var<float> embed_tokens(ad::Var<float>, const DictionaryEntry&, const BoundParams<float>&);
template ad::Var<double> embed_tokens(ad::Var<double>, const DictionaryEntry&, const BoundParams<double>&);
template ad::Var<float> project_tokens(ad::Var<float>, const DictionaryEntry&, const BoundParams<float>&);
template ad::Var<double> project_tokens(ad::Var<double>, const DictionaryEntry&, const BoundParams<double>&);

Tensor embed_tokens(const TokenMatrix& tm, const Dictionary& dict, const ParamStore& params) {
  const DictionaryEntry& e = dict.entry(tm.key());
  ad::Graph<double> g;
  auto bound = bind_params<double>(g, params, false);
  return g.value(embed_tokens(g.constant(tm.tokens), e, bound));
}

TokenMatrix project_tokens(const Tensor& hidden, const Dictionary& dict, const LayerKey& key, const ParamStore& params) {
  const DictionaryEntry& e = dict.entry(key);
  ad::Graph<double> g;
  auto bound = bind_params<double>(g, params, false);
  TokenMatrix tm;
  tm.layer_kind = key.kind;
  tm.tokens = g.value(project_tokens(g.constant(hidden), e, bound));
  return tm;
}

}  // namespace mepl
