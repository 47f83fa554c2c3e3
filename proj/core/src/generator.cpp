#include "mepl/generator.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "mepl/io.hpp"

namespace mepl {

using json = nlohmann::json;

namespace {

int longest_layer_seq(const ArchSpec& arch) {
  int m = 0;
  for (const auto& l : arch.layers) m = std::max(m, token_shape(l).first);
  return m;
}

void fill_normal(Tensor& t, double sd, Rng& rng) {
  for (auto& v : t.vec()) v = sd * rng.normal();
}

std::string block_name(int i, const char* part) { return "enc" + std::to_string(i) + "." + part; }

LayerKey parse_layer_key(const std::string& s) {
  const auto us = s.rfind('_');
  if (us == std::string::npos) throw ConfigError("bad layer key '" + s + "'");
  return {layer_kind_from_string(s.substr(0, us)), std::stoi(s.substr(us + 1))};
}

}  // namespace

std::string generator_config_to_json(const GeneratorConfig& c) {
  json j;
  j["d_model"] = c.d_model;
  j["num_blocks"] = c.num_blocks;
  j["num_heads"] = c.num_heads;
  j["ffn_dim"] = c.ffn_dim;
  j["n_teachers"] = c.n_teachers;
  j["max_seq_len"] = c.max_seq_len;
  j["max_teachers"] = c.max_teachers;
  j["cutoff_rate"] = c.cutoff_rate;
  j["seed"] = c.seed;
  j["cross_layer"] = c.cross_layer;
  j["tie_model_ids"] = c.tie_model_ids;
  return j.dump();
}

GeneratorConfig generator_config_from_json(const std::string& text) {
  GeneratorConfig c;
  try {
    const json j = json::parse(text);
    c.d_model = j.value("d_model", c.d_model);
    c.num_blocks = j.value("num_blocks", c.num_blocks);
    c.num_heads = j.value("num_heads", c.num_heads);
    c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
    c.n_teachers = j.value("n_teachers", c.n_teachers);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    c.max_teachers = j.value("max_teachers", c.max_teachers);
    c.cutoff_rate = j.value("cutoff_rate", c.cutoff_rate);
    c.seed = j.value("seed", c.seed);
    c.cross_layer = j.value("cross_layer", c.cross_layer);
    c.tie_model_ids = j.value("tie_model_ids", c.tie_model_ids);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed generator config: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------- WeightFormer

WeightFormer::WeightFormer(GeneratorConfig config, std::shared_ptr<const ArchSpec> arch, NormStats stats)
    : config_(config), arch_(std::move(arch)), stats_(std::move(stats)) {
  const auto& c = config_;
  if (c.d_model < 1 || c.num_blocks < 0 || c.num_heads < 1 || c.ffn_dim < 1)
    throw ConfigError("generator dimensions must be positive");
  if (c.d_model % c.num_heads != 0) throw ConfigError("d_model must be divisible by num_heads");
  if (c.n_teachers < 1) throw ConfigError("n_teachers must be >= 1");
  if (c.max_teachers < c.n_teachers) throw ConfigError("max_teachers must be >= n_teachers");
  if (!(c.cutoff_rate >= 0.0 && c.cutoff_rate < 1.0)) throw ConfigError("cutoff_rate must lie in [0, 1)");
  const int needed = 1 + c.n_teachers * longest_layer_seq(*arch_);
  if (config_.max_seq_len == 0) config_.max_seq_len = needed;
  if (config_.max_seq_len < needed)
    throw ConfigError("max_seq_len " + std::to_string(config_.max_seq_len) + " < 1 + n_teachers * longest layer (" +
                      std::to_string(needed) + ")");
  for (const auto& l : arch_->layers) stats_.at(layer_key(l));

  dict_ = Dictionary(*arch_, c.d_model);
  Rng rng(c.seed, "init");
  const int d = c.d_model;
  dict_.init_params(params_, rng);
  Tensor cross({d}), pos({config_.max_seq_len, d}), ids({c.max_teachers, d});
  fill_normal(cross, 0.1, rng);
  fill_normal(pos, 0.1, rng);
  fill_normal(ids, 0.1, rng);
  params_.tensors["cross_init"] = std::move(cross);
  params_.tensors["pos_embed"] = std::move(pos);
  params_.tensors["model_id_embed"] = std::move(ids);
  for (int i = 0; i < c.num_blocks; ++i) {
    for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) {
      Tensor t({d, d});
      fill_normal(t, 1.0 / std::sqrt(static_cast<double>(d)), rng);
      params_.tensors[block_name(i, w)] = std::move(t);
    }
    for (const char* b : {"attn.bq", "attn.bk", "attn.bv", "attn.bo", "ln1.beta", "ln2.beta", "ffn.b2"})
      params_.tensors[block_name(i, b)] = Tensor({d});
    params_.tensors[block_name(i, "ln1.gamma")] = Tensor({d}, 1.0);
    params_.tensors[block_name(i, "ln2.gamma")] = Tensor({d}, 1.0);
    Tensor w1({d, c.ffn_dim}), w2({c.ffn_dim, d});
    fill_normal(w1, std::sqrt(2.0 / d), rng);
    fill_normal(w2, 1.0 / std::sqrt(static_cast<double>(c.ffn_dim)), rng);
    params_.tensors[block_name(i, "ffn.w1")] = std::move(w1);
    params_.tensors[block_name(i, "ffn.b1")] = Tensor({c.ffn_dim});
    params_.tensors[block_name(i, "ffn.w2")] = std::move(w2);
  }
}

void WeightFormer::save(const std::filesystem::path& path, const std::string& provenance_json) const {
  TensorContainer c;
  json meta;
  meta["kind"] = "generator";
  meta["config"] = json::parse(generator_config_to_json(config_));
  meta["arch"] = json::parse(arch_to_text(*arch_));
  c.meta = meta.dump();
  c.tensors = params_.tensors;
  for (const auto& [key, e] : stats_.entries) {
    std::vector<double> v = e.mean;
    v.insert(v.end(), e.std.begin(), e.std.end());
    c.tensors["normstats." + key.str()] = Tensor({2, static_cast<int>(e.mean.size())}, std::move(v));
  }
  save_container(path, c);

  json side;
  side["config"] = meta["config"];
  side["arch"] = meta["arch"];
  side["arch_fingerprint"] = arch_fingerprint(*arch_);
  side["parameter_count"] = parameter_count();
  try {
    side["provenance"] = json::parse(provenance_json);
  } catch (const json::exception&) {
    side["provenance"] = provenance_json;
  }
  write_text_atomic(std::filesystem::path(path.string() + ".json"), side.dump(2) + "\n");
}

WeightFormer WeightFormer::load(const std::filesystem::path& path) {
  TensorContainer c = load_container(path);
  json meta;
  try {
    meta = json::parse(c.meta);
  } catch (const json::exception& e) {
    throw ConfigError("bad generator checkpoint meta in " + path.string() + ": " + e.what());
  }
  if (meta.value("kind", "") != "generator") throw ConfigError(path.string() + " is not a generator checkpoint");
  auto arch = std::make_shared<ArchSpec>(arch_from_text(meta.at("arch").dump()));
  NormStats stats;
  ParamStore params;
  for (auto& [name, t] : c.tensors) {
    if (name.rfind("normstats.", 0) == 0) {
      if (t.rank() != 2 || t.dim(0) != 2) throw StructuralError("malformed normalization entry " + name);
      const auto& v = t.vec();
      const auto w = static_cast<std::ptrdiff_t>(t.dim(1));
      stats.entries[parse_layer_key(name.substr(10))] = {{v.begin(), v.begin() + w}, {v.begin() + w, v.end()}};
    } else {
      params.tensors.emplace(name, std::move(t));
    }
  }
  WeightFormer gen(generator_config_from_json(meta.at("config").dump()), std::move(arch), std::move(stats));
  for (const auto& [name, t] : gen.params_.tensors) {
    auto it = params.tensors.find(name);
    if (it == params.tensors.end()) throw ConfigError("generator checkpoint lacks parameter '" + name + "'");
    if (it->second.shape() != t.shape()) throw StructuralError("generator parameter '" + name + "' has wrong shape");
  }
  if (params.tensors.size() != gen.params_.tensors.size()) throw ConfigError("generator checkpoint has unknown parameters");
  gen.params_ = std::move(params);
  return gen;
}

// ---------------------------------------------------------------- teachers

PreparedTeachers PreparedTeachers::rotated(int shift) const {
  PreparedTeachers out = *this;
  const int n = count();
  if (n == 0) return out;
  const int s = ((shift % n) + n) % n;
  for (auto& layer : out.layers) std::rotate(layer.begin(), layer.begin() + s, layer.end());
  return out;
}

PreparedTeachers prepare_teachers(const WeightFormer& gen, const std::vector<WeightSet>& teachers) {
  if (teachers.empty()) throw ConfigError("no teachers supplied");
  const ArchSpec& arch = gen.arch();
  for (std::size_t i = 0; i < teachers.size(); ++i) {
    if (!teachers[i].arch || !(*teachers[i].arch == arch))
      throw StructuralError("teacher " + std::to_string(i) + " does not share the generator's architecture");
    validate_weights(arch, teachers[i]);
  }
  PreparedTeachers out;
  out.layers.resize(arch.layers.size());
  for (const auto& t : teachers) {
    for (std::size_t li = 0; li < arch.layers.size(); ++li)
      out.layers[li].push_back(apply_norm(tokenize_layer(t, arch.layers[li]), gen.norm_stats()).tokens);
  }
  return out;
}

// ---------------------------------------------------------------- forward pieces

template <typename T>
ad::Var<T> compose_input(const WeightFormer& gen, const BoundParams<T>& p, const std::vector<ad::Var<T>>& teacher_tokens,
                         ad::Var<T> cross, const LayerKey& key) {
  const auto& cfg = gen.config();
  if (teacher_tokens.empty()) throw ConfigError("compose_input: no teachers");
  const Shape first = teacher_tokens.front().shape();
  for (const auto& t : teacher_tokens)
    if (t.shape() != first)
      throw StructuralError("compose_input: heterogeneous teacher token shapes " + shape_str(first) + " vs " +
                            shape_str(t.shape()));
  const int n = static_cast<int>(teacher_tokens.size());
  const int seq = first.at(0);
  if (n > cfg.max_teachers)
    throw CapacityError("compose_input: " + std::to_string(n) + " teachers exceed the model-id table (" +
                        std::to_string(cfg.max_teachers) + ")");
  if (1 + n * seq > gen.max_seq_len())
    throw CapacityError("compose_input: sequence length " + std::to_string(1 + n * seq) + " exceeds max_seq_len " +
                        std::to_string(gen.max_seq_len()));
  const DictionaryEntry& entry = gen.dictionary().entry(key);
  const auto pos = ad::slice_rows(param_var(p, "pos_embed"), 0, seq);
  const auto ids = param_var(p, "model_id_embed");
  std::vector<ad::Var<T>> parts{cross};
  for (int i = 0; i < n; ++i) {
    auto block = ad::add(embed_tokens(teacher_tokens[i], entry, p), pos);
    auto id_row = ad::reshape(ad::slice_rows(ids, cfg.tie_model_ids ? 0 : i, 1), {cfg.d_model});
    parts.push_back(ad::add_bias(block, id_row));
  }
  return ad::concat_rows(parts);
}

Tensor cutoff_mask(int rows, int d_model, double rate, Rng& rng) {
  Tensor mask({rows, d_model}, 1.0);
  const int drop = static_cast<int>(std::floor(rate * d_model));
  for (int c : rng.sample_without_replacement(d_model, drop))
    for (int r = 0; r < rows; ++r) mask.at(r, c) = 0.0;
  return mask;
}

template <typename T>
ad::Var<T> apply_cutoff(ad::Var<T> seq, double rate, Rng& rng) {
  if (rate <= 0.0) return seq;
  return ad::mul_const(seq, cutoff_mask(seq.shape()[0], seq.shape()[1], rate, rng).template cast<T>());
}

template <typename T>
ad::Var<T> encode(const WeightFormer& gen, const BoundParams<T>& p, ad::Var<T> x) {
  const auto& cfg = gen.config();
  if (x.shape().size() != 2 || x.shape()[1] != cfg.d_model) throw StructuralError("encode: expected [n, d_model] input");
  if (x.shape()[0] > gen.max_seq_len())
    throw CapacityError("encode: sequence length " + std::to_string(x.shape()[0]) + " exceeds max_seq_len " +
                        std::to_string(gen.max_seq_len()));
  const T eps = static_cast<T>(1e-5);
  for (int i = 0; i < cfg.num_blocks; ++i) {
    auto P = [&](const char* part) { return param_var(p, block_name(i, part)); };
    auto lin = [&](ad::Var<T> in, const char* w, const char* b) { return ad::add_bias(ad::matmul(in, P(w)), P(b)); };
    auto q = lin(x, "attn.wq", "attn.bq");
    auto k = lin(x, "attn.wk", "attn.bk");
    auto v = lin(x, "attn.wv", "attn.bv");
    auto a = lin(ad::attention(q, k, v, 1, cfg.num_heads), "attn.wo", "attn.bo");
    x = ad::layer_norm(ad::add(x, a), P("ln1.gamma"), P("ln1.beta"), eps);
    auto f = lin(ad::relu(lin(x, "ffn.w1", "ffn.b1")), "ffn.w2", "ffn.b2");
    x = ad::layer_norm(ad::add(x, f), P("ln2.gamma"), P("ln2.beta"), eps);
  }
  return x;
}

template <typename T>
std::pair<ad::Var<T>, ad::Var<T>> generate_layer(const WeightFormer& gen, const BoundParams<T>& p, const LayerSpec& spec,
                                                 const std::vector<ad::Var<T>>& teacher_tokens, ad::Var<T> cross,
                                                 const GenOptions& opts) {
  const LayerKey key = layer_key(spec);
  auto seq = compose_input(gen, p, teacher_tokens, cross, key);
  if (opts.mode == Mode::train && gen.config().cutoff_rate > 0.0) {
    if (!opts.cutoff_rng) throw ConfigError("training-mode generation with cutoff needs an rng stream");
    seq = apply_cutoff(seq, gen.config().cutoff_rate, *opts.cutoff_rng);
  }
  auto hidden = encode(gen, p, seq);
  const int n_out = teacher_tokens.front().shape()[0];
  auto projected = project_tokens(ad::slice_rows(hidden, 1, n_out), gen.dictionary().entry(key), p);
  const NormEntry& ns = gen.norm_stats().at(key);
  TensorT<T> scale(projected.shape()), shift(projected.shape());
  for (int r = 0; r < n_out; ++r)
    for (int c = 0; c < key.d_layer; ++c) {
      scale.at(r, c) = static_cast<T>(ns.std[c]);
      shift.at(r, c) = static_cast<T>(ns.mean[c]);
    }
  auto tokens = ad::add_const(ad::mul_const(projected, scale), shift);
  return {tokens, ad::slice_rows(hidden, 0, 1)};
}

template <typename T>
WeightVars<T> generate_student(ad::Graph<T>& g, const WeightFormer& gen, const BoundParams<T>& p,
                               const PreparedTeachers& teachers, const GenOptions& opts) {
  const ArchSpec& arch = gen.arch();
  if (teachers.layers.size() != arch.layers.size()) throw StructuralError("prepared teachers do not match the architecture");
  const int d = gen.config().d_model;
  auto cross = ad::reshape(param_var(p, "cross_init"), {1, d});
  WeightVars<T> out;
  for (std::size_t li = 0; li < arch.layers.size(); ++li) {
    const LayerSpec& spec = arch.layers[li];
    std::vector<ad::Var<T>> toks;
    for (const auto& t : teachers.layers[li]) toks.push_back(g.constant(t.template cast<T>()));
    if (li > 0 && !gen.config().cross_layer) cross = g.constant(TensorT<T>({1, d}));
    auto [student, next] = generate_layer(gen, p, spec, toks, cross, opts);
    if (opts.trace) {
      LayerTrace tr;
      tr.layer = spec.name;
      tr.input_seq_len = 1 + static_cast<int>(toks.size()) * toks.front().shape()[0];
      tr.cross_in = cross.value().template cast<double>().reshaped({d});
      tr.cross_out = next.value().template cast<double>().reshaped({d});
      const auto& sv = student.value();
      double s = 0, sq = 0;
      for (auto v : sv.vec()) s += v;
      const double mu = s / static_cast<double>(sv.size());
      for (auto v : sv.vec()) sq += (v - mu) * (v - mu);
      tr.output_mean = mu;
      tr.output_std = std::sqrt(sq / static_cast<double>(sv.size()));
      opts.trace->layers.push_back(std::move(tr));
    }
    for (auto& [role, var] : detokenize_vars(student, spec)) out.emplace(TensorKey{spec.name, role}, var);
    cross = next;
  }
  return out;
}

namespace {

template <typename T>
WeightSet to_weight_set_impl(const ad::Graph<T>& g, const WeightVars<T>& vars, std::shared_ptr<const ArchSpec> arch) {
  WeightSet ws;
  for (const auto& [key, v] : vars) ws.tensors.emplace(key, g.value(v).template cast<double>());
  ws.arch = std::move(arch);
  return ws;
}

template <typename T>
WeightSet generate_eval(const WeightFormer& gen, const std::vector<WeightSet>& teachers, GenerationTrace* trace) {
  ad::Graph<T> g;
  auto p = bind_params<T>(g, gen.params(), false);
  GenOptions opts;
  opts.trace = trace;
  auto vars = generate_student(g, gen, p, prepare_teachers(gen, teachers), opts);
  return to_weight_set_impl(g, vars, gen.arch_ptr());
}

}  // namespace

WeightSet to_weight_set(const ad::Graph<float>& g, const WeightVars<float>& vars, std::shared_ptr<const ArchSpec> arch) {
  return to_weight_set_impl(g, vars, std::move(arch));
}
WeightSet to_weight_set(const ad::Graph<double>& g, const WeightVars<double>& vars, std::shared_ptr<const ArchSpec> arch) {
  return to_weight_set_impl(g, vars, std::move(arch));
}

WeightSet generate_student(const WeightFormer& gen, const std::vector<WeightSet>& teachers, bool double_precision,
                           GenerationTrace* trace) {
  return double_precision ? generate_eval<double>(gen, teachers, trace) : generate_eval<float>(gen, teachers, trace);
}

#define MEPL_INSTANTIATE(T)                                                                                          \
  template ad::Var<T> compose_input(const WeightFormer&, const BoundParams<T>&, const std::vector<ad::Var<T>>&,      \
                                    ad::Var<T>, const LayerKey&);                                                    \
  template ad::Var<T> apply_cutoff(ad::Var<T>, double, Rng&);                                                        \
  template ad::Var<T> encode(const WeightFormer&, const BoundParams<T>&, ad::Var<T>);                                \
  template std::pair<ad::Var<T>, ad::Var<T>> generate_layer(const WeightFormer&, const BoundParams<T>&,              \
                                                            const LayerSpec&, const std::vector<ad::Var<T>>&,        \
                                                            ad::Var<T>, const GenOptions&);                          \
  template WeightVars<T> generate_student(ad::Graph<T>&, const WeightFormer&, const BoundParams<T>&,                 \
                                          const PreparedTeachers&, const GenOptions&);

MEPL_INSTANTIATE(float)
MEPL_INSTANTIATE(double)

#undef MEPL_INSTANTIATE

}  // namespace mepl
