#include "mepl/arch.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include <nlohmann/json.hpp>

namespace mepl {

using json = nlohmann::json;

// ---------------------------------------------------------------- names

std::string to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::fc: return "fc";
    case LayerKind::attention: return "attention";
    case LayerKind::norm: return "norm";
  }
  return "?";
}

std::string to_string(Role r) {
  switch (r) {
    case Role::weight: return "weight";
    case Role::bias: return "bias";
    case Role::scale: return "scale";
    case Role::shift: return "shift";
    case Role::query: return "query";
    case Role::key: return "key";
    case Role::value: return "value";
    case Role::output: return "output";
  }
  return "?";
}

std::string to_string(Preset p) {
  switch (p) {
    case Preset::cnn_tiny: return "cnn_tiny";
    case Preset::vit_tiny: return "vit_tiny";
    case Preset::mlp_tiny: return "mlp_tiny";
  }
  return "?";
}

LayerKind layer_kind_from_string(const std::string& s) {
  for (auto k : {LayerKind::conv, LayerKind::fc, LayerKind::attention, LayerKind::norm})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown layer kind '" + s + "'");
}

Role role_from_string(const std::string& s) {
  for (auto r : {Role::weight, Role::bias, Role::scale, Role::shift, Role::query, Role::key, Role::value, Role::output})
    if (to_string(r) == s) return r;
  throw ConfigError("unknown tensor role '" + s + "'");
}

Preset preset_from_string(const std::string& s) {
  for (auto p : {Preset::cnn_tiny, Preset::vit_tiny, Preset::mlp_tiny})
    if (to_string(p) == s) return p;
  throw ConfigError("unknown architecture preset '" + s + "' (known: cnn_tiny, vit_tiny, mlp_tiny)");
}

namespace {

std::string family_name(Family f) {
  switch (f) {
    case Family::cnn: return "cnn";
    case Family::vit: return "vit";
    case Family::mlp: return "mlp";
  }
  return "?";
}

Family family_from_string(const std::string& s) {
  if (s == "cnn") return Family::cnn;
  if (s == "vit") return Family::vit;
  if (s == "mlp") return Family::mlp;
  throw ConfigError("unknown architecture family '" + s + "'");
}

LayerSpec conv(std::string name, int k, int in, int out, int pad) {
  LayerSpec l;
  l.name = std::move(name);
  l.kind = LayerKind::conv;
  l.kernel = k;
  l.n_input = in;
  l.n_output = out;
  l.padding = pad;
  return l;
}

LayerSpec norm(std::string name, int channels) {
  LayerSpec l;
  l.name = std::move(name);
  l.kind = LayerKind::norm;
  l.n_input = channels;
  l.n_output = channels;
  l.has_bias = false;
  l.frozen_mean.assign(channels, 0.0);
  l.frozen_std.assign(channels, 1.0);
  return l;
}

LayerSpec fc(std::string name, int in, int out, Activation act = Activation::none) {
  LayerSpec l;
  l.name = std::move(name);
  l.kind = LayerKind::fc;
  l.n_input = in;
  l.n_output = out;
  l.activation = act;
  return l;
}

}  // namespace

const LayerSpec& ArchSpec::layer(const std::string& name) const {
  for (const auto& l : layers)
    if (l.name == name) return l;
  throw StructuralError("architecture has no layer '" + name + "'");
}

const Tensor& WeightSet::at(const std::string& layer, Role role) const {
  auto it = tensors.find({layer, role});
  if (it == tensors.end()) throw StructuralError("weight set has no tensor " + layer + "." + to_string(role));
  return it->second;
}

Tensor& WeightSet::at(const std::string& layer, Role role) {
  auto it = tensors.find({layer, role});
  if (it == tensors.end()) throw StructuralError("weight set has no tensor " + layer + "." + to_string(role));
  return it->second;
}

std::size_t WeightSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [k, t] : tensors) n += t.size();
  return n;
}

std::vector<std::pair<Role, Shape>> layer_tensor_shapes(const LayerSpec& l) {
  std::vector<std::pair<Role, Shape>> out;
  switch (l.kind) {
    case LayerKind::conv:
      out.push_back({Role::weight, {l.n_output, l.n_input, l.kernel, l.kernel}});
      if (l.has_bias) out.push_back({Role::bias, {l.n_output}});
      break;
    case LayerKind::fc:
      out.push_back({Role::weight, {l.n_output, l.n_input}});
      if (l.has_bias) out.push_back({Role::bias, {l.n_output}});
      break;
    case LayerKind::norm:
      out.push_back({Role::scale, {l.n_output}});
      out.push_back({Role::shift, {l.n_output}});
      break;
    case LayerKind::attention:
      out.push_back({Role::query, {l.heads, l.d_trans, l.d_k}});
      out.push_back({Role::key, {l.heads, l.d_trans, l.d_k}});
      out.push_back({Role::value, {l.heads, l.d_trans, l.d_v}});
      out.push_back({Role::output, {l.heads * l.d_v, l.d_trans}});
      break;
  }
  return out;
}

// ---------------------------------------------------------------- presets

ArchSpec build_arch(Preset preset, int num_classes, std::array<int, 3> input_shape) {
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  const auto [C, H, W] = input_shape;
  if (C < 1 || H < 1 || W < 1) throw ConfigError("input shape must be positive");
  ArchSpec a;
  a.preset = to_string(preset);
  a.num_classes = num_classes;
  a.input_shape = input_shape;
  switch (preset) {
    case Preset::cnn_tiny: {
      if (H < 4 || W < 4) throw ConfigError("cnn_tiny needs inputs of at least 4x4");
      a.family = Family::cnn;
      a.layers.push_back(conv("conv1", 3, C, 8, 1));
      a.layers.push_back(norm("norm1", 8));
      a.layers.back().activation = Activation::relu;
      a.layers.back().pool = Pool::max2;
      a.layers.push_back(conv("conv2", 3, 8, 16, 1));
      a.layers.push_back(norm("norm2", 16));
      a.layers.back().activation = Activation::relu;
      a.layers.back().pool = Pool::max2;
      a.layers.push_back(fc("fc1", 16 * (H / 4) * (W / 4), 32, Activation::relu));
      a.layers.push_back(fc("fc2", 32, num_classes));
      break;
    }
    case Preset::vit_tiny: {
      if (H % 4 != 0 || W % 4 != 0) throw ConfigError("vit_tiny needs input height/width divisible by 4");
      a.family = Family::vit;
      a.patch = H / 4;
      if (W / a.patch * a.patch != W) throw ConfigError("vit_tiny needs square patches that tile the input");
      const int d = 16;
      a.layers.push_back(fc("embed", C * a.patch * a.patch, d));
      LayerSpec attn;
      attn.name = "attn1";
      attn.kind = LayerKind::attention;
      attn.heads = 2;
      attn.d_trans = d;
      attn.d_k = 8;
      attn.d_v = 8;
      attn.has_bias = false;
      attn.pool = Pool::token_mean;
      a.layers.push_back(attn);
      a.layers.push_back(fc("head", d, num_classes));
      break;
    }
    case Preset::mlp_tiny: {
      a.family = Family::mlp;
      a.layers.push_back(fc("fc1", C * H * W, 32, Activation::relu));
      a.layers.push_back(fc("fc2", 32, 32, Activation::relu));
      a.layers.push_back(fc("fc3", 32, num_classes));
      break;
    }
  }
  validate_arch(a);
  return a;
}

ArchSpec build_arch(const std::string& preset, int num_classes, std::array<int, 3> input_shape) {
  return build_arch(preset_from_string(preset), num_classes, input_shape);
}

namespace {

// Shape of the running activation while walking the layer list.
struct FlowShape {
  bool spatial = true;  // [C,H,W] vs flat/token features
  bool tokens = false;  // vit token sequence
  int c = 0, h = 0, w = 0;
  int features = 0;
};

}  // namespace

void validate_arch(const ArchSpec& a) {
  if (a.layers.empty()) throw StructuralError("architecture has no layers");
  if (a.num_classes < 1) throw StructuralError("num_classes must be positive");
  FlowShape s;
  const auto [C, H, W] = a.input_shape;
  if (a.family == Family::cnn) {
    s.c = C, s.h = H, s.w = W;
  } else if (a.family == Family::mlp) {
    s.spatial = false;
    s.features = C * H * W;
  } else {
    if (a.patch < 1 || H % a.patch || W % a.patch) throw StructuralError("vit patch size does not tile the input");
    s.spatial = false;
    s.tokens = true;
    s.features = C * a.patch * a.patch;
  }
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    const auto& l = a.layers[i];
    auto fail = [&](const std::string& why) { throw StructuralError("layer '" + l.name + "': " + why); };
    for (std::size_t j = 0; j < i; ++j)
      if (a.layers[j].name == l.name) fail("duplicate layer name");
    switch (l.kind) {
      case LayerKind::conv: {
        if (l.kernel < 1 || l.n_input < 1 || l.n_output < 1 || l.stride < 1 || l.padding < 0) fail("invalid conv dims");
        if (!s.spatial) fail("conv after flattening");
        if (s.c != l.n_input) fail("expects " + std::to_string(l.n_input) + " input channels, got " + std::to_string(s.c));
        s.h = (s.h + 2 * l.padding - l.kernel) / l.stride + 1;
        s.w = (s.w + 2 * l.padding - l.kernel) / l.stride + 1;
        if (s.h < 1 || s.w < 1) fail("empty conv output");
        s.c = l.n_output;
        break;
      }
      case LayerKind::norm: {
        if (!s.spatial) fail("norm layers apply to spatial feature maps");
        if (l.n_output != s.c || l.n_input != s.c) fail("channel count mismatch");
        if (l.frozen_mean.size() != static_cast<std::size_t>(s.c) || l.frozen_std.size() != static_cast<std::size_t>(s.c))
          fail("frozen statistics size mismatch");
        for (double sd : l.frozen_std)
          if (!(sd > 0)) fail("frozen std must be positive");
        break;
      }
      case LayerKind::fc: {
        if (l.n_input < 1 || l.n_output < 1) fail("invalid fc dims");
        const int in = s.spatial ? s.c * s.h * s.w : s.features;
        if (in != l.n_input) fail("expects " + std::to_string(l.n_input) + " inputs, got " + std::to_string(in));
        s.spatial = false;
        s.features = l.n_output;
        break;
      }
      case LayerKind::attention: {
        if (l.heads < 1 || l.d_trans < 1 || l.d_k < 1 || l.d_v < 1) fail("invalid attention dims");
        if (!s.tokens) fail("attention needs a token sequence");
        if (s.features != l.d_trans) fail("token width " + std::to_string(s.features) + " != d_trans");
        if (l.heads * l.d_v != l.d_trans) fail("heads * d_v must equal d_trans for the residual output");
        break;
      }
    }
    if (l.pool == Pool::max2) {
      if (!s.spatial) fail("max pooling needs spatial input");
      s.h /= 2, s.w /= 2;
      if (s.h < 1 || s.w < 1) fail("pooling empties the feature map");
    } else if (l.pool == Pool::token_mean) {
      if (!s.tokens) fail("token pooling needs a token sequence");
      s.tokens = false;
    }
  }
  const auto& last = a.layers.back();
  if (last.kind != LayerKind::fc) throw StructuralError("last layer '" + last.name + "' must be fc");
  if (last.n_output != a.num_classes) throw StructuralError("last layer '" + last.name + "' must emit num_classes outputs");
  if (s.tokens) throw StructuralError("token sequence never pooled before the classifier");
}

void validate_weights(const ArchSpec& arch, const WeightSet& ws) {
  std::size_t expected = 0;
  for (const auto& l : arch.layers) {
    for (const auto& [role, shape] : layer_tensor_shapes(l)) {
      ++expected;
      auto it = ws.tensors.find({l.name, role});
      if (it == ws.tensors.end()) throw StructuralError("layer '" + l.name + "': missing " + to_string(role) + " tensor");
      if (it->second.shape() != shape)
        throw StructuralError("layer '" + l.name + "': " + to_string(role) + " has shape " + shape_str(it->second.shape()) +
                              ", expected " + shape_str(shape));
      if (!it->second.all_finite()) throw StructuralError("layer '" + l.name + "': non-finite " + to_string(role));
    }
  }
  if (ws.tensors.size() != expected) throw StructuralError("weight set carries tensors the architecture does not declare");
}

std::size_t param_count(const ArchSpec& arch) {
  std::size_t n = 0;
  for (const auto& l : arch.layers)
    for (const auto& [role, shape] : layer_tensor_shapes(l)) n += shape_numel(shape);
  return n;
}

// ---------------------------------------------------------------- text form

std::string arch_to_text(const ArchSpec& a) {
  json j;
  j["preset"] = a.preset;
  j["family"] = family_name(a.family);
  j["num_classes"] = a.num_classes;
  j["input_shape"] = a.input_shape;
  j["patch"] = a.patch;
  j["layers"] = json::array();
  for (const auto& l : a.layers) {
    json r;
    r["name"] = l.name;
    r["kind"] = to_string(l.kind);
    switch (l.kind) {
      case LayerKind::conv:
        r["kernel"] = l.kernel, r["n_input"] = l.n_input, r["n_output"] = l.n_output;
        r["stride"] = l.stride, r["padding"] = l.padding;
        break;
      case LayerKind::fc:
        r["n_input"] = l.n_input, r["n_output"] = l.n_output;
        break;
      case LayerKind::norm:
        r["channels"] = l.n_output;
        r["frozen_mean"] = l.frozen_mean;
        r["frozen_std"] = l.frozen_std;
        break;
      case LayerKind::attention:
        r["heads"] = l.heads, r["d_trans"] = l.d_trans, r["d_k"] = l.d_k, r["d_v"] = l.d_v;
        break;
    }
    r["has_bias"] = l.has_bias;
    r["activation"] = l.activation == Activation::relu ? "relu" : "none";
    r["pool"] = l.pool == Pool::max2 ? "max2" : l.pool == Pool::token_mean ? "token_mean" : "none";
    json shapes = json::object();
    for (const auto& [role, shape] : layer_tensor_shapes(l)) shapes[to_string(role)] = shape;
    r["tensors"] = shapes;
    j["layers"].push_back(r);
  }
  return j.dump(2) + "\n";
}

ArchSpec arch_from_text(const std::string& text) {
  ArchSpec a;
  try {
    const json j = json::parse(text);
    a.preset = j.at("preset").get<std::string>();
    a.family = family_from_string(j.at("family").get<std::string>());
    a.num_classes = j.at("num_classes").get<int>();
    a.input_shape = j.at("input_shape").get<std::array<int, 3>>();
    a.patch = j.value("patch", 0);
    for (const auto& r : j.at("layers")) {
      LayerSpec l;
      l.name = r.at("name").get<std::string>();
      l.kind = layer_kind_from_string(r.at("kind").get<std::string>());
      switch (l.kind) {
        case LayerKind::conv:
          l.kernel = r.at("kernel"), l.n_input = r.at("n_input"), l.n_output = r.at("n_output");
          l.stride = r.value("stride", 1), l.padding = r.value("padding", 0);
          break;
        case LayerKind::fc:
          l.n_input = r.at("n_input"), l.n_output = r.at("n_output");
          break;
        case LayerKind::norm:
          l.n_input = l.n_output = r.at("channels");
          l.frozen_mean = r.at("frozen_mean").get<std::vector<double>>();
          l.frozen_std = r.at("frozen_std").get<std::vector<double>>();
          break;
        case LayerKind::attention:
          l.heads = r.at("heads"), l.d_trans = r.at("d_trans"), l.d_k = r.at("d_k"), l.d_v = r.at("d_v");
          break;
      }
      l.has_bias = r.value("has_bias", l.kind != LayerKind::norm && l.kind != LayerKind::attention);
      const std::string act = r.value("activation", "none");
      if (act != "none" && act != "relu") throw ConfigError("unknown activation '" + act + "'");
      l.activation = act == "relu" ? Activation::relu : Activation::none;
      const std::string pool = r.value("pool", "none");
      if (pool == "max2") l.pool = Pool::max2;
      else if (pool == "token_mean") l.pool = Pool::token_mean;
      else if (pool == "none") l.pool = Pool::none;
      else throw ConfigError("unknown pool '" + pool + "'");
      a.layers.push_back(std::move(l));
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed architecture document: ") + e.what());
  }
  validate_arch(a);
  return a;
}

std::string arch_fingerprint(const ArchSpec& arch) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a(arch_to_text(arch));
  return os.str();
}

// ---------------------------------------------------------------- weights

WeightSet zero_weights(std::shared_ptr<const ArchSpec> arch) {
  WeightSet ws;
  for (const auto& l : arch->layers)
    for (const auto& [role, shape] : layer_tensor_shapes(l)) ws.tensors.emplace(TensorKey{l.name, role}, Tensor(shape));
  ws.arch = std::move(arch);
  return ws;
}

WeightSet init_weights(std::shared_ptr<const ArchSpec> arch, Rng& rng) {
  WeightSet ws = zero_weights(arch);
  for (const auto& l : arch->layers) {
    for (const auto& [role, shape] : layer_tensor_shapes(l)) {
      Tensor& t = ws.at(l.name, role);
      double sd = 0.0;
      switch (role) {
        case Role::weight:
          sd = l.kind == LayerKind::conv ? std::sqrt(2.0 / (l.n_input * l.kernel * l.kernel)) : std::sqrt(2.0 / l.n_input);
          break;
        case Role::query:
        case Role::key:
        case Role::value: sd = 1.0 / std::sqrt(static_cast<double>(l.d_trans)); break;
        case Role::output: sd = 1.0 / std::sqrt(static_cast<double>(l.heads * l.d_v)); break;
        case Role::scale: t.fill(1.0); break;
        default: break;
      }
      if (sd > 0)
        for (auto& v : t.vec()) v = sd * rng.normal();
    }
  }
  return ws;
}

template <typename T>
WeightVars<T> bind_weights(ad::Graph<T>& g, const WeightSet& ws, bool requires_grad) {
  WeightVars<T> out;
  for (const auto& [key, t] : ws.tensors)
    out.emplace(key, requires_grad ? g.param(t.template cast<T>()) : g.constant(t.template cast<T>()));
  return out;
}

namespace {

template <typename T>
TensorT<T> patchify(const Tensor& x, int patch) {
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int gh = H / patch, gw = W / patch, pd = C * patch * patch;
  TensorT<T> out({B * gh * gw, pd});
  for (int b = 0; b < B; ++b)
    for (int py = 0; py < gh; ++py)
      for (int px = 0; px < gw; ++px) {
        const int row = (b * gh + py) * gw + px;
        int col = 0;
        for (int c = 0; c < C; ++c)
          for (int y = 0; y < patch; ++y)
            for (int xx = 0; xx < patch; ++xx)
              out.at(row, col++) =
                  static_cast<T>(x[((static_cast<std::size_t>(b) * C + c) * H + py * patch + y) * W + px * patch + xx]);
      }
  return out;
}

template <typename T>
TensorT<T> sinusoid_positions(int batch, int seq, int d) {
  TensorT<T> pe({batch * seq, d});
  for (int b = 0; b < batch; ++b)
    for (int s = 0; s < seq; ++s)
      for (int i = 0; i < d; ++i) {
        const double angle = s / std::pow(10000.0, 2.0 * (i / 2) / d);
        pe.at(b * seq + s, i) = static_cast<T>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
      }
  return pe;
}

template <typename T>
ad::Var<T> lookup(const WeightVars<T>& w, const LayerSpec& l, Role role, const Shape& shape) {
  auto it = w.find({l.name, role});
  if (it == w.end()) throw StructuralError("layer '" + l.name + "': missing " + to_string(role) + " tensor");
  if (it->second.shape() != shape)
    throw StructuralError("layer '" + l.name + "': " + to_string(role) + " has shape " + shape_str(it->second.shape()) +
                          ", expected " + shape_str(shape));
  return it->second;
}

}  // namespace

template <typename T>
ad::Var<T> functional_forward(ad::Graph<T>& g, const ArchSpec& arch, const WeightVars<T>& w, const Batch& batch) {
  const auto [C, H, W] = arch.input_shape;
  const Shape& xs = batch.inputs.shape();
  if (xs.size() != 4 || xs[1] != C || xs[2] != H || xs[3] != W || xs[0] < 1)
    throw StructuralError("batch shape " + shape_str(xs) + " does not match input shape (B," + std::to_string(C) + "," +
                          std::to_string(H) + "," + std::to_string(W) + ")");
  const int B = xs[0];
  ad::Var<T> x;
  bool tokens = false;
  int seq = 0;
  if (arch.family == Family::vit) {
    x = g.constant(patchify<T>(batch.inputs, arch.patch));
    tokens = true;
    seq = (H / arch.patch) * (W / arch.patch);
  } else if (arch.family == Family::mlp) {
    x = g.constant(batch.inputs.cast<T>().reshaped({B, C * H * W}));
  } else {
    x = g.constant(batch.inputs.cast<T>());
  }

  for (std::size_t li = 0; li < arch.layers.size(); ++li) {
    const LayerSpec& l = arch.layers[li];
    const auto shapes = layer_tensor_shapes(l);
    auto get = [&](Role r) {
      for (const auto& [role, shape] : shapes)
        if (role == r) return lookup(w, l, r, shape);
      throw StructuralError("layer '" + l.name + "': role " + to_string(r) + " not declared");
    };
    try {
      switch (l.kind) {
        case LayerKind::conv:
          x = ad::conv2d(x, get(Role::weight), l.has_bias ? get(Role::bias) : ad::Var<T>{}, l.stride, l.padding);
          break;
        case LayerKind::norm:
          x = ad::channel_affine(x, get(Role::scale), get(Role::shift), l.frozen_mean, l.frozen_std);
          break;
        case LayerKind::fc: {
          if (x.shape().size() == 4) x = ad::reshape(x, {B, static_cast<int>(x.value().size()) / B});
          x = ad::matmul(x, ad::transpose(get(Role::weight)));
          if (l.has_bias) x = ad::add_bias(x, get(Role::bias));
          if (tokens && li == 0) x = ad::add_const(x, sinusoid_positions<T>(B, seq, l.n_output));
          break;
        }
        case LayerKind::attention: {
          auto cat = [&](Role r, int width) {
            return ad::reshape(ad::permute(get(r), {1, 0, 2}), {l.d_trans, l.heads * width});
          };
          auto q = ad::matmul(x, cat(Role::query, l.d_k));
          auto k = ad::matmul(x, cat(Role::key, l.d_k));
          auto v = ad::matmul(x, cat(Role::value, l.d_v));
          auto a = ad::attention(q, k, v, B, l.heads);
          x = ad::add(x, ad::matmul(a, get(Role::output)));
          break;
        }
      }
      if (l.activation == Activation::relu) x = ad::relu(x);
      if (l.pool == Pool::max2) {
        x = ad::maxpool2(x);
      } else if (l.pool == Pool::token_mean) {
        x = ad::mean_groups(x, B);
        tokens = false;
      }
    } catch (const StructuralError& e) {
      const std::string msg = e.what();
      if (msg.rfind("layer '", 0) == 0) throw;
      throw StructuralError("layer '" + l.name + "': " + msg);
    }
  }
  return x;
}

Tensor forward_logits(const ArchSpec& arch, const WeightSet& weights, const Batch& batch, bool double_precision) {
  if (double_precision) {
    ad::Graph<double> g;
    return g.value(functional_forward(g, arch, bind_weights(g, weights, false), batch));
  }
  ad::Graph<float> g;
  return g.value(functional_forward(g, arch, bind_weights(g, weights, false), batch)).cast<double>();
}

template WeightVars<float> bind_weights(ad::Graph<float>&, const WeightSet&, bool);
template WeightVars<double> bind_weights(ad::Graph<double>&, const WeightSet&, bool);
template ad::Var<float> functional_forward(ad::Graph<float>&, const ArchSpec&, const WeightVars<float>&, const Batch&);
template ad::Var<double> functional_forward(ad::Graph<double>&, const ArchSpec&, const WeightVars<double>&, const Batch&);

}  // namespace mepl
