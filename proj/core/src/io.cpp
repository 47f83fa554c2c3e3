#include "mepl/io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace mepl {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[8] = {'M', 'E', 'P', 'L', 'T', 'C', '0', '1'};

static_assert(std::endian::native == std::endian::little, "container IO assumes a little-endian host");

template <typename U>
void put(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U get(std::istream& is, const fs::path& path) {
  U v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(U))) throw ConfigError("truncated tensor container " + path.string());
  return v;
}

fs::path temp_sibling(const fs::path& path) { return fs::path(path.string() + ".tmp"); }

}  // namespace

void save_container(const fs::path& path, const TensorContainer& c) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = temp_sibling(path);
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw ConfigError("cannot write " + tmp.string());
    os.write(kMagic, sizeof(kMagic));
    put<std::uint64_t>(os, c.meta.size());
    os.write(c.meta.data(), static_cast<std::streamsize>(c.meta.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(c.tensors.size()));
    for (const auto& [name, t] : c.tensors) {
      put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
      for (int d : t.shape()) put<std::int32_t>(os, d);
      os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!os) throw ConfigError("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

TensorContainer load_container(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open tensor container " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) throw ConfigError(path.string() + " is not a tensor container");
  TensorContainer c;
  const auto meta_len = get<std::uint64_t>(is, path);
  c.meta.resize(meta_len);
  if (!is.read(c.meta.data(), static_cast<std::streamsize>(meta_len))) throw ConfigError("truncated meta in " + path.string());
  const auto count = get<std::uint32_t>(is, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(get<std::uint32_t>(is, path), '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(name.size()))) throw ConfigError("truncated name in " + path.string());
    const auto rank = get<std::uint32_t>(is, path);
    Shape shape(rank);
    for (auto& d : shape) {
      d = get<std::int32_t>(is, path);
      if (d < 0) throw ConfigError("negative dimension in " + path.string());
    }
    std::vector<double> data(shape_numel(shape));
    if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double))))
      throw ConfigError("truncated tensor '" + name + "' in " + path.string());
    c.tensors.emplace(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return c;
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = temp_sibling(path);
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw ConfigError("cannot write " + tmp.string());
    os << text;
    if (!os) throw ConfigError("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void save_weights(const fs::path& path, const WeightSet& ws) {
  if (!ws.arch) throw StructuralError("weight set has no architecture attached");
  TensorContainer c;
  nlohmann::json meta;
  meta["kind"] = "weights";
  meta["arch"] = nlohmann::json::parse(arch_to_text(*ws.arch));
  meta["arch_fingerprint"] = arch_fingerprint(*ws.arch);
  c.meta = meta.dump();
  for (const auto& [key, t] : ws.tensors) c.tensors.emplace(key.str(), t);
  save_container(path, c);
}

WeightSet load_weights(const fs::path& path) {
  TensorContainer c = load_container(path);
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(c.meta);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad checkpoint meta in " + path.string() + ": " + e.what());
  }
  if (meta.value("kind", "") != "weights") throw ConfigError(path.string() + " is not a weight checkpoint");
  WeightSet ws;
  ws.arch = std::make_shared<ArchSpec>(arch_from_text(meta.at("arch").dump()));
  for (auto& [name, t] : c.tensors) {
    const auto dot = name.rfind('.');
    if (dot == std::string::npos) throw ConfigError("bad tensor name '" + name + "' in " + path.string());
    ws.tensors.emplace(TensorKey{name.substr(0, dot), role_from_string(name.substr(dot + 1))}, std::move(t));
  }
  validate_weights(*ws.arch, ws);
  return ws;
}

}  // namespace mepl
