#include "mepl/dataset.hpp"

#include <zlib.h>

#include <cstdlib>
#include <sstream>

#ifndef MEPL_DEFAULT_DATA_DIR
#define MEPL_DEFAULT_DATA_DIR "data"
#endif

namespace mepl {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kSplitSeed = 20220917;

std::string read_gzip(const fs::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw ConfigError("cannot open dataset file " + path.string());
  std::string out;
  char buf[1 << 15];
  int n;
  while ((n = gzread(f, buf, sizeof(buf))) > 0) out.append(buf, static_cast<std::size_t>(n));
  const bool bad = n < 0;
  gzclose(f);
  if (bad) throw ConfigError("corrupt gzip stream in " + path.string());
  return out;
}

Dataset load_digits(const fs::path& dir) {
  Dataset ds;
  ds.id = "digits";
  ds.num_classes = 10;
  ds.input_shape = {1, 8, 8};
  const std::string text = read_gzip(dir / "digits.csv.gz");
  std::istringstream lines(text);
  std::string line;
  std::vector<double> pixels;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    std::vector<double> vals;
    while (std::getline(row, cell, ',')) vals.push_back(std::stod(cell));
    if (vals.size() != 65) throw ConfigError("digits row with " + std::to_string(vals.size()) + " fields");
    for (int i = 0; i < 64; ++i) pixels.push_back(vals[i] / 16.0);
    ds.labels.push_back(static_cast<int>(vals[64]));
  }
  const int n = ds.size();
  ds.images = Tensor({n, 1, 8, 8}, std::move(pixels));
  return ds;
}

void assign_split(Dataset& ds) {
  std::vector<int> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(kSplitSeed);
  rng.shuffle(order.begin(), order.end());
  // ~56% train, ~16% val, ~28% test.
  const int n = ds.size();
  const int n_test = n * 28 / 100;
  const int n_val = n * 16 / 100;
  ds.test.assign(order.begin(), order.begin() + n_test);
  ds.val.assign(order.begin() + n_test, order.begin() + n_test + n_val);
  ds.train.assign(order.begin() + n_test + n_val, order.end());
}

}  // namespace

fs::path default_data_dir() {
  if (const char* env = std::getenv("MEPL_DATA_DIR")) return env;
  return MEPL_DEFAULT_DATA_DIR;
}

Dataset load_dataset(const std::string& id, const fs::path& data_dir) {
  const auto colon = id.find(':');
  const std::string base = id.substr(0, colon);
  if (base != "digits") throw ConfigError("unknown dataset '" + id + "' (known: digits, digits:<n>)");
  Dataset full = load_digits(data_dir);
  if (colon == std::string::npos) {
    assign_split(full);
    return full;
  }
  int keep = 0;
  try {
    keep = std::stoi(id.substr(colon + 1));
  } catch (const std::exception&) {
    throw ConfigError("bad subsample size in dataset id '" + id + "'");
  }
  if (keep < 50 || keep > full.size()) throw ConfigError("subsample size must be in [50, " + std::to_string(full.size()) + "]");
  Rng rng(kSplitSeed + 1);
  std::vector<int> pick = rng.sample_without_replacement(full.size(), keep);
  Dataset ds;
  ds.id = id;
  ds.num_classes = full.num_classes;
  ds.input_shape = full.input_shape;
  const std::size_t per = 64;
  std::vector<double> pixels;
  for (int i : pick) {
    pixels.insert(pixels.end(), full.images.data() + i * per, full.images.data() + (i + 1) * per);
    ds.labels.push_back(full.labels[i]);
  }
  ds.images = Tensor({keep, 1, 8, 8}, std::move(pixels));
  assign_split(ds);
  return ds;
}

Batch make_batch(const Dataset& ds, std::span<const int> indices, bool augment, Rng* rng) {
  const auto [C, H, W] = ds.input_shape;
  const int B = static_cast<int>(indices.size());
  const std::size_t per = static_cast<std::size_t>(C) * H * W;
  Batch b;
  b.inputs = Tensor({B, C, H, W});
  b.labels.reserve(B);
  for (int r = 0; r < B; ++r) {
    const int i = indices[r];
    const double* src = ds.images.data() + i * per;
    double* dst = b.inputs.data() + r * per;
    int dy = 0, dx = 0;
    if (augment && rng) {
      dy = static_cast<int>(rng->below(3)) - 1;
      dx = static_cast<int>(rng->below(3)) - 1;
    }
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const int sy = y - dy, sx = x - dx;
          dst[(c * H + y) * W + x] = (sy < 0 || sy >= H || sx < 0 || sx >= W) ? 0.0 : src[(c * H + sy) * W + sx];
        }
    b.labels.push_back(ds.labels[i]);
  }
  return b;
}

std::vector<Batch> make_batches(const Dataset& ds, std::span<const int> indices, int batch_size) {
  std::vector<Batch> out;
  for (std::size_t i = 0; i < indices.size(); i += batch_size) {
    const std::size_t n = std::min<std::size_t>(batch_size, indices.size() - i);
    out.push_back(make_batch(ds, indices.subspan(i, n)));
  }
  return out;
}

}  // namespace mepl
