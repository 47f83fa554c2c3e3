#include "mepl/zoo.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <thread>

#include <nlohmann/json.hpp>

#include "mepl/io.hpp"

namespace mepl {

using nlohmann::json;

std::string to_string(Split s) { return s == Split::train ? "train" : "eval"; }

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "eval") return Split::eval;
  throw ConfigError("unknown split '" + s + "' (expected train or eval)");
}

std::vector<TeacherHparams> default_hparam_grid() {
  std::vector<TeacherHparams> g;
  for (double lr : {3e-3, 1e-3})
    for (bool aug : {false, true}) {
      TeacherHparams h;
      h.lr = lr;
      h.augment = aug;
      g.push_back(h);
    }
  return g;
}

namespace {

json hparams_json(const TeacherHparams& h) {
  return {{"lr", h.lr}, {"epochs", h.epochs}, {"weight_decay", h.weight_decay}, {"augment", h.augment},
          {"batch_size", h.batch_size}};
}

TeacherHparams hparams_from(const json& j) {
  TeacherHparams h;
  h.lr = j.at("lr").get<double>();
  h.epochs = j.at("epochs").get<int>();
  h.weight_decay = j.at("weight_decay").get<double>();
  h.augment = j.at("augment").get<bool>();
  h.batch_size = j.at("batch_size").get<int>();
  return h;
}

json manifest_json(const CheckpointManifest& m) {
  return {{"id", m.id},
          {"dataset", m.dataset},
          {"arch_fingerprint", m.arch_fingerprint},
          {"seed", m.seed},
          {"init_seed", m.init_seed},
          {"hparams", hparams_json(m.hparams)},
          {"val_acc", m.val_acc},
          {"path", m.path},
          {"split", to_string(m.split)},
          {"attempts", m.attempts}};
}

CheckpointManifest manifest_from(const json& j) {
  CheckpointManifest m;
  m.id = j.at("id").get<std::string>();
  m.dataset = j.at("dataset").get<std::string>();
  m.arch_fingerprint = j.at("arch_fingerprint").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.init_seed = j.at("init_seed").get<std::uint64_t>();
  m.hparams = hparams_from(j.at("hparams"));
  m.val_acc = j.at("val_acc").get<double>();
  m.path = j.at("path").get<std::string>();
  m.split = split_from_string(j.at("split").get<std::string>());
  m.attempts = j.at("attempts").get<int>();
  return m;
}

}  // namespace

std::string manifest_to_json(const CheckpointManifest& m) { return manifest_json(m).dump(2) + "\n"; }

CheckpointManifest manifest_from_json(const std::string& text) {
  try {
    return manifest_from(json::parse(text));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed checkpoint manifest: ") + e.what());
  }
}

std::pair<int, int> parse_split(const std::string& ratio, int pool_size) {
  const auto colon = ratio.find(':');
  if (colon == std::string::npos) throw ConfigError("split must look like '9:3', got '" + ratio + "'");
  double a = 0, b = 0;
  try {
    a = std::stod(ratio.substr(0, colon));
    b = std::stod(ratio.substr(colon + 1));
  } catch (const std::exception&) {
    throw ConfigError("split must look like '9:3', got '" + ratio + "'");
  }
  if (!(a > 0) || !(b > 0)) throw ConfigError("both split parts must be positive");
  const int n_train = static_cast<int>(std::lround(pool_size * a / (a + b)));
  if (n_train < 1 || n_train >= pool_size) throw ConfigError("split '" + ratio + "' leaves an empty side");
  return {n_train, pool_size - n_train};
}

// ---------------------------------------------------------------- pool

struct TeacherPool::Access {
  std::mutex mu;
  std::vector<AccessRecord> log;
  bool restricted = false;
  std::vector<std::string> allowed;
};

std::shared_ptr<TeacherPool::Access> TeacherPool::make_access() { return std::make_shared<Access>(); }

TeacherPool::TeacherPool(std::filesystem::path dir, std::string dataset, std::shared_ptr<const ArchSpec> arch,
                         std::vector<CheckpointManifest> manifests)
    : dir_(std::move(dir)), dataset_(std::move(dataset)), arch_(std::move(arch)), manifests_(std::move(manifests)) {
  const std::string fp = arch_fingerprint(*arch_);
  for (std::size_t i = 0; i < manifests_.size(); ++i) {
    if (manifests_[i].arch_fingerprint != fp)
      throw StructuralError("checkpoint " + manifests_[i].id + " has a different architecture fingerprint");
    for (std::size_t j = 0; j < i; ++j)
      if (manifests_[j].id == manifests_[i].id) throw ConfigError("duplicate checkpoint id " + manifests_[i].id);
  }
}

std::vector<std::string> TeacherPool::ids(Split s) const {
  std::vector<std::string> out;
  for (const auto& m : manifests_)
    if (m.split == s) out.push_back(m.id);
  return out;
}

const CheckpointManifest& TeacherPool::manifest(const std::string& id) const {
  for (const auto& m : manifests_)
    if (m.id == id) return m;
  throw ConfigError("no checkpoint '" + id + "' in pool " + dir_.string());
}

WeightSet TeacherPool::load(const std::string& id) const {
  const CheckpointManifest& m = manifest(id);
  {
    std::lock_guard lock(access_->mu);
    if (m.split == Split::eval && access_->restricted &&
        std::find(access_->allowed.begin(), access_->allowed.end(), id) == access_->allowed.end())
      throw ProtocolError("eval-split checkpoint " + id + " requested while eval access is restricted");
    access_->log.push_back({id, m.split});
  }
  WeightSet ws = load_weights(dir_ / m.path);
  if (!(*ws.arch == *arch_)) throw StructuralError("checkpoint " + id + " does not match the pool architecture");
  ws.arch = arch_;
  return ws;
}

std::vector<WeightSet> TeacherPool::load(const std::vector<std::string>& ids) const {
  std::vector<WeightSet> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(load(id));
  return out;
}

void TeacherPool::restrict_eval(std::vector<std::string> allowed) const {
  std::lock_guard lock(access_->mu);
  access_->restricted = true;
  access_->allowed = std::move(allowed);
}

void TeacherPool::lift_restriction() const {
  std::lock_guard lock(access_->mu);
  access_->restricted = false;
  access_->allowed.clear();
}

std::vector<AccessRecord> TeacherPool::access_log() const {
  std::lock_guard lock(access_->mu);
  return access_->log;
}

void TeacherPool::clear_access_log() const {
  std::lock_guard lock(access_->mu);
  access_->log.clear();
}

void TeacherPool::save() const {
  json j;
  j["kind"] = "teacher_pool";
  j["dataset"] = dataset_;
  j["arch"] = json::parse(arch_to_text(*arch_));
  j["arch_fingerprint"] = arch_fingerprint(*arch_);
  j["split_sizes"] = {{"train", ids(Split::train).size()}, {"eval", ids(Split::eval).size()}};
  j["checkpoints"] = json::array();
  for (const auto& m : manifests_) j["checkpoints"].push_back(manifest_json(m));
  write_text_atomic(dir_ / "pool.json", j.dump(2) + "\n");
}

TeacherPool TeacherPool::open(const std::filesystem::path& dir) {
  const auto file = dir / "pool.json";
  if (!std::filesystem::exists(file))
    throw ConfigError("no teacher pool at " + dir.string() + " (run `mepl zoo-build` first)");
  try {
    const json j = json::parse(read_text(file));
    auto arch = std::make_shared<const ArchSpec>(arch_from_text(j.at("arch").dump()));
    std::vector<CheckpointManifest> ms;
    for (const auto& m : j.at("checkpoints")) ms.push_back(manifest_from(m));
    return TeacherPool(dir, j.at("dataset").get<std::string>(), std::move(arch), std::move(ms));
  } catch (const json::exception& e) {
    throw ConfigError("malformed pool manifest " + file.string() + ": " + e.what());
  }
}

const WeightSet& TeacherCache::get(const std::string& id) {
  auto it = cache_.find(id);
  if (it == cache_.end()) it = cache_.emplace(id, pool_->load(id)).first;
  return it->second;
}

std::vector<WeightSet> TeacherCache::get(const std::vector<std::string>& ids) {
  std::vector<WeightSet> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(get(id));
  return out;
}

std::filesystem::path pool_dir(const std::filesystem::path& root, const std::string& dataset, const std::string& arch) {
  std::string d = dataset;
  for (auto& c : d)
    if (c == ':' || c == '/') c = '_';
  return root / "zoo" / d / arch;
}

TeacherPool build_pool(const ZooConfig& cfg, const Dataset& ds, const std::filesystem::path& root) {
  if (cfg.pool_size < cfg.min_tuple + 1)
    throw ConfigError("pool_size " + std::to_string(cfg.pool_size) + " is below n + 1 = " + std::to_string(cfg.min_tuple + 1));
  if (cfg.n_train < 1 || cfg.n_train >= cfg.pool_size) throw ConfigError("train split must leave a non-empty eval split");
  if (cfg.grid.empty()) throw ConfigError("hyperparameter grid is empty");
  if (cfg.jobs < 1) throw ConfigError("jobs must be at least 1");
  if (ds.id != cfg.dataset) throw ConfigError("dataset '" + ds.id + "' does not match zoo config '" + cfg.dataset + "'");

  auto arch = std::make_shared<const ArchSpec>(build_arch(cfg.arch, ds.num_classes, ds.input_shape));
  const std::string fp = arch_fingerprint(*arch);
  const auto dir = pool_dir(root, cfg.dataset, cfg.arch);
  std::filesystem::create_directories(dir);

  const std::uint64_t shared_seed = stream_seed(cfg.seed, "zoo/init");
  const double chance = 100.0 / ds.num_classes;
  std::vector<CheckpointManifest> manifests(cfg.pool_size);
  std::atomic<int> next{0};
  std::mutex err_mu;
  std::exception_ptr first_error;

  auto work = [&] {
    for (;;) {
      const int i = next++;
      if (i >= cfg.pool_size) return;
      try {
        char idbuf[16];
        std::snprintf(idbuf, sizeof idbuf, "t%03d", i);
        CheckpointManifest m;
        m.id = idbuf;
        m.dataset = cfg.dataset;
        m.arch_fingerprint = fp;
        m.hparams = cfg.grid[i % cfg.grid.size()];
        m.path = m.id + "/weights.mtc";
        const std::uint64_t base = stream_seed(cfg.seed, "zoo/" + m.id);
        FitResult res;
        for (int attempt = 0;; ++attempt) {
          m.seed = base + static_cast<std::uint64_t>(attempt);
          m.init_seed = cfg.shared_init ? shared_seed : stream_seed(m.seed, "init");
          Rng init_rng(m.init_seed);
          Rng train_rng(m.seed);
          FitConfig fc;
          fc.lr = m.hparams.lr;
          fc.epochs = m.hparams.epochs;
          fc.weight_decay = m.hparams.weight_decay;
          fc.augment = m.hparams.augment;
          fc.batch_size = m.hparams.batch_size;
          res = fit_classifier(init_weights(arch, init_rng), ds, fc, train_rng);
          m.attempts = attempt + 1;
          if (res.finite && res.val_acc > chance + 2.0) break;
          if (attempt >= cfg.max_retries)
            throw NumericError("checkpoint " + m.id + " failed to train after " + std::to_string(attempt + 1) +
                               " attempts (val acc " + std::to_string(res.val_acc) + "%)");
        }
        m.val_acc = res.val_acc;
        std::filesystem::create_directories(dir / m.id);
        save_weights(dir / m.path, res.weights);
        manifests[i] = m;
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (!first_error) first_error = std::current_exception();
        next = cfg.pool_size;
      }
    }
  };
  std::vector<std::thread> threads;
  for (int t = 1; t < std::min(cfg.jobs, cfg.pool_size); ++t) threads.emplace_back(work);
  work();
  for (auto& t : threads) t.join();
  if (first_error) std::rethrow_exception(first_error);

  std::vector<int> order(cfg.pool_size);
  for (int i = 0; i < cfg.pool_size; ++i) order[i] = i;
  Rng split_rng(cfg.seed, "zoo/split");
  split_rng.shuffle(order.begin(), order.end());
  for (int r = 0; r < cfg.pool_size; ++r) manifests[order[r]].split = r < cfg.n_train ? Split::train : Split::eval;
  for (const auto& m : manifests) write_text_atomic(dir / m.id / "manifest.json", manifest_to_json(m));

  TeacherPool pool(dir, cfg.dataset, arch, std::move(manifests));
  pool.save();
  return pool;
}

std::vector<std::string> sample_teacher_ids(const TeacherPool& pool, int n, Split split, Rng& rng) {
  const auto ids = pool.ids(split);
  if (n < 1 || n > static_cast<int>(ids.size()))
    throw ConfigError("cannot sample " + std::to_string(n) + " teachers from a " + to_string(split) + " split of " +
                      std::to_string(ids.size()));
  std::vector<std::string> out;
  for (int i : rng.sample_without_replacement(static_cast<int>(ids.size()), n)) out.push_back(ids[i]);
  return out;
}

std::vector<WeightSet> sample_teachers(const TeacherPool& pool, int n, Split split, Rng& rng) {
  return pool.load(sample_teacher_ids(pool, n, split, rng));
}

}  // namespace mepl
