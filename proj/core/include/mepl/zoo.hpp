#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mepl/arch.hpp"
#include "mepl/dataset.hpp"
#include "mepl/fit.hpp"
#include "mepl/rng.hpp"

namespace mepl {

enum class Split { train, eval };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct TeacherHparams {
  double lr = 3e-3;
  int epochs = 15;
  double weight_decay = 0.0;
  bool augment = false;
  int batch_size = 32;

  bool operator==(const TeacherHparams&) const = default;
};

/// Two learning rates crossed with augmentation off/on.
std::vector<TeacherHparams> default_hparam_grid();

struct CheckpointManifest {
  std::string id;
  std::string dataset;
  std::string arch_fingerprint;
  std::uint64_t seed = 0;       // data order and augmentation stream of the accepted attempt
  std::uint64_t init_seed = 0;  // weight initialization stream
  TeacherHparams hparams;
  double val_acc = 0.0;
  std::string path;  // weights file, relative to the pool directory
  Split split = Split::train;
  int attempts = 1;

  bool operator==(const CheckpointManifest&) const = default;
};

std::string manifest_to_json(const CheckpointManifest& m);
CheckpointManifest manifest_from_json(const std::string& text);

struct ZooConfig {
  std::string dataset = "digits";
  std::string arch = "cnn_tiny";
  int pool_size = 12;
  int n_train = 9;  // remainder is the eval split
  std::vector<TeacherHparams> grid = default_hparam_grid();
  std::uint64_t seed = 0;
  int jobs = 1;
  /// Every checkpoint starts from one pool-level initialization; seeds and
  /// hyperparameters still differ per checkpoint.
  bool shared_init = true;
  /// Smallest tuple the pool must serve from its train split.
  int min_tuple = 3;
  int max_retries = 3;

  bool operator==(const ZooConfig&) const = default;
};

/// Parses "10:2"-style split ratios into (train, eval) counts for `pool_size`.
std::pair<int, int> parse_split(const std::string& ratio, int pool_size);

struct AccessRecord {
  std::string id;
  Split split;
};

/// Manifests of one dataset/architecture pool plus an access log. Loading an
/// eval-split checkpoint outside the current allowance is a protocol error.
class TeacherPool {
 public:
  TeacherPool() = default;
  TeacherPool(std::filesystem::path dir, std::string dataset, std::shared_ptr<const ArchSpec> arch,
              std::vector<CheckpointManifest> manifests);

  const std::filesystem::path& dir() const { return dir_; }
  const std::string& dataset() const { return dataset_; }
  std::shared_ptr<const ArchSpec> arch() const { return arch_; }
  const std::vector<CheckpointManifest>& manifests() const { return manifests_; }
  std::vector<std::string> ids(Split s) const;
  const CheckpointManifest& manifest(const std::string& id) const;

  WeightSet load(const std::string& id) const;
  std::vector<WeightSet> load(const std::vector<std::string>& ids) const;

  /// Forbids loading any eval-split checkpoint not listed.
  void restrict_eval(std::vector<std::string> allowed) const;
  void lift_restriction() const;
  std::vector<AccessRecord> access_log() const;
  void clear_access_log() const;

  void save() const;
  static TeacherPool open(const std::filesystem::path& dir);

 private:
  struct Access;
  std::filesystem::path dir_;
  std::string dataset_;
  std::shared_ptr<const ArchSpec> arch_;
  std::vector<CheckpointManifest> manifests_;
  std::shared_ptr<Access> access_ = make_access();
  static std::shared_ptr<Access> make_access();
};

/// Loads each checkpoint from disk once; access rules of the pool still apply
/// on first load.
class TeacherCache {
 public:
  explicit TeacherCache(const TeacherPool& pool) : pool_(&pool) {}
  const WeightSet& get(const std::string& id);
  std::vector<WeightSet> get(const std::vector<std::string>& ids);

 private:
  const TeacherPool* pool_;
  std::map<std::string, WeightSet> cache_;
};

/// zoo/<dataset>/<arch> below `root`; ':' in dataset ids becomes '_'.
std::filesystem::path pool_dir(const std::filesystem::path& root, const std::string& dataset, const std::string& arch);

/// Trains and persists the pool. A checkpoint whose validation accuracy does
/// not beat chance by 2 points is retrained with a fresh seed, up to
/// `max_retries` times.
TeacherPool build_pool(const ZooConfig& cfg, const Dataset& ds, const std::filesystem::path& root);

/// Ids of `n` distinct checkpoints from `split`, in sampled order.
std::vector<std::string> sample_teacher_ids(const TeacherPool& pool, int n, Split split, Rng& rng);
std::vector<WeightSet> sample_teachers(const TeacherPool& pool, int n, Split split, Rng& rng);

}  // namespace mepl
