// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "gssd/data.hpp"
#include "gssd/model.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace gssd {

/// A file could not be opened, read or written.
class IoError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// A file was readable but its contents are malformed.
class FormatError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

void write_volume(const std::filesystem::path &path, const PhaseVolume &pv);
PhaseVolume read_volume(const std::filesystem::path &path);

void write_labels(const std::filesystem::path &path, const std::vector<WeakLabel> &labels);
std::vector<WeakLabel> read_labels(const std::filesystem::path &path);

/// Ordered key=value entries; '#' starts a comment, blank lines are skipped.
class KeyValues {
public:
  static KeyValues parse(const std::string &text, const std::string &source = "<memory>");
  static KeyValues load(const std::filesystem::path &path);

  bool has(const std::string &key) const { return entries_.count(key) > 0; }
  const std::string &get(const std::string &key) const;
  void set(const std::string &key, std::string value);
  const std::map<std::string, std::string> &entries() const { return entries_; }
  const std::string &source() const { return source_; }

  double number(const std::string &key) const;
  long long integer(const std::string &key) const;
  std::uint64_t unsigned_integer(const std::string &key) const;
  bool boolean(const std::string &key) const;
  std::vector<double> numbers(const std::string &key) const;

  std::string serialize() const;

private:
  std::string source_;
  std::map<std::string, std::string> entries_;
};

/// Phantom spec file: explicit lesions (`lesion.N.center = z y x`,
/// `lesion.N.radius`, `lesion.N.delta = d0 d1 ...`) or a `random.*` sampler.
struct PhantomConfig {
  PhantomSpec base;
  std::optional<LesionSampler> sampler;
  std::optional<std::uint64_t> seed;
  /// Per-volume vendor bias drawn uniformly from [-max, max] when random.
  double vendor_bias_max = 0;
};

PhantomConfig parse_phantom_config(const KeyValues &kv);

/// Seed of the index-th volume of a set generated from `seed`.
std::uint64_t volume_seed(std::uint64_t seed, int index);

/// One phantom from its own seed: random lesions and vendor bias are drawn
/// first when the config has a sampler, then the volume itself.
Phantom generate_volume(const PhantomConfig &cfg, std::uint64_t seed);

/// Named float tensors plus a UTF-8 config echo stored last as "__config__".
struct Checkpoint {
  std::vector<NamedTensor<float>> records;
  std::string config;

  const Tensor<float> *find(const std::string &name) const;
};

void write_checkpoint(const std::filesystem::path &path, const Checkpoint &ckpt);
Checkpoint read_checkpoint(const std::filesystem::path &path);

/// Copies parameters and buffers into a checkpoint and back. Loading checks
/// every name and shape and reports the first mismatch.
void store_model(const Model<float> &model, Checkpoint &ckpt);
void load_model(const Checkpoint &ckpt, Model<float> &model);

/// One row per volume of a generated data directory.
struct ManifestEntry {
  std::string volume;
  std::string labels;
  std::uint64_t seed = 0;
  float vendor_bias = 0;
};

void write_manifest(const std::filesystem::path &dir, const std::vector<ManifestEntry> &entries);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path &dir);

/// Writes volume_NNN.gssdvol, volume_NNN.labels and manifest.csv.
std::vector<ManifestEntry> write_phantom_set(const PhantomConfig &cfg, int count, std::uint64_t seed,
                                             const std::filesystem::path &dir);

} // namespace gssd
