#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "singleadv/tensor.hpp"

namespace singleadv {

/// Image values live in [0, 1], laid out channels x height x width.
using Image = Tensor;

struct ImageShape {
  int channels = 3;
  int height = 16;
  int width = 16;

  Shape dims() const { return {channels, height, width}; }
  std::size_t size() const { return static_cast<std::size_t>(channels) * height * width; }
  bool matches(const Tensor& t) const { return t.shape == dims(); }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

void require_image_shape(const Tensor& t, const ImageShape& shape, const char* what);

enum class Split { kTrain, kTest };
const char* split_name(Split s);

struct Sample {
  Image image;
  int label = 0;
};

struct LabeledDataset {
  std::vector<Sample> samples;
  Split split = Split::kTrain;
  int num_categories = 0;
  ImageShape shape;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  /// Throws ParameterError when a label is out of range or a sample has the wrong shape.
  void validate() const;
  /// Same split and metadata, restricted to the given indices in order.
  LabeledDataset subset(const std::vector<std::size_t>& indices) const;
  LabeledDataset filter_label(int label) const;
  LabeledDataset exclude_label(int label) const;
};

/// Deterministic random stream. Draws are defined on the raw 64-bit engine
/// output so sequences are identical across standard library implementations.
class RandomSource {
 public:
  static constexpr const char* kAlgorithm = "mt19937_64/splitmix64-fork";

  explicit RandomSource(std::uint64_t seed);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();
  /// Child stream whose seed depends only on this source's seed and `stream`.
  RandomSource fork(std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_normal_ = false;
  double spare_normal_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);

/// Clamp every value into [0, 1].
Image clip_to_valid(const Tensor& image, const ImageShape& shape);

struct Perturbation {
  Tensor values;
  double eta = 0.0;
  int source_category = 0;
  int target_category = 1;
  std::uint64_t seed = 0;

  static Perturbation zeros(const ImageShape& shape, double eta, int source, int target, std::uint64_t seed = 0);
};

/// clip_to_valid(x - p). The same operator is used while crafting and evaluating.
Image apply_perturbation(const Image& x, const Perturbation& p);
Image apply_perturbation(const Image& x, const Tensor& p);

/// Uniform draw without replacement; returns dataset indices in draw order.
std::vector<std::size_t> batch_sample(std::size_t dataset_size, std::size_t count, RandomSource& rng);
std::vector<std::size_t> batch_sample(const LabeledDataset& dataset, std::size_t count, RandomSource& rng);

// Binary perturbation array: "SADV", version byte, C/H/W as u32 LE, then f32 LE values.
inline constexpr std::uint8_t kPerturbationFormatVersion = 1;
void write_perturbation_array(const std::filesystem::path& path, const Tensor& values);
Tensor read_perturbation_array(const std::filesystem::path& path);

struct PerturbationMetadata {
  double eta = 0.0;
  int source_category = 0;
  int target_category = 0;
  std::uint64_t seed = 0;
  std::string model_fingerprint;
  int iterations = 0;
  bool converged = false;
  std::string config_hash;
  std::string dataset_hash;
};

/// Writes `<stem>.sadv` and its `<stem>.json` sidecar.
void save_perturbation(const std::filesystem::path& array_path, const Perturbation& p, const PerturbationMetadata& meta);
Perturbation load_perturbation(const std::filesystem::path& array_path, PerturbationMetadata* meta = nullptr);

/// FNV-1a over raw bytes, rendered as 16 hex digits.
std::string fnv1a_hex(const void* data, std::size_t size);
std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t h = 0xcbf29ce484222325ULL);
std::string dataset_fingerprint(const LabeledDataset& dataset);

}  // namespace singleadv
