#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "singleadv/core.hpp"
#include "singleadv/models.hpp"

#include "json.hpp"

namespace singleadv {

/// round(v * (2^bits - 1)) / (2^bits - 1) per pixel; 1 <= bits <= 8.
Image bit_depth_reduce(const Image& x, int bits);
/// Per-channel sliding median with symmetric (edge-repeating) reflection.
Image median_smooth(const Image& x, int kernel);
/// Bilinear downscale by a factor drawn from [scale_min, scale_max], pasted
/// at a random offset into a zero canvas of the original size.
Image random_resize_pad(const Image& x, double scale_min, double scale_max, RandomSource& rng);

struct TransformSpec {
  enum class Kind { kBitDepth, kMedian, kResizePad };
  Kind kind = Kind::kBitDepth;
  int bits = 4;
  int kernel = 3;
  double scale_min = 0.8;
  double scale_max = 1.0;

  static TransformSpec bit_depth(int bits = 4) { return {Kind::kBitDepth, bits, 3, 0.8, 1.0}; }
  static TransformSpec median(int kernel = 3) { return {Kind::kMedian, 4, kernel, 0.8, 1.0}; }
  static TransformSpec resize_pad(double lo = 0.8, double hi = 1.0) { return {Kind::kResizePad, 4, 3, lo, hi}; }

  void validate() const;
  /// "bit_depth:4", "median:3", "resize_pad:0.8:1.0"; parameters are optional.
  static TransformSpec parse(const std::string& text);
  std::string str() const;
};

struct DefenseChain {
  std::vector<TransformSpec> transforms;
  std::uint64_t seed = 0;

  void validate() const;
  /// "median:3+bit_depth:4".
  static DefenseChain parse(const std::string& text, std::uint64_t seed = 0);
  std::string str() const;
};

Image apply_transform(const Image& x, const TransformSpec& t, RandomSource& rng);
/// Left-to-right composition. The overload without rng draws from RandomSource(chain.seed).
Image apply_chain(const Image& x, const DefenseChain& chain, RandomSource& rng);
Image apply_chain(const Image& x, const DefenseChain& chain);

/// The three pairs (bit depth + median, bit depth + resize-pad, median + resize-pad) at default settings.
std::vector<DefenseChain> pairwise_chains(std::uint64_t seed = 0);

/// Fraction of defended perturbed source samples predicted as `target`.
/// Sample i draws its randomness from RandomSource(chain.seed).fork(i).
double defended_fooling_ratio(const Classifier& h, const DefenseChain& chain, const Tensor& p,
                              const LabeledDataset& source, int target);
double defended_accuracy(const Classifier& h, const DefenseChain& chain, const LabeledDataset& data);

struct AdvTrainConfig {
  /// Per-batch sign step of the shared perturbation.
  double epsilon = 0.031;
  /// l-inf projection radius; defaults to epsilon when unset.
  std::optional<double> radius;
  double lr_initial = 0.1;
  double lr_final = 0.001;
  LrDecay decay = LrDecay::kCosine;
  double momentum = 0.9;
  double threshold = 0.3;
  int epochs = 500;
  int batch_size = 128;
  std::uint64_t seed = 0;

  static AdvTrainConfig full();
  static AdvTrainConfig reduced();
  double projection_radius() const { return radius.value_or(epsilon); }
  TrainConfig as_train_config() const;
  void validate() const;
};

struct AdvTrainResult {
  Classifier model;
  Tensor delta;
  double max_delta_norm = 0.0;
};

/// Interpretation-masked adversarial training continuing from h. `maps`
/// are per-sample attribution maps (H x W) aligned with data.samples; they
/// are binarized at cfg.threshold. `initial_delta` seeds the shared
/// perturbation (zeros when absent) and is projected first.
AdvTrainResult adversarial_train(const Classifier& h, const LabeledDataset& data, const std::vector<Tensor>& maps,
                                 const AdvTrainConfig& cfg, const Tensor* initial_delta = nullptr);

}  // namespace singleadv
