#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "singleadv/autodiff.hpp"
#include "singleadv/core.hpp"

namespace singleadv {

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, long iteration)
      : std::runtime_error(what + " (iteration " + std::to_string(iteration) + ")"), iteration_(iteration) {}
  long iteration() const { return iteration_; }

 private:
  long iteration_;
};

class UnsupportedArchitecture : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ConvSpec {
  int out_channels = 8;
  int stride = 1;
  int kernel = 3;
  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

enum class HeadKind { kGapLinear, kFlattenLinear };

/// Conv blocks (3x3, "same" padding, ReLU) followed by a linear head.
struct ArchSpec {
  std::string id;
  std::vector<ConvSpec> convs;
  HeadKind head = HeadKind::kGapLinear;
};

/// Built-in architectures: "cnn-small", "cnn-wide", "cnn-deep", "linear".
ArchSpec architecture(const std::string& id);
std::size_t parameter_count(const ArchSpec& arch, const ImageShape& input, int num_categories);

/// How ReLU units behave when differentiated. The smoothed mode swaps the
/// activation for the surrogate whose derivative is smoothed_relu_grad.
struct ReluMode {
  enum class Kind { kExact, kSmoothed };
  Kind kind = Kind::kExact;
  double tau = 1e-4;
  bool swap_branches = false;

  static ReluMode exact() { return {}; }
  static ReluMode smoothed(double tau = 1e-4, bool swap = false) { return {Kind::kSmoothed, tau, swap}; }
};

/// h(z) = 1 + z/sqrt(z^2+tau) for z < 0 and z/sqrt(z^2+tau) for z >= 0.
/// swap_branches exchanges which formula applies on which side of zero.
double smoothed_relu_grad(double z, double tau, bool swap_branches = false);

/// Instrumented classifier: predictions, input gradients, last-conv feature
/// maps and head weights. Read-only use is safe from several threads.
class Classifier {
 public:
  Classifier(ArchSpec arch, ImageShape input, int num_categories, std::uint64_t init_seed);

  const ArchSpec& arch() const { return arch_; }
  const ImageShape& input_shape() const { return input_; }
  int num_categories() const { return num_categories_; }
  /// (channels, h, w) of the last conv activation; the input shape when there are no convs.
  Shape last_conv_shape() const;
  bool cam_compatible() const { return arch_.head == HeadKind::kGapLinear; }

  ReluMode relu_mode;
  std::optional<double> held_out_accuracy;
  std::uint64_t training_seed = 0;

  /// Parameter order: (weight, bias) per conv block, then head weight (K x F) and bias (K).
  const std::vector<ad::Var>& parameters() const { return params_; }
  std::vector<Tensor> parameter_values() const;
  void set_parameter_values(const std::vector<Tensor>& values);
  /// FNV-1a over the raw parameter bytes.
  std::string fingerprint() const;

 private:
  ArchSpec arch_;
  ImageShape input_;
  int num_categories_;
  std::vector<ad::Var> params_;
};

struct ForwardPass {
  ad::Var logits;
  ad::Var features;
};

/// Graph-building forward pass using `params` (constants or variables).
ForwardPass forward(const Classifier& h, const ad::Var& x, const std::vector<ad::Var>& params, const ReluMode& mode);
ForwardPass forward(const Classifier& h, const ad::Var& x, const ReluMode& mode);

struct Prediction {
  Tensor probabilities;
  int label = 0;
  double confidence() const { return probabilities[static_cast<std::size_t>(label)]; }
};

Prediction predict(const Classifier& h, const Image& x);
Tensor logits(const Classifier& h, const Image& x);

enum class LossKind { kCrossEntropyToTarget, kClassScore };
struct LossSpec {
  LossKind kind = LossKind::kCrossEntropyToTarget;
  int target = 0;
};

/// Scalar loss node for a forward pass.
ad::Var loss_node(const ForwardPass& fp, const LossSpec& spec);
double loss_value(const Classifier& h, const Image& x, const LossSpec& spec, const ReluMode& mode);
/// Gradient of the loss with respect to every pixel under h.relu_mode.
Tensor input_gradient(const Classifier& h, const Image& x, const LossSpec& spec);
Tensor input_gradient(const Classifier& h, const Image& x, const LossSpec& spec, const ReluMode& mode);

Tensor feature_maps(const Classifier& h, const Image& x);
/// Head row w_{., y}; requires the global-average-pool + linear head.
Tensor class_weights(const Classifier& h, int y);
double class_bias(const Classifier& h, int y);

enum class LrDecay { kConstant, kLinear, kCosine, kExponential };

struct TrainConfig {
  int epochs = 5;
  int batch_size = 32;
  double lr_initial = 0.05;
  double lr_final = 0.005;
  LrDecay decay = LrDecay::kCosine;
  double momentum = 0.9;
  std::uint64_t seed = 1;

  void validate() const;
  double learning_rate(long step, long total_steps) const;
};

/// Momentum state in the form g <- mu g - grad; w <- w + lr g.
struct MomentumSgd {
  std::vector<Tensor> velocity;
  void step(Classifier& h, const std::vector<Tensor>& grads, double lr, double momentum);
};

/// Sum over a batch of per-sample parameter gradients of cross-entropy, divided by the batch size.
/// `inputs` are already-transformed images. Returns the mean loss.
double batch_parameter_gradient(const Classifier& h, const std::vector<Image>& inputs, const std::vector<int>& labels,
                                std::vector<Tensor>& grads);

/// Momentum SGD from the current parameters; the sample order comes from cfg.seed.
void continue_training(Classifier& h, const LabeledDataset& data, const TrainConfig& cfg);

Classifier train_classifier(const LabeledDataset& data, const ArchSpec& arch, const TrainConfig& cfg,
                            const LabeledDataset* held_out = nullptr);

double accuracy(const Classifier& h, const LabeledDataset& data);

struct ModelManifest {
  std::string architecture;
  int num_categories = 0;
  ImageShape input_shape;
  std::uint64_t training_seed = 0;
  std::optional<double> accuracy;
  std::string fingerprint;
  std::map<std::string, std::string> extra;
};

inline constexpr std::uint8_t kCheckpointFormatVersion = 1;
/// Writes `<stem>.bin` parameters and a `<stem>.json` manifest.
void save_checkpoint(const std::filesystem::path& bin_path, const Classifier& h,
                     const std::map<std::string, std::string>& extra = {});
Classifier load_checkpoint(const std::filesystem::path& bin_path, ModelManifest* manifest = nullptr);

}  // namespace singleadv
