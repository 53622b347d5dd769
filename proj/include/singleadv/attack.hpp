#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <span>
#include <string>
#include <vector>

#include "singleadv/core.hpp"
#include "singleadv/interpreters.hpp"
#include "singleadv/models.hpp"

namespace singleadv {

/// Settings of the single-class universal perturbation search.
struct AttackConfig {
  double eta = 0.05;
  /// Balance between the prediction loss and the interpretation loss.
  double lambda = 0.01;
  int batch_size = 16;
  double gamma = 0.6;
  /// l-inf length of each normalized step, in pixel units. One intensity
  /// level of an 8-bit image.
  double step_scale = 1.0 / 255.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  int max_iterations = 5000;
  int check_interval = 50;
  InterpreterKind interpreter = InterpreterKind::kCam;
  int source_category = 0;
  int target_category = 1;
  std::uint64_t seed = 0;
  /// Fraction of the source pool held out to evaluate the stopping rule.
  double validation_fraction = 0.2;
  InterpreterOptions interpreter_options;

  void validate() const;
};

/// First and second raw moment estimates with the iteration counter.
struct MomentState {
  Tensor upsilon;
  Tensor omega;
  long i = 0;

  static MomentState zeros(const Shape& shape);
};

struct AttackTraceRow {
  int iteration = 0;
  std::optional<double> fooling_ratio;
  double prediction_loss_mean = 0.0;
  double interpretation_loss_mean = 0.0;
  double delta = 0.0;
  double p_inf_norm = 0.0;
};

struct AttackTrace {
  std::vector<AttackTraceRow> rows;
  std::vector<std::string> warnings;
  bool converged = false;
  int iterations = 0;
  double best_fooling_ratio = 0.0;
  int best_iteration = 0;
};

/// iteration,fooling_ratio,L_prd_mean,L_int_mean,delta,p_inf_norm; an
/// unmeasured fooling ratio is left empty. `preamble` lines are written as
/// leading '#' comments.
void write_trace_csv(const std::filesystem::path& path, const AttackTrace& trace,
                     const std::vector<std::string>& preamble = {});

/// Cross-entropy of the prediction against y.
double prediction_loss(const Classifier& h, const Image& x, int y);
/// Sum of squared differences between two maps.
double interpretation_loss(const Tensor& m, const Tensor& target);

/// Mean l2 norm of the source gradients over that of the non-source ones.
/// A zero denominator yields 1 and sets *clamped.
double gradient_ratio(std::span<const Tensor> source, std::span<const Tensor> nonsource, bool* clamped = nullptr);
/// 0.5 * (mean(source) + delta * mean(nonsource)).
Tensor combined_gradient(std::span<const Tensor> source, std::span<const Tensor> nonsource, double delta);
void moment_update(MomentState& state, const Tensor& xi, double beta1 = 0.9, double beta2 = 0.999);
/// sqrt(1 - beta2^i) / (1 - beta1^i) * upsilon / sqrt(omega); zero where omega is zero.
Tensor bias_corrected_step(const MomentState& state, double beta1 = 0.9, double beta2 = 0.999);
/// p + scale * pbar / |pbar|_inf. An all-zero pbar leaves p unchanged and sets *skipped.
Tensor normalized_update(const Tensor& p, const Tensor& pbar, bool* skipped = nullptr, double scale = 1.0);
/// sign(p) * min(|p|, eta).
Tensor project_linf(const Tensor& p, double eta);

struct SampleGradient {
  double prediction_loss = 0.0;
  double interpretation_loss = 0.0;
  Tensor gradient;
};

/// grad_x [ L_prd(f(x), loss_target) + lambda * |g_{map_class}(x) - target_map|^2 ] at an
/// already-perturbed input.
SampleGradient sample_gradient(const Classifier& h, const Image& x, int loss_target, int map_class,
                               const Tensor& target_map, double lambda, InterpreterKind kind,
                               const InterpreterOptions& opts);

/// Raised when a loss becomes non-finite; carries the trace so far.
class AttackError : public std::runtime_error {
 public:
  AttackError(const std::string& what, AttackTrace trace) : std::runtime_error(what), trace(std::move(trace)) {}
  AttackTrace trace;
};

struct SourceSplit {
  LabeledDataset train;
  LabeledDataset validation;
};
/// Deterministic hold-out of cfg.validation_fraction of the source pool.
SourceSplit split_source(const LabeledDataset& source, const AttackConfig& cfg);

struct AttackResult {
  Perturbation perturbation;
  AttackTrace trace;
};

/// Crafts a universal perturbation that moves `source` samples into
/// cfg.target_category while keeping `nonsource` predictions and all
/// attribution maps close to their benign values.
AttackResult generate_universal_perturbation(const Classifier& h, const LabeledDataset& source,
                                             const LabeledDataset& nonsource, const AttackConfig& cfg);

/// Fraction of `samples` predicted as `target` after subtracting p.
double perturbed_hit_rate(const Classifier& h, const LabeledDataset& samples, const Tensor& p, int target);

struct LambdaSearchResult {
  double lambda = 0.0;
  double validation_iou = 0.0;
  bool reached_gamma = false;
  std::vector<double> candidates;
  std::vector<double> candidate_iou;
  std::vector<bool> candidate_converged;
};

/// Runs the attack for each candidate and keeps the one with the best mean
/// validation IoU among runs that reach gamma (best fooling ratio otherwise).
LambdaSearchResult select_lambda(const Classifier& h, const LabeledDataset& source, const LabeledDataset& nonsource,
                                 const AttackConfig& cfg, const std::vector<double>& candidates = {1e-3, 1e-2, 1e-1, 1.0});

}  // namespace singleadv
