#pragma once

#include <cstdint>
#include <string>

#include "singleadv/autodiff.hpp"
#include "singleadv/models.hpp"

namespace singleadv {

enum class InterpreterKind { kCam, kGrad, kMask };
InterpreterKind parse_interpreter(const std::string& id);
const char* interpreter_name(InterpreterKind kind);

/// Per-pixel importance over the image plane, values in [0, 1].
struct AttributionMap {
  Tensor values;
  InterpreterKind interpreter = InterpreterKind::kCam;
  int category = 0;
};

/// Deletion-game settings. The deletion operator replaces pixels by a
/// Gaussian-blurred copy of the image, optionally with fixed seeded noise.
struct MaskConfig {
  double sparsity_weight = 0.05;
  int inner_steps = 20;
  double step_size = 0.5;
  double blur_sigma = 2.0;
  double noise_stddev = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct InterpreterOptions {
  MaskConfig mask;
  /// Activation surrogate used when differentiating the Grad map.
  ReluMode grad_surrogate = ReluMode::smoothed(1e-4);
};

/// Min-max normalization; a constant map becomes all zeros.
Tensor normalize_map(const Tensor& raw);

/// Sum_i w_i * a_i over (C, h, w) activations.
Tensor cam_weighted_sum(const Tensor& activations, const Tensor& weights);
/// Row-interpolation matrix for align-corners-false bilinear resampling.
Tensor bilinear_matrix(int out_size, int in_size);
/// Row-stochastic Gaussian blur with replicated borders.
Tensor gaussian_blur_matrix(int size, double sigma);

AttributionMap cam(const Classifier& h, const Image& x, int y);
AttributionMap grad(const Classifier& h, const Image& x, int y, const ReluMode& mode = ReluMode::exact());

struct MaskInterpretation {
  AttributionMap map;
  Tensor mask;
};
/// Projected gradient descent on f_y(phi(x; mask)) + lambda * |1 - mask|_1 starting
/// from an all-ones mask. y < 0 means the predicted category.
MaskInterpretation mask_interpret(const Classifier& h, const Image& x, const MaskConfig& cfg, int y = -1);

AttributionMap interpret(InterpreterKind kind, const Classifier& h, const Image& x, int y,
                         const InterpreterOptions& opts = {});

/// Differentiable map g(x; f) as a graph node over `x`. For kGrad this uses
/// opts.grad_surrogate; for kMask the inner loop is unrolled.
ad::Var attribution_graph(InterpreterKind kind, const Classifier& h, const ad::Var& x, int y,
                          const InterpreterOptions& opts);
/// Normalized, upsampled CAM built from last-conv activations already in a graph.
ad::Var cam_from_features(const Classifier& h, const ad::Var& features, int y);
/// |g(x; f) - m_t|^2 without building a graph.
double interpretation_loss_at(InterpreterKind kind, const Classifier& h, const Image& x, int y, const Tensor& target,
                              const InterpreterOptions& opts);

struct InterpretationGradient {
  double loss = 0.0;
  Tensor gradient;
};

/// weight * grad_x |g(x; f) - target|^2.
InterpretationGradient interpreter_gradient(const Classifier& h, const Image& x, int y, const Tensor& target,
                                            InterpreterKind kind, const InterpreterOptions& opts = {},
                                            double weight = 1.0);

}  // namespace singleadv
