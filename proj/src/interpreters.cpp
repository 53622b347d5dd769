#include "singleadv/interpreters.hpp"

#include <algorithm>
#include <cmath>

namespace singleadv {

InterpreterKind parse_interpreter(const std::string& id) {
  if (id == "cam") return InterpreterKind::kCam;
  if (id == "grad") return InterpreterKind::kGrad;
  if (id == "mask") return InterpreterKind::kMask;
  throw ParameterError("unknown interpreter '" + id + "' (expected cam, grad or mask)");
}

const char* interpreter_name(InterpreterKind kind) {
  switch (kind) {
    case InterpreterKind::kCam:
      return "cam";
    case InterpreterKind::kGrad:
      return "grad";
    case InterpreterKind::kMask:
      return "mask";
  }
  return "?";
}

void MaskConfig::validate() const {
  if (inner_steps < 1) throw ParameterError("mask: inner steps must be >= 1");
  if (!(sparsity_weight > 0.0)) throw ParameterError("mask: sparsity weight must be positive");
  if (!(step_size > 0.0)) throw ParameterError("mask: step size must be positive");
  if (!(blur_sigma > 0.0)) throw ParameterError("mask: blur sigma must be positive");
  if (noise_stddev < 0.0) throw ParameterError("mask: noise stddev must be >= 0");
}

Tensor normalize_map(const Tensor& raw) {
  ad::NoGradGuard guard;
  return ad::minmax_normalize(ad::constant(raw))->value;
}

Tensor cam_weighted_sum(const Tensor& activations, const Tensor& weights) {
  ad::NoGradGuard guard;
  return ad::channel_weighted_sum(ad::constant(activations), weights)->value;
}

Tensor bilinear_matrix(int out_size, int in_size) {
  Tensor m({out_size, in_size}, 0.0);
  const double ratio = static_cast<double>(in_size) / out_size;
  for (int i = 0; i < out_size; ++i) {
    const double src = std::clamp((i + 0.5) * ratio - 0.5, 0.0, static_cast<double>(in_size - 1));
    const int i0 = static_cast<int>(std::floor(src));
    const int i1 = std::min(i0 + 1, in_size - 1);
    const double frac = src - i0;
    m[static_cast<std::size_t>(i) * in_size + i0] += 1.0 - frac;
    m[static_cast<std::size_t>(i) * in_size + i1] += frac;
  }
  return m;
}

Tensor gaussian_blur_matrix(int size, double sigma) {
  Tensor m({size, size}, 0.0);
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  for (int i = 0; i < size; ++i) {
    double total = 0.0;
    for (int d = -radius; d <= radius; ++d) {
      const double w = std::exp(-0.5 * d * d / (sigma * sigma));
      const int j = std::clamp(i + d, 0, size - 1);
      m[static_cast<std::size_t>(i) * size + j] += w;
      total += w;
    }
    for (int j = 0; j < size; ++j) m[static_cast<std::size_t>(i) * size + j] /= total;
  }
  return m;
}

namespace {

void check_category(const Classifier& h, int y) {
  if (y < 0 || y >= h.num_categories()) throw ParameterError("interpreter: category out of range");
}

}  // namespace

ad::Var cam_from_features(const Classifier& h, const ad::Var& features, int y) {
  const Tensor w = class_weights(h, y);
  auto raw = ad::channel_weighted_sum(features, w);
  const ImageShape& s = h.input_shape();
  const int fh = raw->value.dim(0), fw = raw->value.dim(1);
  auto up = ad::spatial_linear(raw, bilinear_matrix(s.height, fh), bilinear_matrix(s.width, fw));
  return ad::minmax_normalize(up);
}

namespace {

ad::Var cam_graph(const Classifier& h, const ad::Var& x, int y) {
  return cam_from_features(h, forward(h, x, ReluMode::exact()).features, y);
}

ad::Var grad_graph(const Classifier& h, const ad::Var& x, int y, const ReluMode& mode) {
  const bool outer = x->requires_grad && ad::grad_enabled();
  ad::GradModeGuard mode_guard(true);
  ad::Var xv = outer ? x : ad::variable(x->value);
  auto score = ad::gather_flat(forward(h, xv, mode).logits, static_cast<std::size_t>(y));
  auto g = ad::abs(ad::grad(score, {xv}, outer)[0]);
  const Tensor& gv = g->value;
  const int C = gv.dim(0);
  const std::size_t plane = gv.size() / static_cast<std::size_t>(C);
  std::vector<int> argmax(plane, 0);
  for (std::size_t p = 0; p < plane; ++p)
    for (int c = 1; c < C; ++c)
      if (gv[c * plane + p] > gv[static_cast<std::size_t>(argmax[p]) * plane + p]) argmax[p] = c;
  return ad::minmax_normalize(ad::gather_channels(g, argmax));
}

struct MaskGraph {
  ad::Var attribution;
  ad::Var mask;
};

MaskGraph mask_graph(const Classifier& h, const ad::Var& x, int y, const MaskConfig& cfg) {
  cfg.validate();
  const bool outer = x->requires_grad && ad::grad_enabled();
  ad::GradModeGuard mode_guard(true);
  const ImageShape& s = h.input_shape();
  ad::Var baseline = ad::spatial_linear(x, gaussian_blur_matrix(s.height, cfg.blur_sigma),
                                        gaussian_blur_matrix(s.width, cfg.blur_sigma));
  if (cfg.noise_stddev > 0.0) {
    RandomSource rng(cfg.seed);
    Tensor noise(s.dims());
    for (double& v : noise.data) v = cfg.noise_stddev * rng.normal();
    baseline = ad::add_const(baseline, noise);
  }
  ad::Var diff = ad::sub(x, baseline);
  const Tensor lambda({s.height, s.width}, -cfg.sparsity_weight);
  ad::Var mask = ad::variable(Tensor({s.height, s.width}, 1.0));
  for (int k = 0; k < cfg.inner_steps; ++k) {
    ad::Var phi = ad::add(baseline, ad::mul(ad::broadcast_channels(mask, s.channels), diff));
    auto logp = ad::gather_flat(ad::log_softmax(forward(h, phi, ReluMode::exact()).logits), static_cast<std::size_t>(y));
    auto gm = ad::grad(ad::exp(logp), {mask}, outer)[0];
    // d/dmask of lambda * |1 - mask|_1 is -lambda on the feasible box.
    mask = ad::clamp(ad::sub(mask, ad::scale(ad::add_const(gm, lambda), cfg.step_size)), 0.0, 1.0);
    if (!outer) mask = ad::variable(mask->value);
  }
  return {ad::minmax_normalize(ad::scale(mask, -1.0)), mask};
}

}  // namespace

AttributionMap cam(const Classifier& h, const Image& x, int y) {
  check_category(h, y);
  ad::NoGradGuard guard;
  return {cam_graph(h, ad::constant(x), y)->value, InterpreterKind::kCam, y};
}

AttributionMap grad(const Classifier& h, const Image& x, int y, const ReluMode& mode) {
  check_category(h, y);
  return {grad_graph(h, ad::constant(x), y, mode)->value, InterpreterKind::kGrad, y};
}

MaskInterpretation mask_interpret(const Classifier& h, const Image& x, const MaskConfig& cfg, int y) {
  if (y < 0) y = predict(h, x).label;
  check_category(h, y);
  auto g = mask_graph(h, ad::constant(x), y, cfg);
  for (double v : g.mask->value.data) {
    if (!std::isfinite(v)) throw std::runtime_error("mask interpreter: non-finite inner objective");
  }
  return {{g.attribution->value, InterpreterKind::kMask, y}, g.mask->value};
}

AttributionMap interpret(InterpreterKind kind, const Classifier& h, const Image& x, int y,
                         const InterpreterOptions& opts) {
  switch (kind) {
    case InterpreterKind::kCam:
      return cam(h, x, y);
    case InterpreterKind::kGrad:
      return grad(h, x, y, ReluMode::exact());
    case InterpreterKind::kMask:
      return mask_interpret(h, x, opts.mask, y).map;
  }
  throw ParameterError("unknown interpreter");
}

ad::Var attribution_graph(InterpreterKind kind, const Classifier& h, const ad::Var& x, int y,
                          const InterpreterOptions& opts) {
  check_category(h, y);
  switch (kind) {
    case InterpreterKind::kCam:
      return cam_graph(h, x, y);
    case InterpreterKind::kGrad:
      return grad_graph(h, x, y, opts.grad_surrogate);
    case InterpreterKind::kMask:
      return mask_graph(h, x, y, opts.mask).attribution;
  }
  throw ParameterError("unknown interpreter");
}

double interpretation_loss_at(InterpreterKind kind, const Classifier& h, const Image& x, int y, const Tensor& target,
                              const InterpreterOptions& opts) {
  auto m = attribution_graph(kind, h, ad::constant(x), y, opts);
  require_same_shape(m->value, target, "interpretation loss");
  double s = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double d = m->value[i] - target[i];
    s += d * d;
  }
  return s;
}

InterpretationGradient interpreter_gradient(const Classifier& h, const Image& x, int y, const Tensor& target,
                                            InterpreterKind kind, const InterpreterOptions& opts, double weight) {
  require_image_shape(x, h.input_shape(), "interpreter_gradient");
  auto xv = ad::variable(x);
  auto m = attribution_graph(kind, h, xv, y, opts);
  require_same_shape(m->value, target, "interpreter_gradient target");
  auto loss = ad::squared_distance(m, ad::constant(target));
  Tensor g = ad::grad(loss, {xv})[0]->value;
  if (weight != 1.0)
    for (double& v : g.data) v *= weight;
  return {loss->value.item(), std::move(g)};
}

}  // namespace singleadv
