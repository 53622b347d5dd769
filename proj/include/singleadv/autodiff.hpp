#pragma once

// Reverse-mode differentiation over small dense tensors.
//
// Every backward rule is itself written with differentiable ops, so gradients
// taken with create_graph=true can be differentiated again. The interpreter
// attack terms (gradient maps, unrolled mask optimization) rely on this.

#include <functional>
#include <memory>
#include <vector>

#include "singleadv/tensor.hpp"

namespace singleadv::ad {

struct Node;
using Var = std::shared_ptr<Node>;
/// Receives the output gradient and which inputs need a gradient; entries for
/// unneeded inputs may be left null.
using BackwardFn = std::function<std::vector<Var>(const Var& grad_out, const std::vector<bool>& needed)>;

struct Node {
  Tensor value;
  bool requires_grad = false;
  std::vector<Var> inputs;
  BackwardFn backward;
};

/// Leaf that participates in differentiation.
Var variable(Tensor t);
/// Leaf that never receives a gradient.
Var constant(Tensor t);

bool grad_enabled();

/// Disables graph construction in the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Sets graph construction on or off in the current thread for its lifetime.
class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled);
  ~GradModeGuard();
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

/// Gradients of scalar `y` with respect to each of `wrt`. Unreachable inputs
/// get zeros. With create_graph the returned values are themselves
/// differentiable functions of the graph's leaves.
std::vector<Var> grad(const Var& y, const std::vector<Var>& wrt, bool create_graph = false);

// Elementwise, equal shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double k);
Var mul_const(const Var& a, const Tensor& c);
Var add_const(const Var& a, const Tensor& c);
Var exp(const Var& a);
Var abs(const Var& a);
Var relu(const Var& a);
/// Surrogate activation s(z) = sqrt(z^2 + tau) + min(z, 0) whose derivative is
/// the smoothed ReLU gradient h(z). With swap_branches the two branch formulas
/// exchange their domains.
Var smooth_relu(const Var& a, double tau, bool swap_branches);
/// h(z) applied elementwise; its derivative is h'(z) (treated as constant).
Var smooth_relu_slope(const Var& a, double tau, bool swap_branches);
/// Scalar h(z): 1 + z/sqrt(z^2+tau) for z < 0, z/sqrt(z^2+tau) for z >= 0.
double smooth_relu_slope_value(double z, double tau, bool swap_branches);
Var clamp(const Var& a, double lo, double hi);
Var reshape(const Var& a, Shape s);

// Reductions and scalar broadcast. Scalars are rank-0.
Var sum(const Var& a);
Var broadcast_scalar(const Var& s, const Shape& shape);
Var gather_flat(const Var& a, std::size_t index);
Var scatter_flat(const Var& s, std::size_t index, const Shape& shape);
Var reciprocal(const Var& s);

// Channel structure of (C, H, W) tensors.
Var sum_channels(const Var& a);
Var broadcast_channels(const Var& m, int channels);
Var gather_channels(const Var& a, const std::vector<int>& channel_of_pixel);
Var scatter_channels(const Var& g, const std::vector<int>& channel_of_pixel, int channels);
Var sum_spatial(const Var& a);
Var broadcast_spatial(const Var& v, int height, int width);
Var channel_weighted_sum(const Var& a, const Tensor& weights);
Var channel_outer(const Var& m, const Tensor& weights);

/// out_c = A * x_c * B^T for every channel; rank-2 input is one channel.
Var spatial_linear(const Var& x, const Tensor& rows, const Tensor& cols);

// 2-D convolution of a single (C, H, W) sample with (O, C, k, k) weights.
Var conv2d(const Var& x, const Var& w, int stride, int pad);
Var conv_input_grad(const Var& g, const Var& w, const Shape& input_shape, int stride, int pad);
Var conv_weight_grad(const Var& x, const Var& g, const Shape& weight_shape, int stride, int pad);

// Dense layers. W is (rows, cols).
Var matvec(const Var& w, const Var& v);
Var mat_t_vec(const Var& w, const Var& g);
Var outer(const Var& a, const Var& b);

Var log_softmax(const Var& z);

// Composites.
Var mean(const Var& a);
Var squared_distance(const Var& a, const Var& b);
/// (a - min a) / (max a - min a); a constant input yields zeros.
Var minmax_normalize(const Var& a);

}  // namespace singleadv::ad
