#include "singleadv/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>
#include <unordered_set>
#include <utility>

namespace singleadv::ad {
namespace {

thread_local bool g_grad_enabled = true;

class GradModeSetter {
 public:
  explicit GradModeSetter(bool enabled) : previous_(g_grad_enabled) { g_grad_enabled = enabled; }
  ~GradModeSetter() { g_grad_enabled = previous_; }

 private:
  bool previous_;
};

Var make(Tensor value, std::vector<Var> inputs, BackwardFn fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (g_grad_enabled) {
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Var& v) { return v && v->requires_grad; });
    if (any) {
      n->requires_grad = true;
      n->inputs = std::move(inputs);
      n->backward = std::move(fn);
    }
  }
  return n;
}

const Tensor& val(const Var& v) { return v->value; }

template <typename F>
Tensor map_unary(const Tensor& a, F f) {
  Tensor out(a.shape);
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

template <typename F>
Tensor map_binary(const Tensor& a, const Tensor& b, F f, const char* what) {
  require_same_shape(a, b, what);
  Tensor out(a.shape);
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

void require_rank(const Tensor& t, int r, const char* what) {
  if (t.rank() != r) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(r) + ", got " +
                     shape_str(t.shape));
  }
}

Tensor transpose2(const Tensor& m) {
  require_rank(m, 2, "transpose");
  const int r = m.dim(0), c = m.dim(1);
  Tensor out({c, r});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<std::size_t>(j) * r + i] = m[static_cast<std::size_t>(i) * c + j];
  return out;
}

int conv_out(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

// Accumulates out[o] += sum_{c,ky,kx} w[o,c,ky,kx] * x[c, oy*s+ky-p, ox*s+kx-p].
void conv_forward_raw(const Tensor& x, const Tensor& w, int stride, int pad, Tensor& out) {
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int O = w.dim(0), K = w.dim(2);
  const int OH = out.dim(1), OW = out.dim(2);
  for (int o = 0; o < O; ++o) {
    double* out_o = out.data.data() + static_cast<std::size_t>(o) * OH * OW;
    for (int c = 0; c < C; ++c) {
      const double* x_c = x.data.data() + static_cast<std::size_t>(c) * H * W;
      for (int ky = 0; ky < K; ++ky) {
        for (int kx = 0; kx < K; ++kx) {
          const double wv = w.data[((static_cast<std::size_t>(o) * C + c) * K + ky) * K + kx];
          if (wv == 0.0) continue;
          // ox range with 0 <= ox*s + kx - p < W
          int ox_lo = 0;
          while (ox_lo < OW && ox_lo * stride + kx - pad < 0) ++ox_lo;
          int ox_hi = OW;
          while (ox_hi > ox_lo && (ox_hi - 1) * stride + kx - pad >= W) --ox_hi;
          for (int oy = 0; oy < OH; ++oy) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= H) continue;
            const double* in_row = x_c + static_cast<std::size_t>(iy) * W + (kx - pad);
            double* out_row = out_o + static_cast<std::size_t>(oy) * OW;
            if (stride == 1) {
              for (int ox = ox_lo; ox < ox_hi; ++ox) out_row[ox] += wv * in_row[ox];
            } else {
              for (int ox = ox_lo; ox < ox_hi; ++ox) out_row[ox] += wv * in_row[ox * stride];
            }
          }
        }
      }
    }
  }
}

// gx[c, oy*s+ky-p, ox*s+kx-p] += w[o,c,ky,kx] * g[o,oy,ox]
void conv_input_grad_raw(const Tensor& g, const Tensor& w, int stride, int pad, Tensor& gx) {
  const int C = gx.dim(0), H = gx.dim(1), W = gx.dim(2);
  const int O = w.dim(0), K = w.dim(2);
  const int OH = g.dim(1), OW = g.dim(2);
  for (int o = 0; o < O; ++o) {
    const double* g_o = g.data.data() + static_cast<std::size_t>(o) * OH * OW;
    for (int c = 0; c < C; ++c) {
      double* gx_c = gx.data.data() + static_cast<std::size_t>(c) * H * W;
      for (int ky = 0; ky < K; ++ky) {
        for (int kx = 0; kx < K; ++kx) {
          const double wv = w.data[((static_cast<std::size_t>(o) * C + c) * K + ky) * K + kx];
          if (wv == 0.0) continue;
          int ox_lo = 0;
          while (ox_lo < OW && ox_lo * stride + kx - pad < 0) ++ox_lo;
          int ox_hi = OW;
          while (ox_hi > ox_lo && (ox_hi - 1) * stride + kx - pad >= W) --ox_hi;
          for (int oy = 0; oy < OH; ++oy) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= H) continue;
            double* in_row = gx_c + static_cast<std::size_t>(iy) * W + (kx - pad);
            const double* g_row = g_o + static_cast<std::size_t>(oy) * OW;
            if (stride == 1) {
              for (int ox = ox_lo; ox < ox_hi; ++ox) in_row[ox] += wv * g_row[ox];
            } else {
              for (int ox = ox_lo; ox < ox_hi; ++ox) in_row[ox * stride] += wv * g_row[ox];
            }
          }
        }
      }
    }
  }
}

// gw[o,c,ky,kx] = sum_{oy,ox} g[o,oy,ox] * x[c, oy*s+ky-p, ox*s+kx-p]
void conv_weight_grad_raw(const Tensor& x, const Tensor& g, int stride, int pad, Tensor& gw) {
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int O = gw.dim(0), K = gw.dim(2);
  const int OH = g.dim(1), OW = g.dim(2);
  for (int o = 0; o < O; ++o) {
    const double* g_o = g.data.data() + static_cast<std::size_t>(o) * OH * OW;
    for (int c = 0; c < C; ++c) {
      const double* x_c = x.data.data() + static_cast<std::size_t>(c) * H * W;
      for (int ky = 0; ky < K; ++ky) {
        for (int kx = 0; kx < K; ++kx) {
          int ox_lo = 0;
          while (ox_lo < OW && ox_lo * stride + kx - pad < 0) ++ox_lo;
          int ox_hi = OW;
          while (ox_hi > ox_lo && (ox_hi - 1) * stride + kx - pad >= W) --ox_hi;
          double acc = 0.0;
          for (int oy = 0; oy < OH; ++oy) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= H) continue;
            const double* in_row = x_c + static_cast<std::size_t>(iy) * W + (kx - pad);
            const double* g_row = g_o + static_cast<std::size_t>(oy) * OW;
            if (stride == 1) {
              for (int ox = ox_lo; ox < ox_hi; ++ox) acc += g_row[ox] * in_row[ox];
            } else {
              for (int ox = ox_lo; ox < ox_hi; ++ox) acc += g_row[ox] * in_row[ox * stride];
            }
          }
          gw.data[((static_cast<std::size_t>(o) * C + c) * K + ky) * K + kx] += acc;
        }
      }
    }
  }
}

void check_conv(const Shape& xs, const Shape& ws, int stride, int pad, const char* what) {
  if (xs.size() != 3 || ws.size() != 4 || xs[0] != ws[1] || ws[2] != ws[3] || stride < 1 || pad < 0) {
    throw ShapeError(std::string(what) + ": incompatible input " + shape_str(xs) + " and weight " +
                     shape_str(ws));
  }
}

}  // namespace

double smooth_relu_slope_value(double z, double tau, bool swap_branches) {
  const double r = z / std::sqrt(z * z + tau);
  const bool negative_branch = swap_branches ? (z >= 0.0) : (z < 0.0);
  return negative_branch ? 1.0 + r : r;
}

Var variable(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  n->requires_grad = true;
  return n;
}

Var constant(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  return n;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

GradModeGuard::GradModeGuard(bool enabled) : previous_(g_grad_enabled) { g_grad_enabled = enabled; }
GradModeGuard::~GradModeGuard() { g_grad_enabled = previous_; }

std::vector<Var> grad(const Var& y, const std::vector<Var>& wrt, bool create_graph) {
  if (y->value.size() != 1) throw ShapeError("grad: output must be a scalar, got " + shape_str(y->value.shape));

  std::vector<Node*> order;
  if (y->requires_grad) {
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{y.get(), 0}};
    seen.insert(y.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node* child = node->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::unordered_set<Node*> targets;
  for (const auto& w : wrt) targets.insert(w.get());
  // A node matters only if some target is reachable from it.
  std::unordered_set<Node*> relevant;
  for (Node* n : order) {
    bool r = targets.count(n) > 0;
    for (const auto& in : n->inputs) r = r || relevant.count(in.get()) > 0;
    if (r) relevant.insert(n);
  }

  std::unordered_map<Node*, Var> grads;
  {
    GradModeSetter mode(create_graph);
    grads[y.get()] = constant(Tensor(y->value.shape, 1.0));
    std::vector<bool> needed;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (!n->backward || !relevant.count(n)) continue;
      auto found = grads.find(n);
      if (found == grads.end()) continue;
      Var g = found->second;
      // Interior gradients are no longer needed once propagated.
      if (!targets.count(n)) grads.erase(found);
      needed.assign(n->inputs.size(), false);
      bool any = false;
      for (std::size_t i = 0; i < n->inputs.size(); ++i) {
        needed[i] = n->inputs[i]->requires_grad && relevant.count(n->inputs[i].get()) > 0;
        any = any || needed[i];
      }
      if (!any) continue;
      auto in_grads = n->backward(g, needed);
      for (std::size_t i = 0; i < n->inputs.size(); ++i) {
        if (!needed[i] || !in_grads[i]) continue;
        auto& slot = grads[n->inputs[i].get()];
        slot = slot ? add(slot, in_grads[i]) : in_grads[i];
      }
    }
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto found = grads.find(w.get());
    out.push_back(found != grads.end() ? found->second : constant(Tensor(w->value.shape, 0.0)));
  }
  return out;
}

Var add(const Var& a, const Var& b) {
  return make(map_binary(val(a), val(b), [](double p, double q) { return p + q; }, "add"), {a, b},
              [](const Var& g, const std::vector<bool>&) { return std::vector<Var>{g, g}; });
}

Var sub(const Var& a, const Var& b) {
  return make(map_binary(val(a), val(b), [](double p, double q) { return p - q; }, "sub"), {a, b},
              [](const Var& g, const std::vector<bool>& need) {
                return std::vector<Var>{g, need[1] ? scale(g, -1.0) : nullptr};
              });
}

Var mul(const Var& a, const Var& b) {
  return make(map_binary(val(a), val(b), [](double p, double q) { return p * q; }, "mul"), {a, b},
              [a, b](const Var& g, const std::vector<bool>& need) {
                return std::vector<Var>{need[0] ? mul(g, b) : nullptr, need[1] ? mul(g, a) : nullptr};
              });
}

Var scale(const Var& a, double k) {
  return make(map_unary(val(a), [k](double v) { return k * v; }), {a},
              [k](const Var& g, const std::vector<bool>&) { return std::vector<Var>{scale(g, k)}; });
}

Var mul_const(const Var& a, const Tensor& c) {
  return make(map_binary(val(a), c, [](double p, double q) { return p * q; }, "mul_const"), {a},
              [c](const Var& g, const std::vector<bool>&) { return std::vector<Var>{mul_const(g, c)}; });
}

Var add_const(const Var& a, const Tensor& c) {
  return make(map_binary(val(a), c, [](double p, double q) { return p + q; }, "add_const"), {a},
              [](const Var& g, const std::vector<bool>&) { return std::vector<Var>{g}; });
}

Var exp(const Var& a) {
  return make(map_unary(val(a), [](double v) { return std::exp(v); }), {a},
              [a](const Var& g, const std::vector<bool>&) { return std::vector<Var>{mul(g, exp(a))}; });
}

Var abs(const Var& a) {
  Tensor sign = map_unary(val(a), [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
  return make(map_unary(val(a), [](double v) { return std::abs(v); }), {a},
              [sign = std::move(sign)](const Var& g, const std::vector<bool>&) { return std::vector<Var>{mul_const(g, sign)}; });
}

Var relu(const Var& a) {
  Tensor step = map_unary(val(a), [](double v) { return v > 0.0 ? 1.0 : 0.0; });
  return make(map_unary(val(a), [](double v) { return v > 0.0 ? v : 0.0; }), {a},
              [step = std::move(step)](const Var& g, const std::vector<bool>&) { return std::vector<Var>{mul_const(g, step)}; });
}

Var smooth_relu(const Var& a, double tau, bool swap_branches) {
  Tensor out = map_unary(val(a), [tau, swap_branches](double z) {
    const double root = std::sqrt(z * z + tau);
    return swap_branches ? root + std::max(z, 0.0) : root + std::min(z, 0.0);
  });
  return make(std::move(out), {a}, [a, tau, swap_branches](const Var& g, const std::vector<bool>&) {
    return std::vector<Var>{mul(g, smooth_relu_slope(a, tau, swap_branches))};
  });
}

Var smooth_relu_slope(const Var& a, double tau, bool swap_branches) {
  Tensor curvature = map_unary(val(a), [tau](double z) {
    const double q = z * z + tau;
    return tau / (q * std::sqrt(q));
  });
  return make(map_unary(val(a), [tau, swap_branches](double z) { return smooth_relu_slope_value(z, tau, swap_branches); }),
              {a}, [curvature = std::move(curvature)](const Var& g, const std::vector<bool>&) {
                return std::vector<Var>{mul_const(g, curvature)};
              });
}

Var clamp(const Var& a, double lo, double hi) {
  Tensor inside = map_unary(val(a), [lo, hi](double v) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
  return make(map_unary(val(a), [lo, hi](double v) { return std::clamp(v, lo, hi); }), {a},
              [inside = std::move(inside)](const Var& g, const std::vector<bool>&) { return std::vector<Var>{mul_const(g, inside)}; });
}

Var reshape(const Var& a, Shape s) {
  if (shape_size(s) != val(a).size()) throw ShapeError("reshape: size mismatch to " + shape_str(s));
  Shape original = val(a).shape;
  return make(Tensor(std::move(s), val(a).data), {a},
              [original](const Var& g, const std::vector<bool>&) { return std::vector<Var>{reshape(g, original)}; });
}

Var sum(const Var& a) {
  Shape s = val(a).shape;
  return make(Tensor::scalar(val(a).sum()), {a},
              [s](const Var& g, const std::vector<bool>&) { return std::vector<Var>{broadcast_scalar(g, s)}; });
}

Var broadcast_scalar(const Var& s, const Shape& shape) {
  return make(Tensor(shape, val(s).item()), {s}, [](const Var& g, const std::vector<bool>&) { return std::vector<Var>{sum(g)}; });
}

Var gather_flat(const Var& a, std::size_t index) {
  Shape s = val(a).shape;
  return make(Tensor::scalar(val(a).data.at(index)), {a},
              [s, index](const Var& g, const std::vector<bool>&) { return std::vector<Var>{scatter_flat(g, index, s)}; });
}

Var scatter_flat(const Var& s, std::size_t index, const Shape& shape) {
  Tensor out(shape, 0.0);
  out.data.at(index) = val(s).item();
  return make(std::move(out), {s}, [index](const Var& g, const std::vector<bool>&) { return std::vector<Var>{gather_flat(g, index)}; });
}

Var reciprocal(const Var& s) {
  return make(map_unary(val(s), [](double v) { return 1.0 / v; }), {s}, [s](const Var& g, const std::vector<bool>&) {
    Var r = reciprocal(s);
    return std::vector<Var>{scale(mul(g, mul(r, r)), -1.0)};
  });
}

Var sum_channels(const Var& a) {
  const Tensor& t = val(a);
  require_rank(t, 3, "sum_channels");
  const int C = t.dim(0), H = t.dim(1), W = t.dim(2);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  Tensor out({H, W}, 0.0);
  for (int c = 0; c < C; ++c)
    for (std::size_t p = 0; p < plane; ++p) out[p] += t[c * plane + p];
  return make(std::move(out), {a}, [C](const Var& g, const std::vector<bool>&) { return std::vector<Var>{broadcast_channels(g, C)}; });
}

Var broadcast_channels(const Var& m, int channels) {
  const Tensor& t = val(m);
  require_rank(t, 2, "broadcast_channels");
  const std::size_t plane = t.size();
  Tensor out({channels, t.dim(0), t.dim(1)});
  for (int c = 0; c < channels; ++c)
    std::copy(t.data.begin(), t.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(c * plane));
  return make(std::move(out), {m}, [](const Var& g, const std::vector<bool>&) { return std::vector<Var>{sum_channels(g)}; });
}

Var gather_channels(const Var& a, const std::vector<int>& channel_of_pixel) {
  const Tensor& t = val(a);
  require_rank(t, 3, "gather_channels");
  const int C = t.dim(0), H = t.dim(1), W = t.dim(2);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  if (channel_of_pixel.size() != plane) throw ShapeError("gather_channels: index map size mismatch");
  Tensor out({H, W});
  for (std::size_t p = 0; p < plane; ++p) out[p] = t[static_cast<std::size_t>(channel_of_pixel[p]) * plane + p];
  return make(std::move(out), {a}, [channel_of_pixel, C](const Var& g, const std::vector<bool>&) {
    return std::vector<Var>{scatter_channels(g, channel_of_pixel, C)};
  });
}

Var scatter_channels(const Var& g, const std::vector<int>& channel_of_pixel, int channels) {
  const Tensor& t = val(g);
  require_rank(t, 2, "scatter_channels");
  const std::size_t plane = t.size();
  Tensor out({channels, t.dim(0), t.dim(1)}, 0.0);
  for (std::size_t p = 0; p < plane; ++p) out[static_cast<std::size_t>(channel_of_pixel[p]) * plane + p] = t[p];
  return make(std::move(out), {g}, [channel_of_pixel](const Var& gg, const std::vector<bool>&) {
    return std::vector<Var>{gather_channels(gg, channel_of_pixel)};
  });
}

Var sum_spatial(const Var& a) {
  const Tensor& t = val(a);
  require_rank(t, 3, "sum_spatial");
  const int C = t.dim(0), H = t.dim(1), W = t.dim(2);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  Tensor out({C}, 0.0);
  for (int c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t p = 0; p < plane; ++p) s += t[c * plane + p];
    out[static_cast<std::size_t>(c)] = s;
  }
  return make(std::move(out), {a}, [H, W](const Var& g, const std::vector<bool>&) { return std::vector<Var>{broadcast_spatial(g, H, W)}; });
}

Var broadcast_spatial(const Var& v, int height, int width) {
  const Tensor& t = val(v);
  require_rank(t, 1, "broadcast_spatial");
  const int C = t.dim(0);
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  Tensor out({C, height, width});
  for (int c = 0; c < C; ++c)
    std::fill_n(out.data.begin() + static_cast<std::ptrdiff_t>(c * plane), plane, t[static_cast<std::size_t>(c)]);
  return make(std::move(out), {v}, [](const Var& g, const std::vector<bool>&) { return std::vector<Var>{sum_spatial(g)}; });
}

Var channel_weighted_sum(const Var& a, const Tensor& weights) {
  const Tensor& t = val(a);
  require_rank(t, 3, "channel_weighted_sum");
  const int C = t.dim(0), H = t.dim(1), W = t.dim(2);
  if (weights.size() != static_cast<std::size_t>(C)) throw ShapeError("channel_weighted_sum: weight length mismatch");
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  Tensor out({H, W}, 0.0);
  for (int c = 0; c < C; ++c) {
    const double wc = weights[static_cast<std::size_t>(c)];
    for (std::size_t p = 0; p < plane; ++p) out[p] += wc * t[c * plane + p];
  }
  return make(std::move(out), {a}, [weights](const Var& g, const std::vector<bool>&) { return std::vector<Var>{channel_outer(g, weights)}; });
}

Var channel_outer(const Var& m, const Tensor& weights) {
  const Tensor& t = val(m);
  require_rank(t, 2, "channel_outer");
  const int C = static_cast<int>(weights.size());
  const std::size_t plane = t.size();
  Tensor out({C, t.dim(0), t.dim(1)});
  for (int c = 0; c < C; ++c)
    for (std::size_t p = 0; p < plane; ++p) out[c * plane + p] = weights[static_cast<std::size_t>(c)] * t[p];
  return make(std::move(out), {m},
              [weights](const Var& g, const std::vector<bool>&) { return std::vector<Var>{channel_weighted_sum(g, weights)}; });
}

Var spatial_linear(const Var& x, const Tensor& rows, const Tensor& cols) {
  const Tensor& t = val(x);
  require_rank(rows, 2, "spatial_linear rows");
  require_rank(cols, 2, "spatial_linear cols");
  const bool planar = t.rank() == 2;
  if (!planar) require_rank(t, 3, "spatial_linear");
  const int C = planar ? 1 : t.dim(0);
  const int H = t.dim(planar ? 0 : 1), W = t.dim(planar ? 1 : 2);
  if (rows.dim(1) != H || cols.dim(1) != W) throw ShapeError("spatial_linear: operator shape mismatch");
  const int HO = rows.dim(0), WO = cols.dim(0);
  Tensor out(planar ? Shape{HO, WO} : Shape{C, HO, WO}, 0.0);
  std::vector<double> tmp(static_cast<std::size_t>(H) * WO);
  for (int c = 0; c < C; ++c) {
    const double* xc = t.data.data() + static_cast<std::size_t>(c) * H * W;
    // tmp = x_c * cols^T  (H x WO)
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < WO; ++j) {
        double s = 0.0;
        for (int l = 0; l < W; ++l) s += xc[i * W + l] * cols[static_cast<std::size_t>(j) * W + l];
        tmp[static_cast<std::size_t>(i) * WO + j] = s;
      }
    double* oc = out.data.data() + static_cast<std::size_t>(c) * HO * WO;
    for (int i = 0; i < HO; ++i)
      for (int k = 0; k < H; ++k) {
        const double r = rows[static_cast<std::size_t>(i) * H + k];
        if (r == 0.0) continue;
        for (int j = 0; j < WO; ++j) oc[i * WO + j] += r * tmp[static_cast<std::size_t>(k) * WO + j];
      }
  }
  Tensor rows_t = transpose2(rows), cols_t = transpose2(cols);
  return make(std::move(out), {x}, [rows_t = std::move(rows_t), cols_t = std::move(cols_t)](const Var& g, const std::vector<bool>&) {
    return std::vector<Var>{spatial_linear(g, rows_t, cols_t)};
  });
}

Var conv2d(const Var& x, const Var& w, int stride, int pad) {
  check_conv(val(x).shape, val(w).shape, stride, pad, "conv2d");
  const int K = val(w).dim(2);
  const int OH = conv_out(val(x).dim(1), K, stride, pad), OW = conv_out(val(x).dim(2), K, stride, pad);
  if (OH < 1 || OW < 1) throw ShapeError("conv2d: input " + shape_str(val(x).shape) + " too small for kernel");
  Tensor out({val(w).dim(0), OH, OW}, 0.0);
  conv_forward_raw(val(x), val(w), stride, pad, out);
  Shape xs = val(x).shape, ws = val(w).shape;
  return make(std::move(out), {x, w}, [x, w, xs, ws, stride, pad](const Var& g, const std::vector<bool>& need) {
    return std::vector<Var>{need[0] ? conv_input_grad(g, w, xs, stride, pad) : nullptr,
                            need[1] ? conv_weight_grad(x, g, ws, stride, pad) : nullptr};
  });
}

Var conv_input_grad(const Var& g, const Var& w, const Shape& input_shape, int stride, int pad) {
  check_conv(input_shape, val(w).shape, stride, pad, "conv_input_grad");
  Tensor out(input_shape, 0.0);
  conv_input_grad_raw(val(g), val(w), stride, pad, out);
  Shape ws = val(w).shape;
  return make(std::move(out), {g, w}, [g, w, ws, stride, pad](const Var& gg, const std::vector<bool>& need) {
    return std::vector<Var>{need[0] ? conv2d(gg, w, stride, pad) : nullptr,
                            need[1] ? conv_weight_grad(gg, g, ws, stride, pad) : nullptr};
  });
}

Var conv_weight_grad(const Var& x, const Var& g, const Shape& weight_shape, int stride, int pad) {
  check_conv(val(x).shape, weight_shape, stride, pad, "conv_weight_grad");
  Tensor out(weight_shape, 0.0);
  conv_weight_grad_raw(val(x), val(g), stride, pad, out);
  Shape xs = val(x).shape;
  return make(std::move(out), {x, g}, [x, g, xs, stride, pad](const Var& gw, const std::vector<bool>& need) {
    return std::vector<Var>{need[0] ? conv_input_grad(g, gw, xs, stride, pad) : nullptr,
                            need[1] ? conv2d(x, gw, stride, pad) : nullptr};
  });
}

Var matvec(const Var& w, const Var& v) {
  const Tensor& W = val(w);
  const Tensor& x = val(v);
  require_rank(W, 2, "matvec");
  if (x.rank() != 1 || x.dim(0) != W.dim(1)) throw ShapeError("matvec: vector length mismatch");
  const int R = W.dim(0), C = W.dim(1);
  Tensor out({R}, 0.0);
  for (int r = 0; r < R; ++r) {
    double s = 0.0;
    for (int c = 0; c < C; ++c) s += W[static_cast<std::size_t>(r) * C + c] * x[static_cast<std::size_t>(c)];
    out[static_cast<std::size_t>(r)] = s;
  }
  return make(std::move(out), {w, v}, [w, v](const Var& g, const std::vector<bool>& need) {
    return std::vector<Var>{need[0] ? outer(g, v) : nullptr, need[1] ? mat_t_vec(w, g) : nullptr};
  });
}

Var mat_t_vec(const Var& w, const Var& g) {
  const Tensor& W = val(w);
  const Tensor& y = val(g);
  require_rank(W, 2, "mat_t_vec");
  if (y.rank() != 1 || y.dim(0) != W.dim(0)) throw ShapeError("mat_t_vec: vector length mismatch");
  const int R = W.dim(0), C = W.dim(1);
  Tensor out({C}, 0.0);
  for (int r = 0; r < R; ++r) {
    const double yr = y[static_cast<std::size_t>(r)];
    for (int c = 0; c < C; ++c) out[static_cast<std::size_t>(c)] += W[static_cast<std::size_t>(r) * C + c] * yr;
  }
  return make(std::move(out), {w, g}, [w, g](const Var& gg, const std::vector<bool>& need) {
    return std::vector<Var>{need[0] ? outer(g, gg) : nullptr, need[1] ? matvec(w, gg) : nullptr};
  });
}

Var outer(const Var& a, const Var& b) {
  const Tensor& x = val(a);
  const Tensor& y = val(b);
  require_rank(x, 1, "outer");
  require_rank(y, 1, "outer");
  const int R = x.dim(0), C = y.dim(0);
  Tensor out({R, C});
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c)
      out[static_cast<std::size_t>(r) * C + c] = x[static_cast<std::size_t>(r)] * y[static_cast<std::size_t>(c)];
  return make(std::move(out), {a, b}, [a, b](const Var& g, const std::vector<bool>& need) {
    return std::vector<Var>{need[0] ? matvec(g, b) : nullptr, need[1] ? mat_t_vec(g, a) : nullptr};
  });
}

Var log_softmax(const Var& z) {
  const Tensor& t = val(z);
  require_rank(t, 1, "log_softmax");
  const double m = *std::max_element(t.data.begin(), t.data.end());
  double s = 0.0;
  for (double v : t.data) s += std::exp(v - m);
  const double lse = m + std::log(s);
  Tensor out = map_unary(t, [lse](double v) { return v - lse; });
  Shape shape = t.shape;
  return make(std::move(out), {z}, [z, shape](const Var& g, const std::vector<bool>&) {
    Var probs = exp(log_softmax(z));
    return std::vector<Var>{sub(g, mul(probs, broadcast_scalar(sum(g), shape)))};
  });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(val(a).size())); }

Var squared_distance(const Var& a, const Var& b) {
  Var d = sub(a, b);
  return sum(mul(d, d));
}

Var minmax_normalize(const Var& a) {
  const Tensor& t = val(a);
  const auto [lo_it, hi_it] = std::minmax_element(t.data.begin(), t.data.end());
  const double range = *hi_it - *lo_it;
  if (!(range > 1e-12)) return constant(Tensor(t.shape, 0.0));
  const auto lo_idx = static_cast<std::size_t>(lo_it - t.data.begin());
  const auto hi_idx = static_cast<std::size_t>(hi_it - t.data.begin());
  Var lo = gather_flat(a, lo_idx);
  Var hi = gather_flat(a, hi_idx);
  Var inv = reciprocal(sub(hi, lo));
  return mul(sub(a, broadcast_scalar(lo, t.shape)), broadcast_scalar(inv, t.shape));
}

}  // namespace singleadv::ad
