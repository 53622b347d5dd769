#include "singleadv/defenses.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "singleadv/interpreters.hpp"
#include "singleadv/metrics.hpp"

namespace singleadv {

namespace {

void require_chw(const Image& x, const char* what) {
  if (x.rank() != 3) throw ShapeError(std::string(what) + ": expected a (C, H, W) image");
}

// Symmetric reflection: ... b a | a b c ... c | c b ...
int reflect_index(int i, int n) {
  const int period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) parts.push_back(cur);
  return parts;
}

double parse_number(const std::string& s, const std::string& ctx) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) throw ParameterError("bad number '" + s + "' in " + ctx);
  return v;
}

int parse_int(const std::string& s, const std::string& ctx) {
  const double v = parse_number(s, ctx);
  if (v != std::floor(v)) throw ParameterError("expected an integer, got '" + s + "' in " + ctx);
  return static_cast<int>(v);
}

}  // namespace

Image bit_depth_reduce(const Image& x, int bits) {
  if (bits < 1 || bits > 8) throw ParameterError("bit depth must lie in [1, 8]");
  const double levels = std::pow(2.0, bits) - 1.0;
  Image out = x;
  for (double& v : out.data) v = std::round(std::clamp(v, 0.0, 1.0) * levels) / levels;
  return out;
}

Image median_smooth(const Image& x, int kernel) {
  require_chw(x, "median_smooth");
  if (kernel < 3 || kernel % 2 == 0) throw ParameterError("median kernel must be odd and at least 3");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (kernel > H || kernel > W) throw ParameterError("median kernel larger than the image");
  const int r = kernel / 2;
  Image out(x.shape);
  std::vector<double> window(static_cast<std::size_t>(kernel * kernel));
  const auto mid = window.begin() + static_cast<std::ptrdiff_t>(window.size() / 2);
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int xx = 0; xx < W; ++xx) {
        std::size_t k = 0;
        for (int dy = -r; dy <= r; ++dy)
          for (int dx = -r; dx <= r; ++dx) window[k++] = x.at(c, reflect_index(y + dy, H), reflect_index(xx + dx, W));
        std::nth_element(window.begin(), mid, window.end());
        out.at(c, y, xx) = *mid;
      }
  return out;
}

Image random_resize_pad(const Image& x, double scale_min, double scale_max, RandomSource& rng) {
  require_chw(x, "random_resize_pad");
  if (!(scale_min > 0.0 && scale_min <= scale_max && scale_max <= 1.0))
    throw ParameterError("resize scale range must satisfy 0 < min <= max <= 1");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const double s = rng.uniform(scale_min, scale_max);
  const int h = std::clamp(static_cast<int>(std::lround(s * H)), 1, H);
  const int w = std::clamp(static_cast<int>(std::lround(s * W)), 1, W);
  const int oy = static_cast<int>(rng.below(static_cast<std::uint64_t>(H - h + 1)));
  const int ox = static_cast<int>(rng.below(static_cast<std::uint64_t>(W - w + 1)));
  const Tensor ry = bilinear_matrix(h, H), rx = bilinear_matrix(w, W);
  Image out(x.shape, 0.0);
  std::vector<double> rows(static_cast<std::size_t>(h) * W);
  for (int c = 0; c < C; ++c) {
    std::fill(rows.begin(), rows.end(), 0.0);
    for (int i = 0; i < h; ++i)
      for (int y = 0; y < H; ++y) {
        const double a = ry[static_cast<std::size_t>(i) * H + y];
        if (a == 0.0) continue;
        for (int xx = 0; xx < W; ++xx) rows[static_cast<std::size_t>(i) * W + xx] += a * x.at(c, y, xx);
      }
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        double v = 0.0;
        for (int xx = 0; xx < W; ++xx) v += rx[static_cast<std::size_t>(j) * W + xx] * rows[static_cast<std::size_t>(i) * W + xx];
        out.at(c, oy + i, ox + j) = std::clamp(v, 0.0, 1.0);
      }
  }
  return out;
}

void TransformSpec::validate() const {
  switch (kind) {
    case Kind::kBitDepth:
      if (bits < 1 || bits > 8) throw ParameterError("bit depth must lie in [1, 8]");
      break;
    case Kind::kMedian:
      if (kernel < 3 || kernel % 2 == 0) throw ParameterError("median kernel must be odd and at least 3");
      break;
    case Kind::kResizePad:
      if (!(scale_min > 0.0 && scale_min <= scale_max && scale_max <= 1.0))
        throw ParameterError("resize scale range must satisfy 0 < min <= max <= 1");
      break;
  }
}

TransformSpec TransformSpec::parse(const std::string& text) {
  const auto parts = split(text, ':');
  if (parts.empty()) throw ParameterError("empty transform spec");
  const std::string& name = parts[0];
  TransformSpec t;
  if (name == "bit_depth") {
    t = bit_depth();
    if (parts.size() > 2) throw ParameterError("bit_depth takes one parameter: " + text);
    if (parts.size() == 2) t.bits = parse_int(parts[1], text);
  } else if (name == "median") {
    t = median();
    if (parts.size() > 2) throw ParameterError("median takes one parameter: " + text);
    if (parts.size() == 2) t.kernel = parse_int(parts[1], text);
  } else if (name == "resize_pad") {
    t = resize_pad();
    if (parts.size() == 2 || parts.size() > 3) throw ParameterError("resize_pad takes a min and a max scale: " + text);
    if (parts.size() == 3) {
      t.scale_min = parse_number(parts[1], text);
      t.scale_max = parse_number(parts[2], text);
    }
  } else {
    throw ParameterError("unknown transform '" + name + "'");
  }
  t.validate();
  return t;
}

std::string TransformSpec::str() const {
  std::ostringstream os;
  switch (kind) {
    case Kind::kBitDepth:
      os << "bit_depth:" << bits;
      break;
    case Kind::kMedian:
      os << "median:" << kernel;
      break;
    case Kind::kResizePad:
      os << "resize_pad:" << scale_min << ':' << scale_max;
      break;
  }
  return os.str();
}

void DefenseChain::validate() const {
  if (transforms.empty()) throw ParameterError("a defense chain needs at least one transform");
  for (const auto& t : transforms) t.validate();
}

DefenseChain DefenseChain::parse(const std::string& text, std::uint64_t seed) {
  DefenseChain c;
  c.seed = seed;
  for (const auto& part : split(text, '+')) c.transforms.push_back(TransformSpec::parse(part));
  c.validate();
  return c;
}

std::string DefenseChain::str() const {
  std::string s;
  for (std::size_t i = 0; i < transforms.size(); ++i) s += (i ? "+" : "") + transforms[i].str();
  return s;
}

Image apply_transform(const Image& x, const TransformSpec& t, RandomSource& rng) {
  switch (t.kind) {
    case TransformSpec::Kind::kBitDepth:
      return bit_depth_reduce(x, t.bits);
    case TransformSpec::Kind::kMedian:
      return median_smooth(x, t.kernel);
    case TransformSpec::Kind::kResizePad:
      return random_resize_pad(x, t.scale_min, t.scale_max, rng);
  }
  throw ParameterError("unknown transform");
}

Image apply_chain(const Image& x, const DefenseChain& chain, RandomSource& rng) {
  chain.validate();
  Image out = x;
  for (const auto& t : chain.transforms) out = apply_transform(out, t, rng);
  return out;
}

Image apply_chain(const Image& x, const DefenseChain& chain) {
  RandomSource rng(chain.seed);
  return apply_chain(x, chain, rng);
}

std::vector<DefenseChain> pairwise_chains(std::uint64_t seed) {
  return {DefenseChain{{TransformSpec::bit_depth(), TransformSpec::median()}, seed},
          DefenseChain{{TransformSpec::bit_depth(), TransformSpec::resize_pad()}, seed},
          DefenseChain{{TransformSpec::median(), TransformSpec::resize_pad()}, seed}};
}

double defended_fooling_ratio(const Classifier& h, const DefenseChain& chain, const Tensor& p,
                              const LabeledDataset& source, int target) {
  if (source.samples.empty()) throw ParameterError("defended_fooling_ratio: empty sample set");
  const RandomSource root(chain.seed);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < source.samples.size(); ++i) {
    RandomSource rng = root.fork(i);
    hits += predict(h, apply_chain(apply_perturbation(source.samples[i].image, p), chain, rng)).label == target;
  }
  return static_cast<double>(hits) / static_cast<double>(source.samples.size());
}

double defended_accuracy(const Classifier& h, const DefenseChain& chain, const LabeledDataset& data) {
  if (data.samples.empty()) throw ParameterError("defended_accuracy: empty sample set");
  const RandomSource root(chain.seed);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    RandomSource rng = root.fork(i);
    hits += predict(h, apply_chain(data.samples[i].image, chain, rng)).label == data.samples[i].label;
  }
  return static_cast<double>(hits) / static_cast<double>(data.samples.size());
}

AdvTrainConfig AdvTrainConfig::full() { return AdvTrainConfig{}; }

AdvTrainConfig AdvTrainConfig::reduced() {
  AdvTrainConfig c;
  c.epsilon = 0.05;
  c.lr_initial = 0.02;
  c.lr_final = 0.001;
  c.epochs = 3;
  c.batch_size = 32;
  return c;
}

TrainConfig AdvTrainConfig::as_train_config() const {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = batch_size;
  t.lr_initial = lr_initial;
  t.lr_final = lr_final;
  t.decay = decay;
  t.momentum = momentum;
  t.seed = seed;
  return t;
}

void AdvTrainConfig::validate() const {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ParameterError("adversarial training: epsilon must be >= 0");
  if (radius && !(*radius >= 0.0)) throw ParameterError("adversarial training: radius must be >= 0");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ParameterError("adversarial training: threshold must lie in (0, 1)");
  as_train_config().validate();
}

AdvTrainResult adversarial_train(const Classifier& h, const LabeledDataset& data, const std::vector<Tensor>& maps,
                                 const AdvTrainConfig& cfg, const Tensor* initial_delta) {
  cfg.validate();
  if (data.empty()) throw ParameterError("adversarial training on an empty dataset");
  data.validate();
  if (maps.size() != data.size()) throw ParameterError("adversarial training: maps must align with samples");
  const Shape img = data.shape.dims();
  const Shape plane{data.shape.height, data.shape.width};
  std::vector<Tensor> masks;
  masks.reserve(maps.size());
  for (const auto& m : maps) {
    if (m.shape != plane) throw ShapeError("adversarial training: map shape " + shape_str(m.shape));
    masks.push_back(binarize(m, cfg.threshold));
  }

  AdvTrainResult result{h, Tensor(img), 0.0};
  Classifier& model = result.model;
  Tensor& delta = result.delta;
  const double radius = cfg.projection_radius();
  if (initial_delta) {
    require_same_shape(*initial_delta, delta, "initial delta");
    delta = *initial_delta;
  }
  for (double& v : delta.data) v = std::clamp(v, -radius, radius);
  result.max_delta_norm = delta.max_abs();

  const TrainConfig tc = cfg.as_train_config();
  RandomSource order_rng = RandomSource(cfg.seed).fork(2);
  const std::size_t n = data.size();
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const long steps_per_epoch = static_cast<long>((n + bs - 1) / bs);
  const long total = steps_per_epoch * cfg.epochs;
  const std::size_t plane_size = static_cast<std::size_t>(data.shape.height) * data.shape.width;
  MomentumSgd opt;
  std::vector<Tensor> grads;
  long step = 0;

  auto masked_input = [&](std::size_t idx) {
    const auto& s = data.samples[idx];
    const auto& m = masks[idx];
    Image x = s.image;
    for (std::size_t k = 0; k < x.size(); ++k) x[k] = std::clamp(x[k] + m[k % plane_size] * delta[k], 0.0, 1.0);
    return x;
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = batch_sample(n, n, order_rng);
    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t end = std::min(n, start + bs);
      std::vector<Image> xs;
      std::vector<int> ys;
      for (std::size_t i = start; i < end; ++i) {
        xs.push_back(masked_input(order[i]));
        ys.push_back(data.samples[order[i]].label);
      }
      const double loss = batch_parameter_gradient(model, xs, ys, grads);
      if (!std::isfinite(loss)) throw TrainingError("adversarial training loss became non-finite in epoch " +
                                                        std::to_string(epoch), epoch);
      opt.step(model, grads, tc.learning_rate(step, total), cfg.momentum);
      ++step;

      if (cfg.epsilon > 0.0) {
        // d/d delta of L(x + m * delta) is m * grad_x, averaged over the batch.
        Tensor gd(img, 0.0);
        for (std::size_t i = start; i < end; ++i) {
          const auto idx = order[i];
          const Tensor g = input_gradient(model, masked_input(idx), {LossKind::kCrossEntropyToTarget, data.samples[idx].label},
                                          ReluMode::exact());
          const auto& m = masks[idx];
          for (std::size_t k = 0; k < g.size(); ++k) gd[k] += m[k % plane_size] * g[k];
        }
        for (std::size_t k = 0; k < delta.size(); ++k) {
          const double sg = gd[k] > 0.0 ? 1.0 : (gd[k] < 0.0 ? -1.0 : 0.0);
          delta[k] = std::clamp(delta[k] + cfg.epsilon * sg, -radius, radius);
        }
      }
      result.max_delta_norm = std::max(result.max_delta_norm, delta.max_abs());
    }
  }
  return result;
}

}  // namespace singleadv
