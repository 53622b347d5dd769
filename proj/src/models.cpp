#include "singleadv/models.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>

#include "json.hpp"

namespace singleadv {

ArchSpec architecture(const std::string& id) {
  if (id == "cnn-small") return {id, {{12, 1}, {24, 2}, {32, 2}}, HeadKind::kGapLinear};
  if (id == "cnn-wide") return {id, {{16, 1}, {32, 2}, {32, 2}, {48, 1}}, HeadKind::kGapLinear};
  if (id == "cnn-deep") return {id, {{16, 1}, {32, 2}, {48, 1}, {48, 2}}, HeadKind::kGapLinear};
  if (id == "linear") return {id, {}, HeadKind::kFlattenLinear};
  throw ParameterError("unknown architecture '" + id + "'");
}

namespace {

int conv_out(int in, int k, int stride) { return (in + 2 * (k / 2) - k) / stride + 1; }

Shape trunk_output_shape(const ArchSpec& arch, const ImageShape& input) {
  Shape s = input.dims();
  for (const auto& c : arch.convs) s = {c.out_channels, conv_out(s[1], c.kernel, c.stride), conv_out(s[2], c.kernel, c.stride)};
  return s;
}

int head_inputs(const ArchSpec& arch, const ImageShape& input) {
  const Shape s = trunk_output_shape(arch, input);
  return arch.head == HeadKind::kGapLinear ? s[0] : static_cast<int>(shape_size(s));
}

std::vector<Shape> parameter_shapes(const ArchSpec& arch, const ImageShape& input, int num_categories) {
  std::vector<Shape> shapes;
  int in = input.channels;
  for (const auto& c : arch.convs) {
    if (c.out_channels < 1 || c.stride < 1 || c.kernel < 1 || c.kernel % 2 == 0) {
      throw ParameterError("invalid conv block in architecture '" + arch.id + "'");
    }
    shapes.push_back({c.out_channels, in, c.kernel, c.kernel});
    shapes.push_back({c.out_channels});
    in = c.out_channels;
  }
  shapes.push_back({num_categories, head_inputs(arch, input)});
  shapes.push_back({num_categories});
  return shapes;
}

ad::Var activate(const ad::Var& z, const ReluMode& mode) {
  return mode.kind == ReluMode::Kind::kExact ? ad::relu(z) : ad::smooth_relu(z, mode.tau, mode.swap_branches);
}

}  // namespace

std::size_t parameter_count(const ArchSpec& arch, const ImageShape& input, int num_categories) {
  std::size_t n = 0;
  for (const auto& s : parameter_shapes(arch, input, num_categories)) n += shape_size(s);
  return n;
}

double smoothed_relu_grad(double z, double tau, bool swap_branches) {
  if (!(tau > 0.0)) throw ParameterError("smoothed_relu_grad: tau must be positive");
  return ad::smooth_relu_slope_value(z, tau, swap_branches);
}

Classifier::Classifier(ArchSpec arch, ImageShape input, int num_categories, std::uint64_t init_seed)
    : arch_(std::move(arch)), input_(input), num_categories_(num_categories) {
  if (num_categories < 1) throw ParameterError("classifier needs at least one category");
  RandomSource rng(init_seed);
  const auto shapes = parameter_shapes(arch_, input_, num_categories_);
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    Tensor t(shapes[i], 0.0);
    if (shapes[i].size() > 1) {  // weights; biases start at zero
      const std::size_t fan_in = t.size() / static_cast<std::size_t>(shapes[i][0]);
      const bool is_head = i + 2 == shapes.size();
      const double stddev = std::sqrt((is_head ? 1.0 : 2.0) / static_cast<double>(fan_in));
      for (double& v : t.data) v = stddev * rng.normal();
    }
    params_.push_back(ad::constant(std::move(t)));
  }
}

Shape Classifier::last_conv_shape() const { return trunk_output_shape(arch_, input_); }

std::vector<Tensor> Classifier::parameter_values() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p->value);
  return out;
}

void Classifier::set_parameter_values(const std::vector<Tensor>& values) {
  if (values.size() != params_.size()) throw ShapeError("parameter count mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) {
    require_same_shape(values[i], params_[i]->value, "set_parameter_values");
    params_[i] = ad::constant(values[i]);
  }
}

std::string Classifier::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params_) h = fnv1a64(p->value.data.data(), p->value.size() * sizeof(double), h);
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

ForwardPass forward(const Classifier& h, const ad::Var& x, const std::vector<ad::Var>& params, const ReluMode& mode) {
  require_image_shape(x->value, h.input_shape(), "forward");
  const auto& arch = h.arch();
  // Inputs are centred around zero before the first block.
  ad::Var a = ad::add_const(x, Tensor(x->value.shape, -0.5));
  std::size_t p = 0;
  for (const auto& c : arch.convs) {
    ad::Var z = ad::conv2d(a, params[p], c.stride, c.kernel / 2);
    z = ad::add(z, ad::broadcast_spatial(params[p + 1], z->value.dim(1), z->value.dim(2)));
    a = activate(z, mode);
    p += 2;
  }
  ad::Var features = a;
  ad::Var flat;
  if (arch.head == HeadKind::kGapLinear) {
    flat = ad::scale(ad::sum_spatial(a), 1.0 / (a->value.dim(1) * a->value.dim(2)));
  } else {
    flat = ad::reshape(a, {static_cast<int>(a->value.size())});
  }
  ad::Var logits = ad::add(ad::matvec(params[p], flat), params[p + 1]);
  return {logits, features};
}

ForwardPass forward(const Classifier& h, const ad::Var& x, const ReluMode& mode) {
  return forward(h, x, h.parameters(), mode);
}

Tensor logits(const Classifier& h, const Image& x) {
  ad::NoGradGuard guard;
  return forward(h, ad::constant(x), ReluMode::exact()).logits->value;
}

Prediction predict(const Classifier& h, const Image& x) {
  const Tensor z = logits(h, x);
  Prediction out{Tensor(z.shape), 0};
  const double m = *std::max_element(z.data.begin(), z.data.end());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += (out.probabilities[i] = std::exp(z[i] - m));
  for (double& v : out.probabilities.data) v /= s;
  out.label = static_cast<int>(std::max_element(out.probabilities.data.begin(), out.probabilities.data.end()) -
                               out.probabilities.data.begin());
  return out;
}

ad::Var loss_node(const ForwardPass& fp, const LossSpec& spec) {
  const int k = fp.logits->value.dim(0);
  if (spec.target < 0 || spec.target >= k) throw ParameterError("loss target out of range");
  const auto t = static_cast<std::size_t>(spec.target);
  if (spec.kind == LossKind::kClassScore) return ad::gather_flat(fp.logits, t);
  return ad::scale(ad::gather_flat(ad::log_softmax(fp.logits), t), -1.0);
}

double loss_value(const Classifier& h, const Image& x, const LossSpec& spec, const ReluMode& mode) {
  ad::NoGradGuard guard;
  return loss_node(forward(h, ad::constant(x), mode), spec)->value.item();
}

Tensor input_gradient(const Classifier& h, const Image& x, const LossSpec& spec, const ReluMode& mode) {
  auto xv = ad::variable(x);
  auto loss = loss_node(forward(h, xv, mode), spec);
  return ad::grad(loss, {xv})[0]->value;
}

Tensor input_gradient(const Classifier& h, const Image& x, const LossSpec& spec) {
  return input_gradient(h, x, spec, h.relu_mode);
}

Tensor feature_maps(const Classifier& h, const Image& x) {
  ad::NoGradGuard guard;
  return forward(h, ad::constant(x), ReluMode::exact()).features->value;
}

Tensor class_weights(const Classifier& h, int y) {
  if (!h.cam_compatible()) {
    throw UnsupportedArchitecture("architecture '" + h.arch().id + "' has no global-average-pool + linear head");
  }
  if (y < 0 || y >= h.num_categories()) throw ParameterError("class_weights: category out of range");
  const Tensor& w = h.parameters()[h.parameters().size() - 2]->value;
  const int F = w.dim(1);
  Tensor out({F});
  std::copy_n(w.data.begin() + static_cast<std::ptrdiff_t>(y) * F, F, out.data.begin());
  return out;
}

double class_bias(const Classifier& h, int y) {
  return h.parameters().back()->value.data.at(static_cast<std::size_t>(y));
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ParameterError("train: epochs must be >= 1");
  if (batch_size < 1) throw ParameterError("train: batch size must be >= 1");
  if (!(lr_initial > 0.0) || !(lr_final > 0.0)) throw ParameterError("train: learning rates must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ParameterError("train: momentum must lie in [0, 1)");
}

double TrainConfig::learning_rate(long step, long total_steps) const {
  const double t = total_steps <= 1 ? 0.0 : static_cast<double>(step) / static_cast<double>(total_steps - 1);
  switch (decay) {
    case LrDecay::kConstant:
      return lr_initial;
    case LrDecay::kLinear:
      return lr_initial + (lr_final - lr_initial) * t;
    case LrDecay::kCosine:
      return lr_final + (lr_initial - lr_final) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
    case LrDecay::kExponential:
      return lr_initial * std::pow(lr_final / lr_initial, t);
  }
  return lr_initial;
}

void MomentumSgd::step(Classifier& h, const std::vector<Tensor>& grads, double lr, double momentum) {
  auto values = h.parameter_values();
  if (velocity.empty()) {
    for (const auto& v : values) velocity.emplace_back(v.shape, 0.0);
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    for (std::size_t j = 0; j < values[i].size(); ++j) {
      velocity[i][j] = momentum * velocity[i][j] - grads[i][j];
      values[i][j] += lr * velocity[i][j];
    }
  }
  h.set_parameter_values(values);
}

double batch_parameter_gradient(const Classifier& h, const std::vector<Image>& inputs, const std::vector<int>& labels,
                                std::vector<Tensor>& grads) {
  const auto& params = h.parameters();
  grads.clear();
  for (const auto& p : params) grads.emplace_back(p->value.shape, 0.0);
  double total = 0.0;
  for (std::size_t s = 0; s < inputs.size(); ++s) {
    std::vector<ad::Var> vars;
    vars.reserve(params.size());
    for (const auto& p : params) vars.push_back(ad::variable(p->value));
    auto fp = forward(h, ad::constant(inputs[s]), vars, ReluMode::exact());
    auto loss = loss_node(fp, {LossKind::kCrossEntropyToTarget, labels[s]});
    total += loss->value.item();
    auto g = ad::grad(loss, vars);
    for (std::size_t i = 0; i < grads.size(); ++i)
      for (std::size_t j = 0; j < grads[i].size(); ++j) grads[i][j] += g[i]->value[j];
  }
  const double inv = 1.0 / static_cast<double>(inputs.size());
  for (auto& g : grads)
    for (double& v : g.data) v *= inv;
  return total * inv;
}

void continue_training(Classifier& h, const LabeledDataset& data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw ParameterError("training on an empty dataset");
  data.validate();
  RandomSource order_rng = RandomSource(cfg.seed).fork(2);
  const std::size_t n = data.size();
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const long steps_per_epoch = static_cast<long>((n + bs - 1) / bs);
  const long total = steps_per_epoch * cfg.epochs;
  MomentumSgd opt;
  std::vector<Tensor> grads;
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = batch_sample(n, n, order_rng);
    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t end = std::min(n, start + bs);
      std::vector<Image> xs;
      std::vector<int> ys;
      for (std::size_t i = start; i < end; ++i) {
        xs.push_back(data.samples[order[i]].image);
        ys.push_back(data.samples[order[i]].label);
      }
      const double loss = batch_parameter_gradient(h, xs, ys, grads);
      if (!std::isfinite(loss)) throw TrainingError("training loss became non-finite", step);
      opt.step(h, grads, cfg.learning_rate(step, total), cfg.momentum);
      ++step;
    }
  }
}

Classifier train_classifier(const LabeledDataset& data, const ArchSpec& arch, const TrainConfig& cfg,
                            const LabeledDataset* held_out) {
  cfg.validate();
  if (data.split != Split::kTrain) throw ParameterError("train_classifier expects the train split");
  if (data.empty()) throw ParameterError("train_classifier: empty dataset");
  Classifier h(arch, data.shape, data.num_categories, RandomSource(cfg.seed).fork(1).next_u64());
  h.training_seed = cfg.seed;
  continue_training(h, data, cfg);
  if (held_out) h.held_out_accuracy = accuracy(h, *held_out);
  return h;
}

double accuracy(const Classifier& h, const LabeledDataset& data) {
  if (data.empty()) throw ParameterError("accuracy of an empty dataset");
  std::size_t correct = 0;
  for (const auto& s : data.samples) correct += predict(h, s.image).label == s.label ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

namespace {

void put_u32(std::ofstream& os, std::uint32_t v) {
  const std::array<unsigned char, 4> b{static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                       static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b.data()), 4);
}

void put_u64(std::ofstream& os, std::uint64_t v) {
  put_u32(os, static_cast<std::uint32_t>(v));
  put_u32(os, static_cast<std::uint32_t>(v >> 32));
}

std::uint32_t get_u32(std::ifstream& is) {
  std::array<unsigned char, 4> b{};
  is.read(reinterpret_cast<char*>(b.data()), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint64_t get_u64(std::ifstream& is) {
  const std::uint64_t lo = get_u32(is);
  return lo | (static_cast<std::uint64_t>(get_u32(is)) << 32);
}

std::filesystem::path manifest_path(const std::filesystem::path& bin) {
  auto p = bin;
  p.replace_extension(".json");
  return p;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& bin_path, const Classifier& h,
                     const std::map<std::string, std::string>& extra) {
  std::ofstream os(bin_path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + bin_path.string() + " for writing");
  os.write("SADM", 4);
  os.put(static_cast<char>(kCheckpointFormatVersion));
  const auto& params = h.parameters();
  put_u32(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put_u32(os, static_cast<std::uint32_t>(p->value.rank()));
    for (int d : p->value.shape) put_u32(os, static_cast<std::uint32_t>(d));
    for (double v : p->value.data) put_u64(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw std::runtime_error("write failed for " + bin_path.string());

  nlohmann::ordered_json j;
  j["format"] = "SADM";
  j["version"] = kCheckpointFormatVersion;
  j["architecture"] = h.arch().id;
  nlohmann::ordered_json convs = nlohmann::ordered_json::array();
  for (const auto& c : h.arch().convs) convs.push_back({c.out_channels, c.stride, c.kernel});
  j["conv_blocks"] = convs;
  j["head"] = h.arch().head == HeadKind::kGapLinear ? "gap_linear" : "flatten_linear";
  j["num_categories"] = h.num_categories();
  j["input_shape"] = {h.input_shape().channels, h.input_shape().height, h.input_shape().width};
  j["training_seed"] = h.training_seed;
  if (h.held_out_accuracy) j["accuracy"] = *h.held_out_accuracy;
  j["fingerprint"] = h.fingerprint();
  for (const auto& [k, v] : extra) j[k] = v;
  std::ofstream ms(manifest_path(bin_path));
  if (!ms) throw std::runtime_error("cannot write manifest for " + bin_path.string());
  ms << j.dump(2) << '\n';
}

Classifier load_checkpoint(const std::filesystem::path& bin_path, ModelManifest* manifest) {
  std::ifstream ms(manifest_path(bin_path));
  if (!ms) throw std::runtime_error("missing manifest " + manifest_path(bin_path).string());
  const auto j = nlohmann::json::parse(ms);
  ArchSpec arch;
  arch.id = j.at("architecture").get<std::string>();
  for (const auto& c : j.at("conv_blocks")) arch.convs.push_back({c.at(0).get<int>(), c.at(1).get<int>(), c.at(2).get<int>()});
  arch.head = j.at("head").get<std::string>() == "gap_linear" ? HeadKind::kGapLinear : HeadKind::kFlattenLinear;
  const auto shape = j.at("input_shape");
  const ImageShape input{shape.at(0).get<int>(), shape.at(1).get<int>(), shape.at(2).get<int>()};
  Classifier h(arch, input, j.at("num_categories").get<int>(), 0);
  h.training_seed = j.value("training_seed", std::uint64_t{0});
  if (j.contains("accuracy")) h.held_out_accuracy = j.at("accuracy").get<double>();

  std::ifstream is(bin_path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + bin_path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "SADM") throw std::runtime_error(bin_path.string() + ": bad magic");
  if (is.get() != kCheckpointFormatVersion) throw std::runtime_error(bin_path.string() + ": unsupported version");
  auto values = h.parameter_values();
  if (get_u32(is) != values.size()) throw std::runtime_error(bin_path.string() + ": parameter count mismatch");
  for (auto& t : values) {
    Shape s(get_u32(is));
    for (int& d : s) d = static_cast<int>(get_u32(is));
    if (s != t.shape) throw std::runtime_error(bin_path.string() + ": parameter shape mismatch");
    for (double& v : t.data) v = std::bit_cast<double>(get_u64(is));
  }
  if (!is) throw std::runtime_error(bin_path.string() + ": truncated checkpoint");
  h.set_parameter_values(values);
  if (manifest) {
    manifest->architecture = arch.id;
    manifest->num_categories = h.num_categories();
    manifest->input_shape = input;
    manifest->training_seed = h.training_seed;
    manifest->accuracy = h.held_out_accuracy;
    manifest->fingerprint = j.value("fingerprint", "");
    manifest->extra.clear();
    for (auto it = j.begin(); it != j.end(); ++it)
      if (it->is_string()) manifest->extra[it.key()] = it->get<std::string>();
  }
  return h;
}

}  // namespace singleadv
