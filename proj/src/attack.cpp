#include "singleadv/attack.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "singleadv/metrics.hpp"

namespace singleadv {

void AttackConfig::validate() const {
  if (!(eta > 0.0)) throw ParameterError("attack: eta must be positive");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ParameterError("attack: lambda must be nonnegative");
  if (batch_size < 2 || batch_size % 2 != 0) throw ParameterError("attack: batch size must be even and at least 2");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ParameterError("attack: gamma must lie in (0, 1]");
  if (!(step_scale > 0.0) || !std::isfinite(step_scale)) throw ParameterError("attack: step scale must be positive");
  if (!(beta1 > 0.0 && beta1 < beta2 && beta2 < 1.0)) throw ParameterError("attack: need 0 < beta1 < beta2 < 1");
  if (max_iterations < 0) throw ParameterError("attack: max iterations must be nonnegative");
  if (check_interval < 1) throw ParameterError("attack: check interval must be at least 1");
  if (source_category == target_category) throw ParameterError("attack: source and target categories coincide");
  if (source_category < 0 || target_category < 0) throw ParameterError("attack: negative category");
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0))
    throw ParameterError("attack: validation fraction must lie in [0, 1)");
  interpreter_options.mask.validate();
}

MomentState MomentState::zeros(const Shape& shape) { return {Tensor(shape), Tensor(shape), 0}; }

void write_trace_csv(const std::filesystem::path& path, const AttackTrace& trace,
                     const std::vector<std::string>& preamble) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.precision(17);
  for (const auto& line : preamble) os << "# " << line << '\n';
  os << "iteration,fooling_ratio,L_prd_mean,L_int_mean,delta,p_inf_norm\n";
  for (const auto& r : trace.rows) {
    os << r.iteration << ',';
    if (r.fooling_ratio) os << *r.fooling_ratio;
    os << ',' << r.prediction_loss_mean << ',' << r.interpretation_loss_mean << ',' << r.delta << ','
       << r.p_inf_norm << '\n';
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

double prediction_loss(const Classifier& h, const Image& x, int y) {
  return loss_value(h, x, {LossKind::kCrossEntropyToTarget, y}, ReluMode::exact());
}

double interpretation_loss(const Tensor& m, const Tensor& target) {
  require_same_shape(m, target, "interpretation_loss");
  double s = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double d = m[i] - target[i];
    s += d * d;
  }
  return s;
}

static double mean_norm(std::span<const Tensor> g) {
  double s = 0.0;
  for (const auto& t : g) s += t.l2_norm();
  return s / static_cast<double>(g.size());
}

double gradient_ratio(std::span<const Tensor> source, std::span<const Tensor> nonsource, bool* clamped) {
  if (source.empty() || nonsource.empty()) throw ParameterError("gradient_ratio: empty gradient set");
  const double num = mean_norm(source), den = mean_norm(nonsource);
  if (clamped) *clamped = false;
  if (den == 0.0) {
    if (clamped) *clamped = true;
    return 1.0;
  }
  return num / den;
}

static Tensor mean_of(std::span<const Tensor> g) {
  Tensor m(g.front().shape);
  for (const auto& t : g) {
    require_same_shape(t, m, "combined_gradient");
    for (std::size_t i = 0; i < m.size(); ++i) m[i] += t[i];
  }
  const double inv = 1.0 / static_cast<double>(g.size());
  for (double& v : m.data) v *= inv;
  return m;
}

Tensor combined_gradient(std::span<const Tensor> source, std::span<const Tensor> nonsource, double delta) {
  if (source.empty() || nonsource.empty()) throw ParameterError("combined_gradient: empty gradient set");
  Tensor a = mean_of(source);
  const Tensor b = mean_of(nonsource);
  require_same_shape(a, b, "combined_gradient");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = 0.5 * (a[i] + delta * b[i]);
  return a;
}

void moment_update(MomentState& state, const Tensor& xi, double beta1, double beta2) {
  require_same_shape(state.upsilon, xi, "moment_update");
  require_same_shape(state.omega, xi, "moment_update");
  for (std::size_t k = 0; k < xi.size(); ++k) {
    state.upsilon[k] = beta1 * state.upsilon[k] + (1.0 - beta1) * xi[k];
    state.omega[k] = beta2 * state.omega[k] + (1.0 - beta2) * (xi[k] * xi[k]);
  }
}

Tensor bias_corrected_step(const MomentState& state, double beta1, double beta2) {
  if (state.i < 1) throw ParameterError("bias_corrected_step: iteration counter must be at least 1");
  const double i = static_cast<double>(state.i);
  const double factor = std::sqrt(1.0 - std::pow(beta2, i)) / (1.0 - std::pow(beta1, i));
  Tensor out(state.upsilon.shape);
  for (std::size_t k = 0; k < out.size(); ++k) {
    const double w = state.omega[k];
    if (w < 0.0) throw ParameterError("bias_corrected_step: negative second moment");
    out[k] = w == 0.0 ? 0.0 : factor * (state.upsilon[k] / std::sqrt(w));
  }
  return out;
}

Tensor normalized_update(const Tensor& p, const Tensor& pbar, bool* skipped, double scale) {
  require_same_shape(p, pbar, "normalized_update");
  const double m = pbar.max_abs();
  if (skipped) *skipped = m == 0.0;
  if (m == 0.0) return p;
  Tensor out = p;
  for (std::size_t k = 0; k < out.size(); ++k) out[k] += scale * (pbar[k] / m);
  return out;
}

Tensor project_linf(const Tensor& p, double eta) {
  if (!(eta > 0.0)) throw ParameterError("project_linf: eta must be positive");
  Tensor out = p;
  for (double& v : out.data) v = std::clamp(v, -eta, eta);
  return out;
}

SampleGradient sample_gradient(const Classifier& h, const Image& x, int loss_target, int map_class,
                               const Tensor& target_map, double lambda, InterpreterKind kind,
                               const InterpreterOptions& opts) {
  SampleGradient out;
  if (kind == InterpreterKind::kCam) {
    // One forward graph serves both terms.
    auto xv = ad::variable(x);
    auto fp = forward(h, xv, h.relu_mode);
    auto lprd = loss_node(fp, {LossKind::kCrossEntropyToTarget, loss_target});
    out.prediction_loss = lprd->value.item();
    if (lambda > 0.0) {
      auto m = cam_from_features(h, fp.features, map_class);
      auto lint = ad::squared_distance(m, ad::constant(target_map));
      out.interpretation_loss = lint->value.item();
      out.gradient = ad::grad(ad::add(lprd, ad::scale(lint, lambda)), {xv})[0]->value;
    } else {
      {
        ad::NoGradGuard ng;
        auto m = cam_from_features(h, ad::constant(fp.features->value), map_class);
        out.interpretation_loss = interpretation_loss(m->value, target_map);
      }
      out.gradient = ad::grad(lprd, {xv})[0]->value;
    }
    return out;
  }
  const LossSpec spec{LossKind::kCrossEntropyToTarget, loss_target};
  out.prediction_loss = loss_value(h, x, spec, h.relu_mode);
  out.gradient = input_gradient(h, x, spec);
  if (lambda > 0.0) {
    const auto ig = interpreter_gradient(h, x, map_class, target_map, kind, opts, lambda);
    out.interpretation_loss = ig.loss;
    for (std::size_t k = 0; k < out.gradient.size(); ++k) out.gradient[k] += ig.gradient[k];
  } else {
    out.interpretation_loss = interpretation_loss_at(kind, h, x, map_class, target_map, opts);
  }
  return out;
}

SourceSplit split_source(const LabeledDataset& source, const AttackConfig& cfg) {
  const std::size_t n = source.samples.size();
  if (n == 0) throw ParameterError("attack: empty source set");
  RandomSource rng = RandomSource(cfg.seed).fork(1);
  const auto order = batch_sample(n, n, rng);
  std::size_t nval = static_cast<std::size_t>(std::llround(cfg.validation_fraction * static_cast<double>(n)));
  if (cfg.validation_fraction > 0.0) nval = std::max<std::size_t>(nval, 1);
  SourceSplit s{source.subset({}), source.subset({})};
  if (nval == 0 || nval >= n) {
    // Too small to hold anything out: validate on the training pool itself.
    s.train = source;
    s.validation = source;
    return s;
  }
  std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(nval));
  std::vector<std::size_t> tr(order.begin() + static_cast<std::ptrdiff_t>(nval), order.end());
  std::sort(val.begin(), val.end());
  std::sort(tr.begin(), tr.end());
  s.train = source.subset(tr);
  s.validation = source.subset(val);
  return s;
}

double perturbed_hit_rate(const Classifier& h, const LabeledDataset& samples, const Tensor& p, int target) {
  if (samples.samples.empty()) throw ParameterError("perturbed_hit_rate: empty sample set");
  std::size_t hits = 0;
  for (const auto& s : samples.samples) hits += predict(h, apply_perturbation(s.image, p)).label == target;
  return static_cast<double>(hits) / static_cast<double>(samples.samples.size());
}

namespace {

void check_pools(const Classifier& h, const LabeledDataset& source, const LabeledDataset& nonsource,
                 const AttackConfig& cfg) {
  if (source.samples.empty()) throw ParameterError("attack: empty source set");
  if (nonsource.samples.empty()) throw ParameterError("attack: empty non-source set");
  if (cfg.target_category >= h.num_categories() || cfg.source_category >= h.num_categories())
    throw ParameterError("attack: category out of range");
  for (const auto& s : source.samples)
    if (s.label != cfg.source_category) throw ParameterError("attack: source pool contains another category");
  for (const auto& s : nonsource.samples)
    if (s.label == cfg.source_category) throw ParameterError("attack: non-source pool contains the source category");
  for (const auto* d : {&source, &nonsource})
    for (const auto& s : d->samples) require_image_shape(s.image, h.input_shape(), "attack sample");
}

std::vector<Tensor> benign_maps(const Classifier& h, const LabeledDataset& d, InterpreterKind kind,
                                const InterpreterOptions& opts) {
  std::vector<Tensor> maps;
  maps.reserve(d.samples.size());
  for (const auto& s : d.samples) maps.push_back(interpret(kind, h, s.image, s.label, opts).values);
  return maps;
}

}  // namespace

AttackResult generate_universal_perturbation(const Classifier& h, const LabeledDataset& source,
                                             const LabeledDataset& nonsource, const AttackConfig& cfg) {
  cfg.validate();
  check_pools(h, source, nonsource, cfg);
  const ImageShape shape = h.input_shape();
  AttackResult result{Perturbation::zeros(shape, cfg.eta, cfg.source_category, cfg.target_category, cfg.seed), {}};
  AttackTrace& trace = result.trace;
  if (cfg.max_iterations == 0) return result;

  const SourceSplit split = split_source(source, cfg);
  const auto src_maps = benign_maps(h, split.train, cfg.interpreter, cfg.interpreter_options);
  const auto ns_maps = benign_maps(h, nonsource, cfg.interpreter, cfg.interpreter_options);

  RandomSource rng = RandomSource(cfg.seed).fork(2);
  const std::size_t half = static_cast<std::size_t>(cfg.batch_size / 2);
  const std::size_t n_src = std::min(half, split.train.samples.size());
  const std::size_t n_ns = std::min(half, nonsource.samples.size());

  Tensor p(shape.dims());
  Tensor best = p;
  double best_ratio = -1.0;
  MomentState state = MomentState::zeros(shape.dims());
  std::vector<Tensor> gs, gn;

  for (int it = 1; it <= cfg.max_iterations; ++it) {
    state.i = it;
    const auto src_idx = batch_sample(split.train.samples.size(), n_src, rng);
    const auto ns_idx = batch_sample(nonsource.samples.size(), n_ns, rng);
    gs.clear();
    gn.clear();
    double lprd = 0.0, lint = 0.0;
    for (std::size_t k : src_idx) {
      const auto& s = split.train.samples[k];
      auto g = sample_gradient(h, apply_perturbation(s.image, p), cfg.target_category, cfg.target_category,
                               src_maps[k], cfg.lambda, cfg.interpreter, cfg.interpreter_options);
      lprd += g.prediction_loss;
      lint += g.interpretation_loss;
      gs.push_back(std::move(g.gradient));
    }
    for (std::size_t k : ns_idx) {
      const auto& s = nonsource.samples[k];
      auto g = sample_gradient(h, apply_perturbation(s.image, p), s.label, s.label, ns_maps[k], cfg.lambda,
                               cfg.interpreter, cfg.interpreter_options);
      lprd += g.prediction_loss;
      lint += g.interpretation_loss;
      gn.push_back(std::move(g.gradient));
    }
    const double count = static_cast<double>(gs.size() + gn.size());
    AttackTraceRow row;
    row.iteration = it;
    row.prediction_loss_mean = lprd / count;
    row.interpretation_loss_mean = lint / count;
    if (!std::isfinite(lprd) || !std::isfinite(lint)) {
      trace.iterations = it;
      throw AttackError("attack: non-finite loss at iteration " + std::to_string(it), trace);
    }

    bool clamped = false;
    row.delta = gradient_ratio(gs, gn, &clamped);
    if (clamped)
      trace.warnings.push_back("iteration " + std::to_string(it) + ": zero non-source gradient norm, delta set to 1");
    const Tensor xi = combined_gradient(gs, gn, row.delta);
    moment_update(state, xi, cfg.beta1, cfg.beta2);
    const Tensor pbar = bias_corrected_step(state, cfg.beta1, cfg.beta2);
    bool skipped = false;
    p = normalized_update(p, pbar, &skipped, cfg.step_scale);
    if (skipped) trace.warnings.push_back("iteration " + std::to_string(it) + ": zero step, update skipped");
    p = project_linf(p, cfg.eta);
    row.p_inf_norm = p.max_abs();
    trace.iterations = it;

    if (it % cfg.check_interval == 0 || it == cfg.max_iterations) {
      const double ratio = perturbed_hit_rate(h, split.validation, p, cfg.target_category);
      row.fooling_ratio = ratio;
      if (ratio > best_ratio) {
        best_ratio = ratio;
        best = p;
        trace.best_iteration = it;
      }
      trace.rows.push_back(row);
      if (ratio >= cfg.gamma) {
        trace.converged = true;
        break;
      }
      continue;
    }
    trace.rows.push_back(row);
  }
  trace.best_fooling_ratio = std::max(best_ratio, 0.0);
  result.perturbation.values = trace.converged ? p : best;
  return result;
}

LambdaSearchResult select_lambda(const Classifier& h, const LabeledDataset& source, const LabeledDataset& nonsource,
                                 const AttackConfig& cfg, const std::vector<double>& candidates) {
  if (candidates.empty()) throw ParameterError("select_lambda: no candidates");
  const SourceSplit split = split_source(source, cfg);
  EvaluationOptions eo;
  eo.interpreter_options = cfg.interpreter_options;
  LambdaSearchResult out;
  double best_score = -1.0, best_ratio = -1.0;
  bool have_converged = false;
  for (double lam : candidates) {
    AttackConfig c = cfg;
    c.lambda = lam;
    const auto r = generate_universal_perturbation(h, source, nonsource, c);
    const auto res = fooled_iou(h, cfg.interpreter, r.perturbation.values, split.validation, cfg.target_category, eo);
    const double score = res ? res->mean : 0.0;
    out.candidates.push_back(lam);
    out.candidate_iou.push_back(score);
    out.candidate_converged.push_back(r.trace.converged);
    const bool better = r.trace.converged
                            ? (!have_converged || score > best_score)
                            : (!have_converged && r.trace.best_fooling_ratio > best_ratio);
    if (better) {
      out.lambda = lam;
      out.validation_iou = score;
      out.reached_gamma = r.trace.converged;
      best_score = score;
      best_ratio = r.trace.best_fooling_ratio;
      have_converged = have_converged || r.trace.converged;
    }
  }
  return out;
}

}  // namespace singleadv
