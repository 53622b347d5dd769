#include "singleadv/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "singleadv/raster.hpp"

namespace singleadv {

namespace {

void require_nonempty(std::size_t n, const char* what) {
  if (n == 0) throw ParameterError(std::string(what) + ": empty sample set");
}

void require_aligned(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw ParameterError(std::string(what) + ": predictions and labels differ in length");
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

std::vector<double> default_iou_thresholds() {
  std::vector<double> t;
  for (int i = 1; i <= 9; ++i) t.push_back(i / 10.0);
  return t;
}

double fooling_ratio(const std::vector<Prediction>& perturbed, int target) {
  require_nonempty(perturbed.size(), "fooling_ratio");
  std::size_t hits = 0;
  for (const auto& p : perturbed) hits += p.label == target;
  return static_cast<double>(hits) / static_cast<double>(perturbed.size());
}

double any_flip_ratio(const std::vector<Prediction>& perturbed, const std::vector<int>& labels) {
  require_nonempty(perturbed.size(), "any_flip_ratio");
  require_aligned(perturbed.size(), labels.size(), "any_flip_ratio");
  std::size_t flips = 0;
  for (std::size_t i = 0; i < perturbed.size(); ++i) flips += perturbed[i].label != labels[i];
  return static_cast<double>(flips) / static_cast<double>(perturbed.size());
}

std::optional<double> misclassification_confidence(const std::vector<Prediction>& perturbed, int target) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& p : perturbed) {
    if (p.label != target) continue;
    sum += p.probabilities[static_cast<std::size_t>(target)];
    ++n;
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

double leakage_rate(const std::vector<Prediction>& perturbed, const std::vector<int>& labels) {
  require_nonempty(perturbed.size(), "leakage_rate");
  return any_flip_ratio(perturbed, labels);
}

std::vector<CategoryConfidence> classification_confidence(const std::vector<Prediction>& benign,
                                                          const std::vector<Prediction>& perturbed,
                                                          const std::vector<int>& labels) {
  require_aligned(benign.size(), labels.size(), "classification_confidence");
  require_aligned(perturbed.size(), labels.size(), "classification_confidence");
  std::map<int, CategoryConfidence> acc;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    auto& c = acc[y];
    c.category = y;
    ++c.count;
    c.benign += benign[i].probabilities[static_cast<std::size_t>(y)];
    c.perturbed += perturbed[i].probabilities[static_cast<std::size_t>(y)];
  }
  std::vector<CategoryConfidence> out;
  for (auto& [y, c] : acc) {
    c.benign /= static_cast<double>(c.count);
    c.perturbed /= static_cast<double>(c.count);
    out.push_back(c);
  }
  return out;
}

std::vector<Prediction> predict_all(const Classifier& h, const LabeledDataset& data, const Tensor* p) {
  std::vector<Prediction> out;
  out.reserve(data.samples.size());
  for (const auto& s : data.samples) out.push_back(predict(h, p ? apply_perturbation(s.image, *p) : s.image));
  return out;
}

static std::vector<int> labels_of(const LabeledDataset& data) {
  std::vector<int> y;
  y.reserve(data.samples.size());
  for (const auto& s : data.samples) y.push_back(s.label);
  return y;
}

double fooling_ratio(const Classifier& h, const Tensor& p, const LabeledDataset& source, int target) {
  require_nonempty(source.samples.size(), "fooling_ratio");
  return fooling_ratio(predict_all(h, source, &p), target);
}

std::optional<double> misclassification_confidence(const Classifier& h, const Tensor& p, const LabeledDataset& source,
                                                   int target) {
  return misclassification_confidence(predict_all(h, source, &p), target);
}

double leakage_rate(const Classifier& h, const Tensor& p, const LabeledDataset& nonsource) {
  require_nonempty(nonsource.samples.size(), "leakage_rate");
  return leakage_rate(predict_all(h, nonsource, &p), labels_of(nonsource));
}

std::vector<CategoryConfidence> classification_confidence(const Classifier& h, const Tensor& p,
                                                          const LabeledDataset& nonsource) {
  return classification_confidence(predict_all(h, nonsource), predict_all(h, nonsource, &p), labels_of(nonsource));
}

Tensor binarize(const Tensor& map, double t) {
  if (!(t > 0.0 && t < 1.0)) throw ParameterError("binarize: threshold must lie in (0, 1)");
  Tensor out(map.shape);
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = map[i] > t ? 1.0 : 0.0;
  return out;
}

IouResult iou(const Tensor& m, const Tensor& benign, const std::vector<double>& thresholds) {
  require_same_shape(m, benign, "iou");
  if (thresholds.empty()) throw ParameterError("iou: no thresholds");
  IouResult r;
  double total = 0.0;
  for (double t : thresholds) {
    if (!(t > 0.0 && t < 1.0)) throw ParameterError("iou: threshold must lie in (0, 1)");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < m.size(); ++i) {
      const bool a = m[i] > t, b = benign[i] > t;
      inter += a && b;
      uni += a || b;
    }
    const double v = uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
    r.per_threshold.push_back(v);
    total += v;
  }
  r.mean = total / static_cast<double>(thresholds.size());
  return r;
}

LabeledDataset filter_confident(const Classifier& h, const LabeledDataset& data, double min_confidence) {
  if (!(min_confidence >= 0.0 && min_confidence <= 1.0))
    throw ParameterError("filter_confident: confidence gate must lie in [0, 1]");
  LabeledDataset out = data;
  out.samples.clear();
  for (const auto& s : data.samples) {
    const auto p = predict(h, s.image);
    if (p.label == s.label && p.confidence() >= min_confidence) out.samples.push_back(s);
  }
  return out;
}

std::optional<IouResult> fooled_iou(const Classifier& h, InterpreterKind kind, const Tensor& p,
                                    const LabeledDataset& source, int target, const EvaluationOptions& opts) {
  std::vector<double> sum(opts.thresholds.size(), 0.0);
  std::size_t n = 0;
  for (const auto& s : source.samples) {
    const Image adv = apply_perturbation(s.image, p);
    if (predict(h, adv).label != target) continue;
    const auto mb = interpret(kind, h, s.image, s.label, opts.interpreter_options);
    const auto ma = interpret(kind, h, adv, target, opts.interpreter_options);
    const auto r = iou(ma.values, mb.values, opts.thresholds);
    for (std::size_t k = 0; k < sum.size(); ++k) sum[k] += r.per_threshold[k];
    ++n;
  }
  if (n == 0) return std::nullopt;
  IouResult r;
  double total = 0.0;
  for (double v : sum) {
    r.per_threshold.push_back(v / static_cast<double>(n));
    total += v / static_cast<double>(n);
  }
  r.mean = total / static_cast<double>(sum.size());
  return r;
}

EvaluationReport evaluate(const Classifier& h, InterpreterKind kind, const Perturbation& p,
                          const LabeledDataset& source, const LabeledDataset& nonsource,
                          const EvaluationOptions& opts) {
  require_nonempty(source.samples.size(), "evaluate (source)");
  require_nonempty(nonsource.samples.size(), "evaluate (non-source)");
  EvaluationReport r;
  r.model = h.fingerprint();
  r.interpreter = interpreter_name(kind);
  r.source_category = p.source_category;
  r.target_category = p.target_category;
  r.eta = p.eta;
  r.thresholds = opts.thresholds;

  const auto src_adv = predict_all(h, source, &p.values);
  const auto src_y = labels_of(source);
  r.fooling_ratio = fooling_ratio(src_adv, p.target_category);
  r.any_flip_ratio = any_flip_ratio(src_adv, src_y);
  r.misclassification_confidence = misclassification_confidence(src_adv, p.target_category);
  for (const auto& q : src_adv) r.fooled_count += q.label == p.target_category;
  r.source_count = source.samples.size();

  const auto ns_benign = predict_all(h, nonsource);
  const auto ns_adv = predict_all(h, nonsource, &p.values);
  const auto ns_y = labels_of(nonsource);
  r.leakage_rate = leakage_rate(ns_adv, ns_y);
  r.classification_confidence = classification_confidence(ns_benign, ns_adv, ns_y);
  r.nonsource_count = nonsource.samples.size();

  if (opts.compute_iou) {
    if (auto res = fooled_iou(h, kind, p.values, source, p.target_category, opts)) {
      r.iou_mean = res->mean;
      r.iou_per_threshold = res->per_threshold;
    }
  }
  return r;
}

nlohmann::ordered_json EvaluationReport::to_json() const {
  nlohmann::ordered_json j;
  j["model"] = model;
  j["interpreter"] = interpreter;
  j["source_category"] = source_category;
  j["target_category"] = target_category;
  j["eta"] = eta;
  j["fooling_ratio"] = fooling_ratio;
  j["any_flip_ratio"] = any_flip_ratio;
  j["misclassification_confidence"] =
      misclassification_confidence ? nlohmann::ordered_json(*misclassification_confidence) : nullptr;
  j["leakage_rate"] = leakage_rate;
  auto cc = nlohmann::ordered_json::array();
  for (const auto& c : classification_confidence)
    cc.push_back({{"category", c.category}, {"count", c.count}, {"benign", c.benign}, {"perturbed", c.perturbed}});
  j["classification_confidence"] = cc;
  j["iou_mean"] = iou_mean ? nlohmann::ordered_json(*iou_mean) : nullptr;
  j["iou_per_threshold"] = iou_per_threshold;
  j["thresholds"] = thresholds;
  j["source_count"] = source_count;
  j["fooled_count"] = fooled_count;
  j["nonsource_count"] = nonsource_count;
  return j;
}

std::string EvaluationReport::csv_header() {
  return "model,interpreter,source,target,eta,fooling_ratio,any_flip_ratio,misclassification_confidence,"
         "leakage_rate,iou_mean,source_count,fooled_count,nonsource_count";
}

std::string EvaluationReport::csv_row() const {
  std::ostringstream os;
  os << model << ',' << interpreter << ',' << source_category << ',' << target_category << ',' << fmt(eta) << ','
     << fmt(fooling_ratio) << ',' << fmt(any_flip_ratio) << ','
     << (misclassification_confidence ? fmt(*misclassification_confidence) : "") << ',' << fmt(leakage_rate) << ','
     << (iou_mean ? fmt(*iou_mean) : "") << ',' << source_count << ',' << fooled_count << ',' << nonsource_count;
  return os.str();
}

void emit_qualitative_grid(const std::vector<GridRow>& rows, const std::filesystem::path& ppm_path,
                           const std::vector<std::string>& comments) {
  if (rows.empty()) throw ParameterError("qualitative grid needs at least one row");
  const int h = rows[0].benign_image.dim(1), w = rows[0].benign_image.dim(2);
  const Shape img{3, h, w}, map{h, w};
  for (const auto& r : rows) {
    if (r.benign_image.shape != img || r.adversarial_image.shape != img || r.benign_map.shape != map ||
        r.adversarial_map.shape != map)
      throw ShapeError("qualitative grid rows must share one image shape");
  }
  constexpr int kTiles = 4;
  Tensor out({3, h * static_cast<int>(rows.size()), w * kTiles});
  const int W = w * kTiles;
  const int H = h * static_cast<int>(rows.size());
  auto put = [&](int c, int y, int x, double v) {
    out[(static_cast<std::size_t>(c) * H + y) * W + x] = std::clamp(v, 0.0, 1.0);
  };
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const int oy = static_cast<int>(r) * h;
    const Tensor* imgs[2] = {&rows[r].benign_image, &rows[r].adversarial_image};
    const Tensor* maps[2] = {&rows[r].benign_map, &rows[r].adversarial_map};
    for (int k = 0; k < 2; ++k) {
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          for (int c = 0; c < 3; ++c) put(c, oy + y, 2 * k * w + x, imgs[k]->at(c, y, x));
          const double m = (*maps[k])[static_cast<std::size_t>(y) * w + x];
          for (int c = 0; c < 3; ++c) put(c, oy + y, (2 * k + 1) * w + x, m);
        }
    }
  }
  write_ppm(ppm_path, out, comments);
  auto csv_path = ppm_path;
  csv_path.replace_extension(".csv");
  std::ofstream os(csv_path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + csv_path.string());
  for (const auto& c : comments) os << "# " << c << '\n';
  os << "row,benign_label,adversarial_label\n";
  for (std::size_t r = 0; r < rows.size(); ++r)
    os << r << ',' << rows[r].benign_label << ',' << rows[r].adversarial_label << '\n';
  if (!os) throw std::runtime_error("write failed: " + csv_path.string());
}

}  // namespace singleadv
