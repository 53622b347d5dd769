#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "singleadv/core.hpp"
#include "singleadv/interpreters.hpp"
#include "singleadv/models.hpp"

#include "json.hpp"

namespace singleadv {

/// The nine binarization thresholds 0.1, 0.2, ..., 0.9.
std::vector<double> default_iou_thresholds();

// Folds over precomputed predictions. Every sample set must be non-empty.
double fooling_ratio(const std::vector<Prediction>& perturbed, int target);
/// Fraction whose prediction differs from the benign label.
double any_flip_ratio(const std::vector<Prediction>& perturbed, const std::vector<int>& labels);
/// Mean p(target) over samples predicted as target; nullopt when none are.
std::optional<double> misclassification_confidence(const std::vector<Prediction>& perturbed, int target);
double leakage_rate(const std::vector<Prediction>& perturbed, const std::vector<int>& labels);

struct CategoryConfidence {
  int category = 0;
  std::size_t count = 0;
  double benign = 0.0;
  double perturbed = 0.0;
};
/// Mean true-category probability per category, in ascending category order.
std::vector<CategoryConfidence> classification_confidence(const std::vector<Prediction>& benign,
                                                          const std::vector<Prediction>& perturbed,
                                                          const std::vector<int>& labels);

std::vector<Prediction> predict_all(const Classifier& h, const LabeledDataset& data, const Tensor* p = nullptr);

// Model-level forms; p is subtracted with apply_perturbation.
double fooling_ratio(const Classifier& h, const Tensor& p, const LabeledDataset& source, int target);
std::optional<double> misclassification_confidence(const Classifier& h, const Tensor& p, const LabeledDataset& source,
                                                   int target);
double leakage_rate(const Classifier& h, const Tensor& p, const LabeledDataset& nonsource);
std::vector<CategoryConfidence> classification_confidence(const Classifier& h, const Tensor& p,
                                                          const LabeledDataset& nonsource);

/// 1 where value > t, else 0. Requires 0 < t < 1.
Tensor binarize(const Tensor& map, double t);

struct IouResult {
  double mean = 0.0;
  std::vector<double> per_threshold;
};
/// Set IoU of the binarized maps per threshold; an empty union counts as 1.
IouResult iou(const Tensor& m, const Tensor& benign, const std::vector<double>& thresholds = default_iou_thresholds());

/// Samples classified correctly with at least `min_confidence`.
LabeledDataset filter_confident(const Classifier& h, const LabeledDataset& data, double min_confidence = 0.6);

struct EvaluationReport {
  std::string model;
  std::string interpreter;
  int source_category = 0;
  int target_category = 0;
  double eta = 0.0;
  double fooling_ratio = 0.0;
  double any_flip_ratio = 0.0;
  std::optional<double> misclassification_confidence;
  double leakage_rate = 0.0;
  std::vector<CategoryConfidence> classification_confidence;
  /// Over successfully fooled source samples; nullopt when none were fooled.
  std::optional<double> iou_mean;
  std::vector<double> iou_per_threshold;
  std::vector<double> thresholds;
  std::size_t source_count = 0;
  std::size_t fooled_count = 0;
  std::size_t nonsource_count = 0;

  nlohmann::ordered_json to_json() const;
  static std::string csv_header();
  std::string csv_row() const;
};

struct EvaluationOptions {
  InterpreterOptions interpreter_options;
  std::vector<double> thresholds = default_iou_thresholds();
  bool compute_iou = true;
};

/// Mean IoU between g(x - p; predicted) and g(x; y) over the source samples
/// predicted as `target` after perturbation.
std::optional<IouResult> fooled_iou(const Classifier& h, InterpreterKind kind, const Tensor& p,
                                    const LabeledDataset& source, int target, const EvaluationOptions& opts = {});

EvaluationReport evaluate(const Classifier& h, InterpreterKind kind, const Perturbation& p,
                          const LabeledDataset& source, const LabeledDataset& nonsource,
                          const EvaluationOptions& opts = {});

struct GridRow {
  Image benign_image;
  Tensor benign_map;
  Image adversarial_image;
  Tensor adversarial_map;
  int benign_label = 0;
  int adversarial_label = 0;
};

/// Tiles rows of (benign image, benign map, adversarial image, adversarial
/// map) into one PPM; labels go to a `.csv` next to it.
void emit_qualitative_grid(const std::vector<GridRow>& rows, const std::filesystem::path& ppm_path,
                           const std::vector<std::string>& comments = {});

}  // namespace singleadv
