#pragma once

#include <atomic>
#include <filesystem>
#include <mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include "singleadv/core.hpp"
#include "singleadv/models.hpp"

namespace singleadv {

class OracleError : public std::runtime_error {
 public:
  OracleError(const std::string& what, std::size_t index) : std::runtime_error(what), index(index) {}
  std::size_t index;
};

struct QueryRecord {
  std::uint64_t index = 0;
  int label = 0;
  double confidence = 0.0;
  /// Logical clock: the query's sequence number.
  std::uint64_t timestamp = 0;
  std::string operation = "predict";
};

/// Predict-only access to a model. Nothing else about the wrapped model is
/// reachable through this type.
class TeacherOracle {
 public:
  TeacherOracle(Classifier model, std::string declared_architecture);

  struct Answer {
    int label = 0;
    double confidence = 0.0;
  };
  Answer predict(const Image& x);

  std::uint64_t query_count() const { return count_.load(); }
  std::vector<QueryRecord> query_log() const;
  const std::string& declared_architecture() const { return arch_; }
  const ImageShape& input_shape() const { return shape_; }
  int num_categories() const { return num_categories_; }
  /// index,label,confidence,timestamp
  void write_query_log(const std::filesystem::path& path) const;

 private:
  Classifier model_;
  std::string arch_;
  ImageShape shape_;
  int num_categories_;
  std::atomic<std::uint64_t> count_{0};
  mutable std::mutex mu_;
  std::vector<QueryRecord> log_;
};

/// One oracle query per image, labels in input order.
LabeledDataset label_with_teacher(TeacherOracle& teacher, const std::vector<Image>& pool);

/// Trains a white-box surrogate on teacher labels. The architecture must
/// differ from the teacher's declared one unless allow_same_architecture.
Classifier train_student(const std::string& arch_id, const LabeledDataset& labeled, const TrainConfig& cfg,
                         const TeacherOracle& teacher, bool allow_same_architecture = false);

/// Fraction of images where the student's prediction equals the teacher's.
double teacher_agreement(const Classifier& student, TeacherOracle& teacher, const std::vector<Image>& pool);

/// Fooling ratio of p measured through the oracle only.
double transfer_evaluate(TeacherOracle& teacher, const Tensor& p, const LabeledDataset& source, int target);

/// Source samples that the teacher labels correctly with at least min_confidence.
LabeledDataset filter_confident(TeacherOracle& teacher, const LabeledDataset& data, double min_confidence = 0.6);

std::vector<Image> images_of(const LabeledDataset& data);

}  // namespace singleadv
