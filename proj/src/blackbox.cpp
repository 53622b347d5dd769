#include "singleadv/blackbox.hpp"

#include <algorithm>
#include <fstream>

namespace singleadv {

TeacherOracle::TeacherOracle(Classifier model, std::string declared_architecture)
    : model_(std::move(model)),
      arch_(std::move(declared_architecture)),
      shape_(model_.input_shape()),
      num_categories_(model_.num_categories()) {}

TeacherOracle::Answer TeacherOracle::predict(const Image& x) {
  const auto p = singleadv::predict(model_, x);
  const std::uint64_t seq = count_.fetch_add(1);
  QueryRecord rec;
  rec.index = seq;
  rec.label = p.label;
  rec.confidence = p.confidence();
  rec.timestamp = seq;
  {
    std::lock_guard<std::mutex> lock(mu_);
    log_.push_back(rec);
  }
  return {p.label, p.confidence()};
}

std::vector<QueryRecord> TeacherOracle::query_log() const {
  std::lock_guard<std::mutex> lock(mu_);
  auto out = log_;
  std::sort(out.begin(), out.end(), [](const QueryRecord& a, const QueryRecord& b) { return a.index < b.index; });
  return out;
}

void TeacherOracle::write_query_log(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.precision(17);
  os << "index,label,confidence,timestamp\n";
  for (const auto& r : query_log()) os << r.index << ',' << r.label << ',' << r.confidence << ',' << r.timestamp << '\n';
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

LabeledDataset label_with_teacher(TeacherOracle& teacher, const std::vector<Image>& pool) {
  if (pool.empty()) throw ParameterError("label_with_teacher: empty pool");
  LabeledDataset out{{}, Split::kTrain, teacher.num_categories(), teacher.input_shape()};
  out.samples.reserve(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) {
    try {
      out.samples.push_back({pool[i], teacher.predict(pool[i]).label});
    } catch (const std::exception& e) {
      throw OracleError("teacher query failed at pool index " + std::to_string(i) + ": " + e.what(), i);
    }
  }
  return out;
}

Classifier train_student(const std::string& arch_id, const LabeledDataset& labeled, const TrainConfig& cfg,
                         const TeacherOracle& teacher, bool allow_same_architecture) {
  if (!allow_same_architecture && arch_id == teacher.declared_architecture())
    throw ParameterError("student architecture '" + arch_id + "' matches the teacher's");
  LabeledDataset data = labeled;
  data.split = Split::kTrain;
  return train_classifier(data, architecture(arch_id), cfg);
}

double teacher_agreement(const Classifier& student, TeacherOracle& teacher, const std::vector<Image>& pool) {
  if (pool.empty()) throw ParameterError("teacher_agreement: empty pool");
  std::size_t same = 0;
  for (const auto& x : pool) same += predict(student, x).label == teacher.predict(x).label;
  return static_cast<double>(same) / static_cast<double>(pool.size());
}

double transfer_evaluate(TeacherOracle& teacher, const Tensor& p, const LabeledDataset& source, int target) {
  if (source.samples.empty()) throw ParameterError("transfer_evaluate: empty sample set");
  std::size_t hits = 0;
  for (const auto& s : source.samples) hits += teacher.predict(apply_perturbation(s.image, p)).label == target;
  return static_cast<double>(hits) / static_cast<double>(source.samples.size());
}

LabeledDataset filter_confident(TeacherOracle& teacher, const LabeledDataset& data, double min_confidence) {
  LabeledDataset out = data;
  out.samples.clear();
  for (const auto& s : data.samples) {
    const auto a = teacher.predict(s.image);
    if (a.label == s.label && a.confidence >= min_confidence) out.samples.push_back(s);
  }
  return out;
}

std::vector<Image> images_of(const LabeledDataset& data) {
  std::vector<Image> out;
  out.reserve(data.samples.size());
  for (const auto& s : data.samples) out.push_back(s.image);
  return out;
}

}  // namespace singleadv
