#include "singleadv/core.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <cstdio>
#include <limits>
#include <numbers>

#include "json.hpp"

namespace singleadv {

void require_image_shape(const Tensor& t, const ImageShape& shape, const char* what) {
  if (!shape.matches(t)) {
    throw ShapeError(std::string(what) + ": expected image shape " + shape_str(shape.dims()) + ", got " +
                     shape_str(t.shape));
  }
}

const char* split_name(Split s) { return s == Split::kTrain ? "train" : "test"; }

void LabeledDataset::validate() const {
  if (num_categories < 1) throw ParameterError("dataset needs at least one category");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (s.label < 0 || s.label >= num_categories) {
      throw ParameterError("sample " + std::to_string(i) + " has label " + std::to_string(s.label) +
                           " outside [0, " + std::to_string(num_categories) + ")");
    }
    require_image_shape(s.image, shape, "dataset sample");
  }
}

LabeledDataset LabeledDataset::subset(const std::vector<std::size_t>& indices) const {
  LabeledDataset out{{}, split, num_categories, shape};
  out.samples.reserve(indices.size());
  for (auto i : indices) out.samples.push_back(samples.at(i));
  return out;
}

LabeledDataset LabeledDataset::filter_label(int label) const {
  LabeledDataset out{{}, split, num_categories, shape};
  for (const auto& s : samples)
    if (s.label == label) out.samples.push_back(s);
  return out;
}

LabeledDataset LabeledDataset::exclude_label(int label) const {
  LabeledDataset out{{}, split, num_categories, shape};
  for (const auto& s : samples)
    if (s.label != label) out.samples.push_back(s);
  return out;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

RandomSource::RandomSource(std::uint64_t seed) : seed_(seed), engine_(seed) {}

std::uint64_t RandomSource::next_u64() { return engine_(); }

double RandomSource::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t RandomSource::below(std::uint64_t n) {
  if (n == 0) throw ParameterError("RandomSource::below(0)");
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t r;
  do {
    r = next_u64();
  } while (r >= limit);
  return r % n;
}

double RandomSource::normal() {
  if (has_spare_normal_) {
    has_spare_normal_ = false;
    return spare_normal_;
  }
  double u1;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_normal_ = r * std::sin(theta);
  has_spare_normal_ = true;
  return r * std::cos(theta);
}

RandomSource RandomSource::fork(std::uint64_t stream) const {
  return RandomSource(splitmix64(seed_ ^ splitmix64(stream + 0x5ad5ULL)));
}

Image clip_to_valid(const Tensor& image, const ImageShape& shape) {
  require_image_shape(image, shape, "clip_to_valid");
  Image out = image;
  for (double& v : out.data) v = std::clamp(v, 0.0, 1.0);
  return out;
}

Perturbation Perturbation::zeros(const ImageShape& shape, double eta, int source, int target, std::uint64_t seed) {
  if (!(eta > 0.0)) throw ParameterError("perturbation budget must be positive");
  if (source == target) throw ParameterError("source and target categories must differ");
  return Perturbation{Tensor(shape.dims(), 0.0), eta, source, target, seed};
}

Image apply_perturbation(const Image& x, const Tensor& p) {
  require_same_shape(x, p, "apply_perturbation");
  Image out(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::clamp(x[i] - p[i], 0.0, 1.0);
  return out;
}

Image apply_perturbation(const Image& x, const Perturbation& p) { return apply_perturbation(x, p.values); }

std::vector<std::size_t> batch_sample(std::size_t dataset_size, std::size_t count, RandomSource& rng) {
  if (count > dataset_size) {
    throw ParameterError("batch_sample: count " + std::to_string(count) + " exceeds dataset size " +
                         std::to_string(dataset_size));
  }
  std::vector<std::size_t> idx(dataset_size);
  for (std::size_t i = 0; i < dataset_size; ++i) idx[i] = i;
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(dataset_size - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(count);
  return idx;
}

std::vector<std::size_t> batch_sample(const LabeledDataset& dataset, std::size_t count, RandomSource& rng) {
  return batch_sample(dataset.size(), count, rng);
}

namespace {

void put_u32(std::ofstream& os, std::uint32_t v) {
  const std::array<unsigned char, 4> b{static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                       static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b.data()), 4);
}

std::uint32_t get_u32(std::ifstream& is) {
  std::array<unsigned char, 4> b{};
  is.read(reinterpret_cast<char*>(b.data()), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::filesystem::path sidecar_path(const std::filesystem::path& array_path) {
  auto p = array_path;
  p.replace_extension(".json");
  return p;
}

}  // namespace

void write_perturbation_array(const std::filesystem::path& path, const Tensor& values) {
  if (values.rank() != 3) throw ShapeError("perturbation array must be rank 3, got " + shape_str(values.shape));
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.write("SADV", 4);
  os.put(static_cast<char>(kPerturbationFormatVersion));
  for (int d : values.shape) put_u32(os, static_cast<std::uint32_t>(d));
  for (double v : values.data) put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

Tensor read_perturbation_array(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "SADV", 4) != 0) throw std::runtime_error(path.string() + ": bad magic");
  const int version = is.get();
  if (version != kPerturbationFormatVersion) {
    throw std::runtime_error(path.string() + ": unsupported format version " + std::to_string(version));
  }
  Shape shape(3);
  for (int& d : shape) d = static_cast<int>(get_u32(is));
  Tensor t(shape);
  for (double& v : t.data) v = static_cast<double>(std::bit_cast<float>(get_u32(is)));
  if (!is) throw std::runtime_error(path.string() + ": truncated array");
  return t;
}

void save_perturbation(const std::filesystem::path& array_path, const Perturbation& p, const PerturbationMetadata& meta) {
  write_perturbation_array(array_path, p.values);
  nlohmann::ordered_json j;
  j["format"] = "SADV";
  j["version"] = kPerturbationFormatVersion;
  j["eta"] = meta.eta;
  j["source_category"] = meta.source_category;
  j["target_category"] = meta.target_category;
  j["seed"] = meta.seed;
  j["model_fingerprint"] = meta.model_fingerprint;
  j["iterations"] = meta.iterations;
  j["converged"] = meta.converged;
  j["config_hash"] = meta.config_hash;
  j["dataset_hash"] = meta.dataset_hash;
  std::ofstream os(sidecar_path(array_path));
  if (!os) throw std::runtime_error("cannot write sidecar for " + array_path.string());
  os << j.dump(2) << '\n';
}

Perturbation load_perturbation(const std::filesystem::path& array_path, PerturbationMetadata* meta) {
  Perturbation p;
  p.values = read_perturbation_array(array_path);
  std::ifstream is(sidecar_path(array_path));
  if (!is) throw std::runtime_error("missing sidecar " + sidecar_path(array_path).string());
  const auto j = nlohmann::json::parse(is);
  p.eta = j.at("eta").get<double>();
  p.source_category = j.at("source_category").get<int>();
  p.target_category = j.at("target_category").get<int>();
  p.seed = j.at("seed").get<std::uint64_t>();
  // f32 storage can round a value a hair past eta.
  for (double& v : p.values.data) v = std::clamp(v, -p.eta, p.eta);
  if (meta) {
    meta->eta = p.eta;
    meta->source_category = p.source_category;
    meta->target_category = p.target_category;
    meta->seed = p.seed;
    meta->model_fingerprint = j.value("model_fingerprint", "");
    meta->iterations = j.value("iterations", 0);
    meta->converged = j.value("converged", false);
    meta->config_hash = j.value("config_hash", "");
    meta->dataset_hash = j.value("dataset_hash", "");
  }
  return p;
}

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t h) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string fnv1a_hex(const void* data, std::size_t size) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(data, size)));
  return buf;
}

std::string dataset_fingerprint(const LabeledDataset& dataset) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& s : dataset.samples) {
    h = fnv1a64(s.image.data.data(), s.image.size() * sizeof(double), h);
    h = fnv1a64(&s.label, sizeof(s.label), h);
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace singleadv
