#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "singleadv/core.hpp"
#include "test_helpers.hpp"

using namespace singleadv;
using singleadv::testing::random_tensor;

namespace {

const ImageShape kShape{3, 4, 5};

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("singleadv_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("clip_to_valid clamps into the unit interval") {
  Tensor t(kShape.dims(), 0.5);
  t[0] = 1.2;
  t[1] = -0.1;
  const Image c = clip_to_valid(t, kShape);
  CHECK(c[0] == 1.0);
  CHECK(c[1] == 0.0);
  CHECK(c[2] == 0.5);

  RandomSource rng(3);
  const Tensor inside = random_tensor(kShape.dims(), rng);
  CHECK(clip_to_valid(inside, kShape).data == inside.data);
  CHECK_THROWS_AS(clip_to_valid(Tensor({3, 4, 4}), kShape), ShapeError);
}

TEST_CASE("apply_perturbation subtracts then clamps") {
  RandomSource rng(5);
  const Image x = random_tensor(kShape.dims(), rng);
  CHECK(apply_perturbation(x, Tensor(kShape.dims(), 0.0)).data == x.data);

  Image one(kShape.dims(), 0.1);
  Tensor p(kShape.dims(), 0.3);
  CHECK(apply_perturbation(one, p)[0] == 0.0);

  const Tensor q = random_tensor(kShape.dims(), rng, -0.4, 0.4);
  const Image out = apply_perturbation(x, q);
  for (std::size_t i = 0; i < x.size(); ++i) {
    double v = x[i] - q[i];
    if (v < 0.0) v = 0.0;
    if (v > 1.0) v = 1.0;
    CHECK(out[i] == v);
  }
  CHECK_THROWS_AS(apply_perturbation(x, Tensor({3, 4, 4})), ShapeError);
}

TEST_CASE("apply_perturbation stays valid and within the budget") {
  RandomSource rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const double eta = rng.uniform(0.01, 0.3);
    const Image x = random_tensor(kShape.dims(), rng);
    const Tensor p = random_tensor(kShape.dims(), rng, -eta, eta);
    const Image y = apply_perturbation(x, p);
    for (std::size_t i = 0; i < y.size(); ++i) {
      CHECK(y[i] >= 0.0);
      CHECK(y[i] <= 1.0);
      CHECK(std::abs(y[i] - x[i]) <= eta);
    }
    CHECK(apply_perturbation(apply_perturbation(x, Tensor(kShape.dims())), Tensor(kShape.dims())).data == x.data);
  }
}

TEST_CASE("batch_sample draws without replacement and is reproducible") {
  RandomSource a(11), b(11);
  const auto full = batch_sample(10, 10, a);
  std::set<std::size_t> uniq(full.begin(), full.end());
  CHECK(uniq.size() == 10);
  CHECK(*uniq.rbegin() == 9);
  CHECK(batch_sample(10, 10, b) == full);

  RandomSource c(1);
  CHECK_THROWS_AS(batch_sample(3, 4, c), ParameterError);

  RandomSource d(4);
  for (int t = 0; t < 100; ++t) {
    const auto s = batch_sample(20, 7, d);
    CHECK(std::set<std::size_t>(s.begin(), s.end()).size() == 7);
  }
}

TEST_CASE("single draws are uniform within three sigma") {
  RandomSource rng(2024);
  const int n = 10000, k = 10;
  std::vector<int> counts(k, 0);
  for (int i = 0; i < n; ++i) ++counts[batch_sample(k, 1, rng)[0]];
  const double expected = static_cast<double>(n) / k;
  const double sigma = std::sqrt(n * (1.0 / k) * (1.0 - 1.0 / k));
  double chi2 = 0.0;
  for (int c : counts) {
    CHECK(std::abs(c - expected) <= 3.0 * sigma);
    chi2 += (c - expected) * (c - expected) / expected;
  }
  // 99.9th percentile of chi-square with 9 degrees of freedom.
  CHECK(chi2 < 27.88);
}

TEST_CASE("RandomSource reproducibility and forking") {
  RandomSource a(77), b(77);
  for (int i = 0; i < 100; ++i) {
    CHECK(a.next_u64() == b.next_u64());
    CHECK(a.normal() == b.normal());
    CHECK(a.uniform() == b.uniform());
  }
  CHECK(RandomSource(5).fork(1).seed() == RandomSource(5).fork(1).seed());
  CHECK(RandomSource(5).fork(1).seed() != RandomSource(5).fork(2).seed());
  CHECK(RandomSource(5).fork(1).seed() != RandomSource(6).fork(1).seed());
  RandomSource u(3);
  for (int i = 0; i < 1000; ++i) {
    const double v = u.uniform();
    CHECK(v >= 0.0);
    CHECK(v < 1.0);
    CHECK(u.below(7) < 7);
  }
}

TEST_CASE("perturbation array format") {
  const auto dir = temp_dir("core_format");
  Tensor p({2, 1, 2}, std::vector<double>{0.5, -0.25, 1.0, 0.0});
  write_perturbation_array(dir / "p.sadv", p);

  std::ifstream is(dir / "p.sadv", std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  REQUIRE(bytes.size() == 4 + 1 + 12 + 16);
  CHECK(std::memcmp(bytes.data(), "SADV", 4) == 0);
  CHECK(bytes[4] == kPerturbationFormatVersion);
  CHECK(bytes[5] == 2);
  CHECK(bytes[9] == 1);
  CHECK(bytes[13] == 2);
  // 0.5f = 0x3f000000 little endian.
  CHECK(bytes[17] == 0x00);
  CHECK(bytes[20] == 0x3f);
  CHECK(read_perturbation_array(dir / "p.sadv").data == p.data);

  std::ofstream bad(dir / "bad.sadv", std::ios::binary);
  bad << "XXXX";
  bad.close();
  CHECK_THROWS(read_perturbation_array(dir / "bad.sadv"));
}

TEST_CASE("perturbation sidecar round trip") {
  const auto dir = temp_dir("core_sidecar");
  Perturbation p = Perturbation::zeros(kShape, 0.05, 2, 7, 99);
  p.values[3] = 0.03125;
  PerturbationMetadata meta;
  meta.eta = 0.05;
  meta.source_category = 2;
  meta.target_category = 7;
  meta.seed = 99;
  meta.model_fingerprint = "abc";
  meta.iterations = 150;
  meta.converged = true;
  meta.config_hash = "cfg";
  meta.dataset_hash = "data";
  save_perturbation(dir / "p.sadv", p, meta);
  CHECK(std::filesystem::exists(dir / "p.json"));
  PerturbationMetadata back;
  const Perturbation q = load_perturbation(dir / "p.sadv", &back);
  CHECK(q.values.data == p.values.data);
  CHECK(q.eta == 0.05);
  CHECK(q.source_category == 2);
  CHECK(q.target_category == 7);
  CHECK(q.seed == 99);
  CHECK(back.model_fingerprint == "abc");
  CHECK(back.iterations == 150);
  CHECK(back.converged);
  CHECK(back.config_hash == "cfg");
  CHECK(back.dataset_hash == "data");
  CHECK_THROWS(Perturbation::zeros(kShape, 0.05, 3, 3));
}

TEST_CASE("labeled dataset helpers") {
  LabeledDataset d;
  d.num_categories = 3;
  d.shape = {1, 2, 2};
  for (int i = 0; i < 6; ++i) d.samples.push_back({Tensor({1, 2, 2}, 0.1 * i), i % 3});
  CHECK_NOTHROW(d.validate());
  CHECK(d.filter_label(1).size() == 2);
  CHECK(d.exclude_label(1).size() == 4);
  const auto s = d.subset({5, 0});
  CHECK(s.samples[0].label == 2);
  CHECK(s.samples[1].label == 0);
  d.samples[0].label = 3;
  CHECK_THROWS_AS(d.validate(), ParameterError);
}

TEST_CASE("fnv1a matches the reference vectors") {
  CHECK(fnv1a_hex("", 0) == "cbf29ce484222325");
  CHECK(fnv1a_hex("a", 1) == "af63dc4c8601ec8c");
  CHECK(fnv1a_hex("foobar", 6) == "85944171f73967e8");
}
