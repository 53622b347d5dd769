#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "singleadv/datasets.hpp"
#include "singleadv/models.hpp"
#include "test_helpers.hpp"

using namespace singleadv;
using namespace singleadv::testing;

namespace {

Classifier linear_model(const ImageShape& shape, int k, std::uint64_t seed) {
  return Classifier(architecture("linear"), shape, k, seed);
}

DatasetSplits separable_two_category() {
  SyntheticShapesConfig cfg;
  cfg.num_categories = 2;
  cfg.train_per_category = 80;
  cfg.test_per_category = 40;
  cfg.color_coded = true;
  cfg.seed = 21;
  return generate_synthetic_shapes(cfg);
}

Tensor mean_color(const Image& x) {
  Tensor m({x.dim(0)}, 0.0);
  const int hw = x.dim(1) * x.dim(2);
  for (int c = 0; c < x.dim(0); ++c)
    for (int i = 0; i < hw; ++i) m[static_cast<std::size_t>(c)] += x[static_cast<std::size_t>(c) * hw + i] / hw;
  return m;
}

}  // namespace

TEST_CASE("built-in architectures") {
  for (const char* id : {"cnn-small", "cnn-wide", "cnn-deep"}) {
    const ArchSpec a = architecture(id);
    CHECK(a.head == HeadKind::kGapLinear);
    Classifier h(a, {3, 16, 16}, 10, 1);
    CHECK(h.cam_compatible());
    CHECK(h.last_conv_shape()[0] == a.convs.back().out_channels);
  }
  CHECK(architecture("cnn-small").convs.size() == 3);
  CHECK(architecture("cnn-wide").convs.size() == 4);
  CHECK_THROWS_AS(architecture("resnet"), ParameterError);
  const Classifier lin = linear_model({3, 4, 4}, 5, 1);
  CHECK_FALSE(lin.cam_compatible());
  CHECK_THROWS_AS(class_weights(lin, 0), UnsupportedArchitecture);
  CHECK(parameter_count(architecture("linear"), {3, 4, 4}, 5) == 5 * 48 + 5);
}

TEST_CASE("predict returns a normalized distribution and its argmax") {
  RandomSource rng(1);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Classifier h = toy_classifier(seed);
    const Image x = random_tensor({2, 6, 6}, rng);
    const Prediction p = predict(h, x);
    CHECK(p.probabilities.size() == 3);
    CHECK(std::abs(p.probabilities.sum() - 1.0) <= 1e-5);
    const auto it = std::max_element(p.probabilities.data.begin(), p.probabilities.data.end());
    CHECK(p.label == static_cast<int>(it - p.probabilities.data.begin()));
    for (double v : p.probabilities.data) CHECK(v >= 0.0);
  }
  CHECK_THROWS_AS(predict(toy_classifier(0), Tensor({2, 5, 6})), ShapeError);
}

TEST_CASE("uniform logits give uniform probabilities") {
  Classifier h = linear_model({1, 3, 3}, 4, 3);
  auto v = h.parameter_values();
  for (auto& t : v) std::fill(t.data.begin(), t.data.end(), 0.0);
  h.set_parameter_values(v);
  const Prediction p = predict(h, Tensor({1, 3, 3}, 0.7));
  for (double q : p.probabilities.data) CHECK(q == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("input gradient of a linear class score is the weight row") {
  Classifier h = linear_model({2, 3, 3}, 3, 8);
  RandomSource rng(2);
  const Image x = random_tensor({2, 3, 3}, rng);
  const Tensor g = input_gradient(h, x, {LossKind::kClassScore, 1});
  const Tensor& w = h.parameters()[0]->value;
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == doctest::Approx(w[w.dim(1) + i]).epsilon(1e-12));
}

TEST_CASE("input gradient matches central differences on ten seeds in both modes") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Classifier h = toy_classifier(100 + seed);
    RandomSource rng(seed);
    for (const ReluMode mode : {ReluMode::exact(), ReluMode::smoothed(1e-4), ReluMode::smoothed(1e-2, true)}) {
      for (const LossSpec spec : {LossSpec{LossKind::kCrossEntropyToTarget, 2}, LossSpec{LossKind::kClassScore, 0}}) {
        // The surrogate's curvature scales like 1/sqrt(tau), so its oracle uses a finer step.
        const double step = mode.kind == ReluMode::Kind::kExact ? 1e-3 : 1e-5;
        const auto f = [&](const Tensor& z) { return loss_value(h, z, spec, mode); };
        const Image x = differentiable_point(f, {2, 6, 6}, rng, step);
        const Tensor g = input_gradient(h, x, spec, mode);
        INFO("seed " << seed << " tau " << mode.tau << " exact " << (mode.kind == ReluMode::Kind::kExact));
        CHECK(max_abs_diff(g, finite_difference(f, x, step)) <= 1e-3);
      }
    }
  }
}

TEST_CASE("cross-entropy gradient vanishes at a confident correct prediction") {
  Classifier h = linear_model({1, 2, 2}, 2, 4);
  auto v = h.parameter_values();
  std::fill(v[0].data.begin(), v[0].data.end(), 0.0);
  v[1].data = {40.0, 0.0};
  h.set_parameter_values(v);
  const Tensor g = input_gradient(h, Tensor({1, 2, 2}, 0.3), {LossKind::kCrossEntropyToTarget, 0});
  CHECK(g.l2_norm() <= 1e-4);
  auto w = v;
  std::fill(w[0].data.begin(), w[0].data.end(), 1.0);
  w[1].data = {40.0, 0.0};
  h.set_parameter_values(w);
  CHECK(input_gradient(h, Tensor({1, 2, 2}, 0.3), {LossKind::kCrossEntropyToTarget, 0}).l2_norm() <= 1e-4);
}

TEST_CASE("feature maps: shape contract, centring and a hand-rolled convolution") {
  const ArchSpec one{"one-conv", {{3, 1}}, HeadKind::kGapLinear};
  Classifier h(one, {2, 5, 4}, 2, 17);
  RandomSource rng(6);
  auto v = h.parameter_values();
  for (double& b : v[1].data) b = rng.uniform(-0.2, 0.2);
  h.set_parameter_values(v);

  const Image x = random_tensor({2, 5, 4}, rng);
  const Tensor a = feature_maps(h, x);
  CHECK(a.shape == h.last_conv_shape());
  const Tensor& w = v[0];
  double worst = 0.0;
  for (int o = 0; o < 3; ++o)
    for (int r = 0; r < 5; ++r)
      for (int c = 0; c < 4; ++c) {
        double s = v[1][static_cast<std::size_t>(o)];
        for (int i = 0; i < 2; ++i)
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const int yy = r + dy, xx = c + dx;
              if (yy < 0 || yy >= 5 || xx < 0 || xx >= 4) continue;
              const double wv = w[((static_cast<std::size_t>(o) * 2 + i) * 3 + (dy + 1)) * 3 + (dx + 1)];
              s += wv * (x.at(i, yy, xx) - 0.5);
            }
        worst = std::max(worst, std::abs(std::max(s, 0.0) - a.at(o, r, c)));
      }
  CHECK(worst <= 1e-6);

  // Mid-grey is the network's zero after centring.
  Classifier nb(architecture("cnn-small"), {3, 8, 8}, 4, 5);
  CHECK(feature_maps(nb, Tensor({3, 8, 8}, 0.5)).max_abs() == 0.0);
  CHECK(feature_maps(nb, Tensor({3, 8, 8}, 0.5)).shape == nb.last_conv_shape());
}

TEST_CASE("class weights reproduce the logits through the pooled features") {
  const auto data = separable_two_category();
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 16;
  const Classifier h = train_classifier(data.train, architecture("cnn-small"), cfg);
  CHECK(class_weights(h, 1).size() == static_cast<std::size_t>(h.last_conv_shape()[0]));
  for (std::size_t s = 0; s < 5; ++s) {
    const Image& x = data.test.samples[s].image;
    const Tensor a = feature_maps(h, x);
    const Tensor z = logits(h, x);
    const int C = a.dim(0), hw = a.dim(1) * a.dim(2);
    for (int y = 0; y < 2; ++y) {
      const Tensor w = class_weights(h, y);
      double dot = class_bias(h, y);
      for (int c = 0; c < C; ++c) {
        double pooled = 0.0;
        for (int i = 0; i < hw; ++i) pooled += a[static_cast<std::size_t>(c) * hw + i];
        dot += w[static_cast<std::size_t>(c)] * pooled / hw;
      }
      CHECK(std::abs(dot - z[static_cast<std::size_t>(y)]) <= 1e-5);
    }
  }
  CHECK_THROWS_AS(class_weights(h, 2), ParameterError);
}

TEST_CASE("smoothed ReLU gradient follows the printed formula") {
  CHECK(smoothed_relu_grad(0.0, 1e-4) == 0.0);
  CHECK(smoothed_relu_grad(1.0, 1e-4) == doctest::Approx(1.0 / std::sqrt(1.0001)).epsilon(1e-15));
  CHECK(smoothed_relu_grad(1.0, 1e-4) == doctest::Approx(0.99995).epsilon(1e-6));
  CHECK(smoothed_relu_grad(-1.0, 1e-4) == doctest::Approx(1.0 - 1.0 / std::sqrt(1.0001)).epsilon(1e-9));
  CHECK(smoothed_relu_grad(-1.0, 1e-4) == doctest::Approx(5.0e-5).epsilon(1e-3));
  CHECK_THROWS_AS(smoothed_relu_grad(1.0, 0.0), ParameterError);
  // Literal form: the left limit at 0 is 1 while the value at 0 is 0.
  CHECK(smoothed_relu_grad(-1e-9, 1e-4) == doctest::Approx(1.0).epsilon(1e-4));
  CHECK(smoothed_relu_grad(0.0, 1e-4, true) == 1.0);
}

TEST_CASE("smoothed ReLU gradient is nondecreasing on each branch") {
  for (const bool swap : {false, true}) {
    double prev = smoothed_relu_grad(-5.0, 1e-4, swap);
    for (double z = -5.0; z < 0.0; z += 0.01) {
      const double v = smoothed_relu_grad(z, 1e-4, swap);
      CHECK(v >= prev);
      prev = v;
    }
    prev = smoothed_relu_grad(0.0, 1e-4, swap);
    for (double z = 0.0; z <= 5.0; z += 0.01) {
      const double v = smoothed_relu_grad(z, 1e-4, swap);
      CHECK(v >= prev);
      prev = v;
    }
  }
}

TEST_CASE("training configuration validation") {
  TrainConfig cfg;
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), ParameterError);
  cfg.epochs = 1;
  cfg.lr_final = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ParameterError);
  cfg.lr_final = 0.01;
  cfg.momentum = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ParameterError);
  cfg.momentum = 0.9;
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.learning_rate(0, 10) == doctest::Approx(cfg.lr_initial));
  CHECK(cfg.learning_rate(9, 10) == doctest::Approx(cfg.lr_final));
  const auto data = separable_two_category();
  TrainConfig zero;
  zero.epochs = 0;
  CHECK_THROWS_AS(train_classifier(data.train, architecture("cnn-small"), zero), ParameterError);
  CHECK_THROWS_AS(train_classifier(data.test, architecture("cnn-small"), TrainConfig{}), ParameterError);
}

TEST_CASE("divergent training reports the iteration") {
  const auto data = separable_two_category();
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.lr_initial = cfg.lr_final = 1e12;
  cfg.decay = LrDecay::kConstant;
  bool thrown = false;
  try {
    train_classifier(data.train, architecture("cnn-small"), cfg);
  } catch (const TrainingError& e) {
    thrown = true;
    CHECK(e.iteration() >= 0);
  }
  CHECK(thrown);
}

TEST_CASE("separable two-category shapes are learned and training is deterministic") {
  const auto data = separable_two_category();
  // Linear probe: nearest mean colour separates the categories perfectly.
  std::vector<Tensor> centroid(2, Tensor({3}, 0.0));
  std::vector<int> count(2, 0);
  for (const auto& s : data.train.samples) {
    const Tensor m = mean_color(s.image);
    for (int c = 0; c < 3; ++c) centroid[s.label][c] += m[c];
    ++count[s.label];
  }
  for (int k = 0; k < 2; ++k)
    for (int c = 0; c < 3; ++c) centroid[k][c] /= count[k];
  std::size_t probe_correct = 0;
  for (const auto& s : data.test.samples) {
    const Tensor m = mean_color(s.image);
    double d[2] = {0, 0};
    for (int k = 0; k < 2; ++k)
      for (int c = 0; c < 3; ++c) d[k] += (m[c] - centroid[k][c]) * (m[c] - centroid[k][c]);
    probe_correct += (d[1] < d[0] ? 1 : 0) == s.label;
  }
  CHECK(probe_correct == data.test.size());

  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 16;
  cfg.seed = 4;
  const Classifier a = train_classifier(data.train, architecture("cnn-small"), cfg, &data.test);
  REQUIRE(a.held_out_accuracy.has_value());
  CHECK(*a.held_out_accuracy >= 0.95);
  const Classifier b = train_classifier(data.train, architecture("cnn-small"), cfg, &data.test);
  CHECK(a.fingerprint() == b.fingerprint());
  CHECK(*a.held_out_accuracy == *b.held_out_accuracy);
}

TEST_CASE("checkpoint round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "singleadv_test_ckpt";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  Classifier h(architecture("cnn-deep"), {3, 8, 8}, 4, 9);
  h.held_out_accuracy = 0.5;
  h.training_seed = 12;
  save_checkpoint(dir / "m.bin", h, {{"hardened_by", "test"}});
  ModelManifest m;
  const Classifier g = load_checkpoint(dir / "m.bin", &m);
  CHECK(g.fingerprint() == h.fingerprint());
  CHECK(m.architecture == "cnn-deep");
  CHECK(m.num_categories == 4);
  CHECK(m.training_seed == 12);
  CHECK(m.accuracy == 0.5);
  CHECK(m.extra.at("hardened_by") == "test");
  CHECK(g.input_shape() == h.input_shape());
}
