#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "singleadv/defenses.hpp"
#include "singleadv/interpreters.hpp"
#include "test_helpers.hpp"

using namespace singleadv;
using namespace singleadv::testing;

namespace {

bool valid_image(const Image& y, const Shape& shape) {
  if (y.shape != shape) return false;
  for (double v : y.data)
    if (!(v >= 0.0 && v <= 1.0)) return false;
  return true;
}

LabeledDataset random_labeled(const Classifier& h, int n, std::uint64_t seed) {
  LabeledDataset d;
  d.num_categories = h.num_categories();
  d.shape = {2, 6, 6};
  RandomSource rng(seed);
  for (int i = 0; i < n; ++i) {
    const Image x = random_tensor(d.shape.dims(), rng);
    d.samples.push_back({x, static_cast<int>(rng.below(3))});
  }
  return d;
}

}  // namespace

TEST_CASE("bit depth reduction") {
  CHECK(bit_depth_reduce(Tensor({1, 1, 1}, 0.7), 1)[0] == 1.0);
  CHECK(bit_depth_reduce(Tensor({1, 1, 1}, 0.3), 1)[0] == 0.0);
  RandomSource rng(1);
  const Image x = random_tensor({3, 5, 4}, rng);
  const Image y8 = bit_depth_reduce(x, 8);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(y8[i] - x[i]) <= 1.0 / 510.0 + 1e-15);
  for (int bits = 1; bits <= 8; ++bits) {
    const Image y = bit_depth_reduce(x, bits);
    const double levels = static_cast<double>((1 << bits) - 1);
    for (std::size_t i = 0; i < x.size(); ++i) {
      double best = 0.0;
      for (int k = 0; k <= (1 << bits) - 1; ++k)
        if (std::abs(k / levels - x[i]) < std::abs(best - x[i])) best = k / levels;
      CHECK(y[i] == best);
    }
  }
  CHECK_THROWS_AS(bit_depth_reduce(x, 0), ParameterError);
  CHECK_THROWS_AS(bit_depth_reduce(x, 9), ParameterError);
}

TEST_CASE("median smoothing") {
  const Image flat({2, 5, 5}, 0.4);
  CHECK(median_smooth(flat, 3).data == flat.data);

  Image spike({1, 5, 5}, 0.2);
  spike.at(0, 2, 2) = 1.0;
  CHECK(median_smooth(spike, 3).data == Image({1, 5, 5}, 0.2).data);

  RandomSource rng(2);
  for (int kernel : {3, 5}) {
    const Image x = random_tensor({2, 8, 8}, rng);
    const Image y = median_smooth(x, kernel);
    const int r = kernel / 2;
    auto refl = [](int i, int n) {
      while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
      return i;
    };
    for (int c = 0; c < 2; ++c)
      for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) {
          std::vector<double> w;
          for (int di = -r; di <= r; ++di)
            for (int dj = -r; dj <= r; ++dj) w.push_back(x.at(c, refl(i + di, 8), refl(j + dj, 8)));
          std::sort(w.begin(), w.end());
          CHECK(y.at(c, i, j) == w[w.size() / 2]);
        }
  }
  CHECK_THROWS_AS(median_smooth(flat, 4), ParameterError);
  CHECK_THROWS_AS(median_smooth(flat, 1), ParameterError);
  CHECK_THROWS_AS(median_smooth(flat, 7), ParameterError);
}

TEST_CASE("random resize and pad") {
  RandomSource rng(3);
  const Image x = random_tensor({3, 9, 7}, rng);
  RandomSource a(4);
  const Image id = random_resize_pad(x, 1.0, 1.0, a);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(id[i] == doctest::Approx(x[i]).epsilon(1e-12));
  for (int t = 0; t < 20; ++t) {
    RandomSource r1(100 + t), r2(100 + t);
    const Image y1 = random_resize_pad(x, 0.5, 0.9, r1), y2 = random_resize_pad(x, 0.5, 0.9, r2);
    CHECK(valid_image(y1, x.shape));
    CHECK(y1.data == y2.data);
  }
  // A shrunk image leaves at least one full zero row or column of padding.
  RandomSource r3(7);
  const Image y = random_resize_pad(Image({1, 10, 10}, 1.0), 0.5, 0.5, r3);
  double total = 0.0;
  for (double v : y.data) total += v;
  CHECK(total == doctest::Approx(25.0).epsilon(1e-12));
  CHECK_THROWS_AS(random_resize_pad(x, 0.0, 0.5, r3), ParameterError);
  CHECK_THROWS_AS(random_resize_pad(x, 0.9, 0.5, r3), ParameterError);
  CHECK_THROWS_AS(random_resize_pad(x, 0.5, 1.5, r3), ParameterError);
}

TEST_CASE("transforms map valid images to valid images") {
  RandomSource rng(5);
  const std::vector<TransformSpec> specs{TransformSpec::bit_depth(3), TransformSpec::median(3),
                                         TransformSpec::resize_pad(0.6, 1.0)};
  for (int t = 0; t < 30; ++t) {
    const Image x = random_tensor({3, 8, 8}, rng);
    for (const auto& s : specs) CHECK(valid_image(apply_transform(x, s, rng), x.shape));
    for (const auto& c : pairwise_chains(static_cast<std::uint64_t>(t))) CHECK(valid_image(apply_chain(x, c), x.shape));
  }
}

TEST_CASE("chain parsing and composition") {
  const auto c = DefenseChain::parse("median:5+bit_depth:3", 9);
  REQUIRE(c.transforms.size() == 2);
  CHECK(c.transforms[0].kind == TransformSpec::Kind::kMedian);
  CHECK(c.transforms[0].kernel == 5);
  CHECK(c.transforms[1].bits == 3);
  CHECK(c.seed == 9);
  CHECK(c.str() == "median:5+bit_depth:3");
  CHECK(DefenseChain::parse(c.str()).str() == c.str());
  const auto rp = TransformSpec::parse("resize_pad:0.7:0.9");
  CHECK(rp.scale_min == 0.7);
  CHECK(rp.scale_max == 0.9);
  CHECK(TransformSpec::parse("bit_depth").bits == 4);
  CHECK(TransformSpec::parse("median").kernel == 3);
  CHECK_THROWS_AS(TransformSpec::parse("blur:3"), ParameterError);
  CHECK_THROWS_AS(TransformSpec::parse("bit_depth:x"), ParameterError);
  CHECK_THROWS_AS(TransformSpec::parse("median:4"), ParameterError);
  CHECK_THROWS_AS(TransformSpec::parse("resize_pad:0.5"), ParameterError);
  CHECK_THROWS_AS(DefenseChain{}.validate(), ParameterError);
  RandomSource rng(1);
  CHECK_THROWS_AS(apply_chain(Image({3, 4, 4}), DefenseChain{}, rng), ParameterError);

  const auto pairs = pairwise_chains();
  REQUIRE(pairs.size() == 3);
  CHECK(pairs[0].str() == "bit_depth:4+median:3");
  CHECK(pairs[1].str() == "bit_depth:4+resize_pad:0.8:1");
  CHECK(pairs[2].str() == "median:3+resize_pad:0.8:1");
}

TEST_CASE("singleton chains equal the transform and pair order matters") {
  RandomSource rng(6);
  const Image x = random_tensor({3, 8, 8}, rng);
  for (const auto& s : {TransformSpec::bit_depth(), TransformSpec::median(), TransformSpec::resize_pad()}) {
    const DefenseChain c{{s}, 11};
    RandomSource r(11);
    CHECK(apply_chain(x, c).data == apply_transform(x, s, r).data);
  }
  // Quantization is monotone, so it commutes with a median filter exactly.
  for (int t = 0; t < 10; ++t) {
    const Image z = random_tensor({3, 8, 8}, rng);
    CHECK(apply_chain(z, DefenseChain::parse("median:3+bit_depth:2")).data ==
          apply_chain(z, DefenseChain::parse("bit_depth:2+median:3")).data);
  }
  // Padding does not commute with the median: filtering after the paste
  // erodes the corners of the bright block.
  const Image flat({1, 8, 8}, 1.0);
  const auto mr = apply_chain(flat, DefenseChain::parse("median:3+resize_pad:0.75:0.75", 3));
  const auto rm = apply_chain(flat, DefenseChain::parse("resize_pad:0.75:0.75+median:3", 3));
  double sum_mr = 0.0, sum_rm = 0.0;
  for (std::size_t i = 0; i < mr.size(); ++i) {
    sum_mr += mr[i];
    sum_rm += rm[i];
  }
  CHECK(sum_mr == doctest::Approx(36.0).epsilon(1e-12));
  CHECK(sum_rm < sum_mr - 1.0);
}

TEST_CASE("defended metrics are reproducible and use the chain") {
  const Classifier h = toy_classifier(4);
  const auto d = random_labeled(h, 30, 8);
  const Tensor p(d.shape.dims(), 0.0);
  const auto chain = DefenseChain::parse("bit_depth:1+resize_pad:0.5:0.9", 5);
  const double a = defended_fooling_ratio(h, chain, p, d, 1);
  CHECK(a == defended_fooling_ratio(h, chain, p, d, 1));
  std::size_t hits = 0, correct = 0;
  const RandomSource root(chain.seed);
  for (std::size_t i = 0; i < d.size(); ++i) {
    RandomSource r = root.fork(i);
    const auto pr = predict(h, apply_chain(d.samples[i].image, chain, r));
    hits += pr.label == 1;
    correct += pr.label == d.samples[i].label;
  }
  CHECK(a == static_cast<double>(hits) / 30.0);
  CHECK(defended_accuracy(h, chain, d) == static_cast<double>(correct) / 30.0);
  CHECK_THROWS_AS(defended_fooling_ratio(h, chain, p, d.subset({}), 1), ParameterError);
}

TEST_CASE("adversarial training configuration") {
  const auto full = AdvTrainConfig::full();
  CHECK(full.epsilon == 0.031);
  CHECK(full.batch_size == 128);
  CHECK(full.lr_initial == 0.1);
  CHECK(full.lr_final == 0.001);
  CHECK(full.threshold == 0.3);
  CHECK(full.projection_radius() == full.epsilon);
  CHECK_NOTHROW(AdvTrainConfig::reduced().validate());
  AdvTrainConfig bad;
  bad.epsilon = -0.1;
  CHECK_THROWS_AS(bad.validate(), ParameterError);
  bad = AdvTrainConfig{};
  bad.momentum = 1.0;
  CHECK_THROWS_AS(bad.validate(), ParameterError);
  bad = AdvTrainConfig{};
  bad.threshold = 1.0;
  CHECK_THROWS_AS(bad.validate(), ParameterError);
}

TEST_CASE("adversarial training with zero epsilon or empty masks is clean training") {
  const Classifier h = toy_classifier(9);
  const auto d = random_labeled(h, 24, 2);
  std::vector<Tensor> maps;
  for (const auto& s : d.samples) maps.push_back(interpret(InterpreterKind::kCam, h, s.image, s.label).values);
  AdvTrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.lr_initial = 0.05;
  cfg.seed = 13;

  Classifier clean = h;
  continue_training(clean, d, cfg.as_train_config());

  AdvTrainConfig zero = cfg;
  zero.epsilon = 0.0;
  const auto r0 = adversarial_train(h, d, maps, zero);
  CHECK(r0.delta.max_abs() == 0.0);
  const auto pa = r0.model.parameter_values(), pb = clean.parameter_values();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].data == pb[i].data);

  const std::vector<Tensor> blank(d.size(), Tensor({6, 6}, 0.0));
  const auto rb = adversarial_train(h, d, blank, cfg);
  const auto pc = rb.model.parameter_values();
  for (std::size_t i = 0; i < pc.size(); ++i) CHECK(pc[i].data == pb[i].data);
}

TEST_CASE("adversarial training keeps delta inside the ball") {
  const Classifier h = toy_classifier(10);
  const auto d = random_labeled(h, 24, 3);
  std::vector<Tensor> maps;
  for (const auto& s : d.samples) maps.push_back(interpret(InterpreterKind::kCam, h, s.image, s.label).values);
  RandomSource rng(4);
  for (double eps : {0.01, 0.05}) {
    AdvTrainConfig cfg;
    cfg.epsilon = eps;
    cfg.epochs = 2;
    cfg.batch_size = 6;
    cfg.lr_initial = 0.02;
    const Tensor init = random_tensor(d.shape.dims(), rng, -0.5, 0.5);
    const auto r = adversarial_train(h, d, maps, cfg, &init);
    CHECK(r.max_delta_norm <= eps);
    CHECK(r.delta.max_abs() <= eps);
    CHECK(r.delta.max_abs() > 0.0);
    const auto again = adversarial_train(h, d, maps, cfg, &init);
    CHECK(again.delta.data == r.delta.data);
  }
  AdvTrainConfig cfg;
  cfg.epochs = 1;
  CHECK_THROWS_AS(adversarial_train(h, d, std::vector<Tensor>(3, Tensor({6, 6})), cfg), ParameterError);
  CHECK_THROWS_AS(adversarial_train(h, d, std::vector<Tensor>(d.size(), Tensor({5, 6})), cfg), ShapeError);
}
