#include "singleadv/datasets.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "singleadv/raster.hpp"

namespace singleadv {
namespace {

constexpr int kSupersample = 4;

// Membership test in shape-local coordinates scaled so the radius is 1.
bool inside_shape(int category, double dx, double dy) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  switch (category) {
    case 0:  // disc
      return dx * dx + dy * dy <= 1.0;
    case 1:  // square
      return std::max(ax, ay) <= 0.85;
    case 2: {  // triangle, apex up
      if (dy < -1.0 || dy > 0.8) return false;
      const double t = (dy + 1.0) / 1.8;
      return ax <= 0.95 * t;
    }
    case 3:  // plus
      return (ax <= 0.3 && ay <= 1.0) || (ay <= 0.3 && ax <= 1.0);
    case 4: {  // ring
      const double d2 = dx * dx + dy * dy;
      return d2 <= 1.0 && d2 >= 0.55 * 0.55;
    }
    case 5:  // horizontal bar
      return ay <= 0.35 && ax <= 1.0;
    case 6:  // vertical bar
      return ax <= 0.35 && ay <= 1.0;
    case 7:  // diamond
      return ax + ay <= 1.0;
    case 8:  // X
      return std::max(ax, ay) <= 0.95 && (std::abs(dx - dy) <= 0.42 || std::abs(dx + dy) <= 0.42);
    case 9:  // L corner
      return (dx >= -1.0 && dx <= -0.35 && ay <= 1.0) || (dy >= 0.35 && dy <= 1.0 && ax <= 1.0);
    default:
      return false;
  }
}

constexpr std::array<std::array<double, 3>, 10> kPalette{{
    {0.95, 0.15, 0.15}, {0.15, 0.85, 0.2}, {0.2, 0.3, 0.95}, {0.95, 0.9, 0.1}, {0.9, 0.2, 0.9},
    {0.1, 0.9, 0.9}, {0.98, 0.55, 0.05}, {0.55, 0.1, 0.75}, {0.05, 0.05, 0.05}, {0.98, 0.98, 0.98},
}};

Image render(int category, const SyntheticShapesConfig& cfg, RandomSource& rng) {
  const int C = cfg.shape.channels, H = cfg.shape.height, W = cfg.shape.width;
  const double side = std::min(H, W);
  Image img(cfg.shape.dims(), 0.0);

  // Background: grey level with oriented stripes and pixel noise.
  const double base = cfg.polarity > 0 ? rng.uniform(0.15, 0.45)
                      : cfg.polarity < 0 ? rng.uniform(0.55, 0.85)
                                         : rng.uniform(0.25, 0.75);
  std::vector<double> tint(static_cast<std::size_t>(C));
  for (auto& t : tint) t = rng.uniform(-0.08, 0.08);
  const double angle = rng.uniform(0.0, std::numbers::pi);
  const double freq = rng.uniform(0.4, 1.2);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double amp = cfg.texture_amplitude * rng.uniform(0.5, 1.0);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double s = amp * std::sin(freq * (std::cos(angle) * x + std::sin(angle) * y) + phase);
      for (int c = 0; c < C; ++c) img.at(c, y, x) = base + tint[static_cast<std::size_t>(c)] + s;
    }

  // Foreground colour.
  std::vector<double> color(static_cast<std::size_t>(C));
  if (cfg.color_coded) {
    for (int c = 0; c < C; ++c) color[static_cast<std::size_t>(c)] = kPalette[static_cast<std::size_t>(category % 10)][static_cast<std::size_t>(c % 3)];
  } else {
    for (int attempt = 0; attempt < 64; ++attempt) {
      double m = 0.0;
      for (auto& v : color) m += (v = rng.uniform());
      const double d = m / C - base;
      if (std::abs(d) >= cfg.min_contrast && d * cfg.polarity >= 0.0) break;
    }
  }

  const double radius = side * rng.uniform(cfg.min_radius, cfg.max_radius);
  const double margin = radius + 0.5;
  const double jx = cfg.position_jitter * (W / 2.0 - margin), jy = cfg.position_jitter * (H / 2.0 - margin);
  const double cx = W / 2.0 + rng.uniform(-jx, jx);
  const double cy = H / 2.0 + rng.uniform(-jy, jy);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSupersample; ++sy)
        for (int sx = 0; sx < kSupersample; ++sx) {
          const double px = x + (sx + 0.5) / kSupersample;
          const double py = y + (sy + 0.5) / kSupersample;
          hits += inside_shape(category, (px - cx) / radius, (py - cy) / radius) ? 1 : 0;
        }
      const double cover = static_cast<double>(hits) / (kSupersample * kSupersample);
      if (cover == 0.0) continue;
      for (int c = 0; c < C; ++c)
        img.at(c, y, x) = (1.0 - cover) * img.at(c, y, x) + cover * color[static_cast<std::size_t>(c)];
    }

  for (double& v : img.data) v = std::clamp(v + cfg.noise_stddev * rng.normal(), 0.0, 1.0);
  return img;
}

LabeledDataset make_split(const SyntheticShapesConfig& cfg, Split split, int per_category, RandomSource rng) {
  LabeledDataset ds{{}, split, cfg.num_categories, cfg.shape};
  ds.samples.reserve(static_cast<std::size_t>(per_category) * cfg.num_categories);
  // Interleave categories so any prefix is class balanced.
  for (int i = 0; i < per_category; ++i)
    for (int k = 0; k < cfg.num_categories; ++k) ds.samples.push_back({render(k, cfg, rng), k});
  return ds;
}

}  // namespace

const std::vector<std::string>& synthetic_category_names() {
  static const std::vector<std::string> names{"disc", "square", "triangle", "plus", "ring",
                                              "hbar", "vbar",   "diamond",  "cross", "corner"};
  return names;
}

DatasetSplits generate_synthetic_shapes(const SyntheticShapesConfig& cfg) {
  if (cfg.num_categories < 2 || cfg.num_categories > 10) throw ParameterError("synthetic shapes support 2..10 categories");
  if (cfg.train_per_category < 1 || cfg.test_per_category < 1) throw ParameterError("per-category counts must be positive");
  if (cfg.shape.channels < 1 || cfg.shape.height < 8 || cfg.shape.width < 8) throw ParameterError("image shape too small");
  if (!(cfg.min_radius > 0.0) || cfg.max_radius < cfg.min_radius || cfg.max_radius >= 0.5) {
    throw ParameterError("radius range must satisfy 0 < min <= max < 0.5");
  }
  if (!(cfg.position_jitter >= 0.0 && cfg.position_jitter <= 1.0)) throw ParameterError("position jitter must lie in [0, 1]");
  const RandomSource root(cfg.seed);
  return {make_split(cfg, Split::kTrain, cfg.train_per_category, root.fork(1)),
          make_split(cfg, Split::kTest, cfg.test_per_category, root.fork(2))};
}

DatasetSplits load_dataset_directory(const std::filesystem::path& dir, int num_categories) {
  std::ifstream is(dir / "labels.csv");
  if (!is) throw std::runtime_error("dataset directory " + dir.string() + " has no labels.csv");
  DatasetSplits out;
  out.train.split = Split::kTrain;
  out.test.split = Split::kTest;
  out.train.num_categories = out.test.num_categories = num_categories;
  bool have_shape = false;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::stringstream ss(line);
    std::string file, label, split;
    std::getline(ss, file, ',');
    std::getline(ss, label, ',');
    std::getline(ss, split, ',');
    if (file == "file") continue;
    Sample s{read_netpbm(dir / file), 0};
    try {
      s.label = std::stoi(label);
    } catch (const std::exception&) {
      throw ParameterError("labels.csv line " + std::to_string(line_no) + ": bad label '" + label + "'");
    }
    const ImageShape shape{s.image.dim(0), s.image.dim(1), s.image.dim(2)};
    if (!have_shape) {
      out.train.shape = out.test.shape = shape;
      have_shape = true;
    }
    if (split == "train") {
      out.train.samples.push_back(std::move(s));
    } else if (split == "test") {
      out.test.samples.push_back(std::move(s));
    } else {
      throw ParameterError("labels.csv line " + std::to_string(line_no) + ": split must be train or test");
    }
  }
  out.train.validate();
  out.test.validate();
  return out;
}

std::vector<std::string> load_category_names(const std::filesystem::path& dir) {
  std::vector<std::string> names;
  std::ifstream is(dir / "categories.txt");
  if (!is) return names;
  std::string line;
  while (std::getline(is, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) names.push_back(line);
  }
  return names;
}

}  // namespace singleadv
