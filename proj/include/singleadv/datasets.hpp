#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "singleadv/core.hpp"

namespace singleadv {

/// Seeded generator of colored geometric shapes on textured backgrounds.
/// Category k is the k-th entry of synthetic_category_names().
struct SyntheticShapesConfig {
  int num_categories = 10;
  ImageShape shape{3, 16, 16};
  int train_per_category = 150;
  int test_per_category = 50;
  /// Shape radius as a fraction of the image side.
  double min_radius = 0.22;
  double max_radius = 0.34;
  /// Peak amplitude of the background stripe texture and per-pixel noise.
  double texture_amplitude = 0.08;
  double noise_stddev = 0.03;
  /// Fraction of the free placement range the shape centre may wander; 0 centres every shape.
  double position_jitter = 1.0;
  /// Minimum |mean(foreground) - mean(background)|.
  double min_contrast = 0.3;
  /// Sign of mean(foreground) - mean(background): +1 brighter, -1 darker, 0 either.
  int polarity = 0;
  /// Fixed per-category foreground colour (makes categories separable by colour alone).
  bool color_coded = false;
  std::uint64_t seed = 7;
};

struct DatasetSplits {
  LabeledDataset train;
  LabeledDataset test;
};

const std::vector<std::string>& synthetic_category_names();
DatasetSplits generate_synthetic_shapes(const SyntheticShapesConfig& cfg);

/// Loads `labels.csv` (rows: file,label,split) plus the Netpbm images it names.
DatasetSplits load_dataset_directory(const std::filesystem::path& dir, int num_categories);
/// Optional `categories.txt` (one name per line, in label order); empty when absent.
std::vector<std::string> load_category_names(const std::filesystem::path& dir);

}  // namespace singleadv
