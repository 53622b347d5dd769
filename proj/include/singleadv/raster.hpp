#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "singleadv/tensor.hpp"

namespace singleadv {

// Binary Netpbm rasters: PPM (P6) for (3, H, W) images, PGM (P5) for (H, W)
// maps. Values in [0, 1] are rounded to 8 bits.
// `comments` become "# ..." header lines.
void write_ppm(const std::filesystem::path& path, const Tensor& rgb, const std::vector<std::string>& comments = {});
void write_pgm(const std::filesystem::path& path, const Tensor& gray, const std::vector<std::string>& comments = {});
/// Reads P5 or P6; returns (1|3, H, W) in [0, 1].
Tensor read_netpbm(const std::filesystem::path& path);

}  // namespace singleadv
