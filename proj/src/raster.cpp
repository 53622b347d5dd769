#include "singleadv/raster.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace singleadv {
namespace {

unsigned char to_byte(double v) { return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

void write_bytes(const std::filesystem::path& path, const std::string& header, const std::vector<unsigned char>& px) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << header;
  os.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

int read_header_int(std::istream& is) {
  int c = is.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != '\n' && c != EOF) c = is.get();
    } else if (!std::isspace(c)) {
      break;
    }
    c = is.get();
  }
  int v = 0;
  bool any = false;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    any = true;
    c = is.get();
  }
  if (!any) throw std::runtime_error("malformed netpbm header");
  return v;
}

}  // namespace

static std::string comment_lines(const std::vector<std::string>& comments) {
  std::string out;
  for (const auto& c : comments) {
    if (c.find('\n') != std::string::npos) throw std::invalid_argument("raster comment contains a newline");
    out += "# " + c + "\n";
  }
  return out;
}

void write_ppm(const std::filesystem::path& path, const Tensor& rgb, const std::vector<std::string>& comments) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3) throw ShapeError("write_ppm expects (3, H, W), got " + shape_str(rgb.shape));
  const int H = rgb.dim(1), W = rgb.dim(2);
  std::vector<unsigned char> px;
  px.reserve(rgb.size());
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) px.push_back(to_byte(rgb.at(c, y, x)));
  write_bytes(path, "P6\n" + comment_lines(comments) + std::to_string(W) + " " + std::to_string(H) + "\n255\n", px);
}

void write_pgm(const std::filesystem::path& path, const Tensor& gray, const std::vector<std::string>& comments) {
  if (gray.rank() != 2) throw ShapeError("write_pgm expects (H, W), got " + shape_str(gray.shape));
  std::vector<unsigned char> px;
  px.reserve(gray.size());
  for (double v : gray.data) px.push_back(to_byte(v));
  write_bytes(path, "P5\n" + comment_lines(comments) + std::to_string(gray.dim(1)) + " " + std::to_string(gray.dim(0)) + "\n255\n", px);
}

Tensor read_netpbm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  char p = 0, kind = 0;
  is.get(p);
  is.get(kind);
  if (p != 'P' || (kind != '5' && kind != '6')) throw std::runtime_error(path.string() + ": not a binary PGM/PPM");
  const int W = read_header_int(is);
  const int H = read_header_int(is);
  const int maxval = read_header_int(is);
  if (maxval <= 0 || maxval > 255) throw std::runtime_error(path.string() + ": only 8-bit rasters are supported");
  const int C = kind == '6' ? 3 : 1;
  std::vector<unsigned char> px(static_cast<std::size_t>(W) * H * C);
  is.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!is) throw std::runtime_error(path.string() + ": truncated raster");
  Tensor out({C, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < C; ++c)
        out.at(c, y, x) = px[(static_cast<std::size_t>(y) * W + x) * C + c] / static_cast<double>(maxval);
  return out;
}

}  // namespace singleadv
