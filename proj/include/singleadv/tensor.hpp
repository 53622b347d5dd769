#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace singleadv {

/// Raised when array shapes disagree with the operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for out-of-range or inconsistent parameters.
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);

/// Dense row-major array of doubles. Rank 0 holds a single scalar.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  std::size_t size() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  // (c, y, x) accessors for rank-3 image-shaped tensors.
  double& at(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
  }
  double at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
  }

  double item() const;
  double max_abs() const;
  double l2_norm() const;
  double sum() const { return std::accumulate(data.begin(), data.end(), 0.0); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

std::size_t shape_size(const Shape& s);
void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

}  // namespace singleadv
