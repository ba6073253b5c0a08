#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

namespace metavrf {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major tensor of doubles. Rank 0 (empty shape) is a scalar.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(shape_numel(shape), 0.0) {}
  Tensor(Shape s, double fill) : shape(std::move(s)), data(shape_numel(shape), fill) {}
  Tensor(Shape s, std::vector<double> values);

  static Tensor scalar(double v);
  static Tensor row(std::vector<double> values);              // shape {1, n}
  static Tensor matrix(int64_t rows, int64_t cols, std::vector<double> values);

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int64_t rank() const { return static_cast<int64_t>(shape.size()); }
  int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

  // Rank-2 accessors.
  int64_t rows() const;
  int64_t cols() const;
  double& at(int64_t r, int64_t c);
  double at(int64_t r, int64_t c) const;

  double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  /// Scalar value of a one-element tensor.
  double item() const;

  /// Reshape in place to a compatible shape, reusing storage capacity.
  void resize(const Shape& s);

  bool same_shape(const Tensor& other) const { return shape == other.shape; }
  bool all_finite() const;

  double max_abs() const;
  double max_abs_diff(const Tensor& other) const;
};

}  // namespace metavrf
