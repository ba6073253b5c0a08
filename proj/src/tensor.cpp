#include "metavrf/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace metavrf {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_to_string(shape));
    n *= d;
  }
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  if (static_cast<int64_t>(data.size()) != shape_numel(shape)) {
    throw std::invalid_argument("tensor data size " + std::to_string(data.size()) +
                                " does not match shape " + shape_to_string(shape));
  }
}

Tensor Tensor::scalar(double v) {
  Tensor t;
  t.data.assign(1, v);
  return t;
}

Tensor Tensor::row(std::vector<double> values) {
  const int64_t n = static_cast<int64_t>(values.size());
  return Tensor({1, n}, std::move(values));
}

Tensor Tensor::matrix(int64_t rows, int64_t cols, std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

int64_t Tensor::rows() const {
  if (shape.size() != 2) throw std::logic_error("rows() requires a rank-2 tensor, got " + shape_to_string(shape));
  return shape[0];
}

int64_t Tensor::cols() const {
  if (shape.size() != 2) throw std::logic_error("cols() requires a rank-2 tensor, got " + shape_to_string(shape));
  return shape[1];
}

double& Tensor::at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * cols() + c)]; }

double Tensor::at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols() + c)]; }

double Tensor::item() const {
  if (data.size() != 1) {
    throw std::logic_error("item() requires a one-element tensor, got shape " + shape_to_string(shape));
  }
  return data[0];
}

void Tensor::resize(const Shape& s) {
  shape = s;
  data.resize(static_cast<size_t>(shape_numel(shape)));
}

bool Tensor::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data) m = std::max(m, std::abs(v));
  return m;
}

double Tensor::max_abs_diff(const Tensor& other) const {
  if (!same_shape(other)) {
    throw std::invalid_argument("max_abs_diff shape mismatch: " + shape_to_string(shape) + " vs " +
                                shape_to_string(other.shape));
  }
  double m = 0.0;
  for (size_t i = 0; i < data.size(); ++i) m = std::max(m, std::abs(data[i] - other.data[i]));
  return m;
}

}  // namespace metavrf
