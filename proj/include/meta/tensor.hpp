#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "meta/error.hpp"

namespace meta {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

/// Dense row-major array of doubles. `grad` is empty until a backward pass
/// populates it; when present it has the same length as `data`.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;

  Tensor() = default;

  explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(numel(shape), fill) {
    for (std::size_t d : shape) require(d > 0, ErrorKind::shape, "tensor dims must be positive, got " + shape_str(shape));
  }

  Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    for (std::size_t d : shape) require(d > 0, ErrorKind::shape, "tensor dims must be positive, got " + shape_str(shape));
    require(numel(shape) == data.size(), ErrorKind::shape,
            "shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) + " values");
  }

  std::size_t size() const noexcept { return data.size(); }
  std::size_t rank() const noexcept { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  bool has_grad() const noexcept { return !grad.empty(); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  std::span<double> span() noexcept { return data; }
  std::span<const double> span() const noexcept { return data; }

  void zero_grad() { grad.assign(data.size(), 0.0); }
};

/// A trainable tensor with a unique dotted path name inside its model.
struct Parameter {
  std::string name;
  Tensor value;

  Parameter() = default;
  Parameter(std::string n, Tensor t) : name(std::move(n)), value(std::move(t)) {
    value.requires_grad = true;
    value.zero_grad();
  }

  std::size_t size() const noexcept { return value.size(); }
  void zero_grad() { value.zero_grad(); }
};

inline bool all_finite(std::span<const double> xs) {
  for (double x : xs)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace meta
