#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "va3/error.hpp"

namespace va3 {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major array of doubles.
///
/// A default-constructed tensor has shape {0}; a scalar has shape {} and
/// one element.
class Tensor {
 public:
  Tensor() : shape_{0} {}
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value) { return Tensor(Shape{}, {value}); }
  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor(Shape{n}, std::move(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() & { return data_; }
  std::span<const double> data() const& { return data_; }
  // A span into a temporary would dangle.
  std::span<const double> data() && = delete;
  std::vector<double>& storage() & { return data_; }
  const std::vector<double>& storage() const& { return data_; }
  std::vector<double> storage() && { return std::move(data_); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  double item() const;

  Tensor reshaped(Shape shape) const;
  void fill(double value);

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

}  // namespace va3
