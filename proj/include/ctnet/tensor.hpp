#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ctnet/error.hpp"

namespace ctnet {

class Tensor;

// Named parameter set; ordered so every iteration is deterministic.
using ParamMap = std::map<std::string, Tensor>;

// Dense row-major tensor of 64-bit floats. Plain value type: shape plus a
// contiguous buffer. Gradient tracking lives in the compute graph, not here.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<std::size_t>(count(shape_)), 0.0);
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    for (double& x : t.data_) x = v;
    return t;
  }

  static Tensor from_data(std::vector<int> shape, std::vector<double> data) {
    if (count(shape) != static_cast<std::int64_t>(data.size()))
      throw ShapeError("Tensor::from_data: shape does not match data length");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    return t;
  }

  static Tensor scalar(double v) { return from_data({1}, {v}); }

  bool empty() const { return data_.empty(); }
  int rank() const { return static_cast<int>(shape_.size()); }
  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // Multi-index access, mostly for tests and small fixtures.
  double& at(std::initializer_list<int> idx) { return data_[offset(idx)]; }
  double at(std::initializer_list<int> idx) const { return data_[offset(idx)]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void fill(double v) {
    for (double& x : data_) x = v;
  }

  static std::int64_t count(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
      if (d <= 0) throw ShapeError("Tensor: dimension sizes must be positive");
      n *= d;
    }
    return n;
  }

  static std::string shape_string(const std::vector<int>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }

 private:
  std::size_t offset(std::initializer_list<int> idx) const {
    std::size_t off = 0;
    std::size_t k = 0;
    for (int i : idx) {
      off = off * static_cast<std::size_t>(shape_[k]) + static_cast<std::size_t>(i);
      ++k;
    }
    return off;
  }

  std::vector<int> shape_;
  std::vector<double> data_;
};

}  // namespace ctnet
