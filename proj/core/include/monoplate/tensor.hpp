#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace monoplate {

/// Dense row-major tensor of doubles. Rank 0 (shape {}) holds a single
/// scalar. Image-like tensors use height x width x channels order.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);
  Tensor(std::vector<int> shape, std::vector<double> data);

  static Tensor scalar(double v);
  static Tensor full(std::vector<int> shape, double v);
  static Tensor uniform(std::vector<int> shape, std::mt19937_64& rng,
                        double lo = -1.0, double hi = 1.0);
  static Tensor normal(std::vector<int> shape, std::mt19937_64& rng,
                       double mean = 0.0, double stddev = 1.0);

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty() && shape_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& raw() { return data_; }
  const std::vector<double>& raw() const { return data_; }

  double& operator[](std::int64_t i) { return data_[i]; }
  double operator[](std::int64_t i) const { return data_[i]; }

  /// Element access for rank 2/3 tensors.
  double& at(int i, int j) { return data_[static_cast<std::int64_t>(i) * shape_[1] + j]; }
  double at(int i, int j) const { return data_[static_cast<std::int64_t>(i) * shape_[1] + j]; }
  double& at(int i, int j, int k) {
    return data_[(static_cast<std::int64_t>(i) * shape_[1] + j) * shape_[2] + k];
  }
  double at(int i, int j, int k) const {
    return data_[(static_cast<std::int64_t>(i) * shape_[1] + j) * shape_[2] + k];
  }

  double scalar_value() const;

  Tensor reshaped(std::vector<int> shape) const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

  std::string shape_str() const;
  static std::string shape_str(const std::vector<int>& shape);
  static std::int64_t shape_size(const std::vector<int>& shape);

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

}  // namespace monoplate
