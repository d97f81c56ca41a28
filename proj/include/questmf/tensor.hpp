#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace questmf {

// Dense row-major tensor of doubles with value semantics. Rank 1 to 3 is
// what the pipeline uses; rank-2 helpers assert the rank they need.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<double> values);

  static Tensor scalar(double v);
  static Tensor full(std::vector<std::size_t> shape, double v);
  static Tensor row(std::vector<double> values);  // 1 x n

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }
  std::size_t rows() const;  // rank 2 only
  std::size_t cols() const;  // rank 2 only

  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }

  double& at(std::size_t i) { return values_[i]; }
  double at(std::size_t i) const { return values_[i]; }
  double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }
  double& at3(std::size_t i, std::size_t j, std::size_t k);
  double at3(std::size_t i, std::size_t j, std::size_t k) const;

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const;
  void fill(double v);

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> values_;
};

std::size_t shape_size(const std::vector<std::size_t>& shape);
std::string shape_str(const std::vector<std::size_t>& shape);

// Exact element equality (no tolerance); shapes must match too.
bool bitwise_equal(const Tensor& a, const Tensor& b);

}  // namespace questmf
