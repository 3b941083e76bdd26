#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string_view>
#include <vector>

namespace rope_probe {

// Dense row-major tensor of doubles. Rank 1 (vector) and rank 2 (matrix)
// are what the toolkit uses; higher ranks are storable but no op consumes
// them.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor vector(std::vector<double> data);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }
  static Tensor identity(std::size_t n);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Rank-2 extents. A rank-1 tensor of length n reads as 1 x n.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> row(std::size_t r);
  std::span<const double> row(std::size_t r) const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  // Throws NumericError naming `what` if any element is NaN or infinite.
  void check_finite(std::string_view what) const;

  bool operator==(const Tensor& other) const = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::size_t shape_product(const std::vector<std::size_t>& shape);

// Standard matrix product with left-to-right accumulation over the inner
// extent. Rank-1 operands are treated as row vectors.
Tensor matmul(const Tensor& a, const Tensor& b);

// a * b^T without materializing the transpose.
Tensor matmul_transposed(const Tensor& a, const Tensor& b);

// Max-subtracted softmax over all elements of a vector.
std::vector<double> softmax(std::span<const double> x);
Tensor softmax(const Tensor& x);

double dot(std::span<const double> a, std::span<const double> b);
double log_sum_exp(std::span<const double> x);

}  // namespace rope_probe
