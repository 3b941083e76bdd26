#include "rope_probe/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>

#include "rope_probe/errors.hpp"

namespace rope_probe {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_product(shape_), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_product(shape_) != data_.size()) {
    throw ShapeError(fmt::format("tensor shape holds {} elements but data has {}",
                                 shape_product(shape_), data_.size()));
  }
  check_finite("tensor data");
}

Tensor Tensor::vector(std::vector<double> data) {
  const std::size_t n = data.size();
  return Tensor({n}, std::move(data));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
  return Tensor({rows, cols}, std::move(data));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return matrix(r, c, std::move(data));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

std::size_t Tensor::rows() const {
  if (shape_.empty()) return 0;
  if (shape_.size() == 1) return 1;
  if (shape_.size() == 2) return shape_[0];
  throw ShapeError(fmt::format("rows() on rank-{} tensor", shape_.size()));
}

std::size_t Tensor::cols() const {
  if (shape_.empty()) return 0;
  if (shape_.size() == 1) return shape_[0];
  if (shape_.size() == 2) return shape_[1];
  throw ShapeError(fmt::format("cols() on rank-{} tensor", shape_.size()));
}

std::span<double> Tensor::row(std::size_t r) {
  const std::size_t c = cols();
  return std::span<double>(data_).subspan(r * c, c);
}

std::span<const double> Tensor::row(std::size_t r) const {
  const std::size_t c = cols();
  return std::span<const double>(data_).subspan(r * c, c);
}

void Tensor::check_finite(std::string_view what) const {
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (!std::isfinite(data_[i])) {
      throw NumericError(fmt::format("{}: non-finite value {} at flat index {}", what, data_[i], i));
    }
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows();
  const std::size_t k = a.cols();
  if (b.rows() != k) {
    throw ShapeError(fmt::format("matmul: inner extents {} and {} differ", k, b.rows()));
  }
  const std::size_t n = b.cols();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a(i, p) * b(p, j);
      out(i, j) = acc;
    }
  }
  return out;
}

Tensor matmul_transposed(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows();
  const std::size_t k = a.cols();
  if (b.cols() != k) {
    throw ShapeError(fmt::format("matmul_transposed: inner extents {} and {} differ", k, b.cols()));
  }
  const std::size_t n = b.rows();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out(i, j) = dot(a.row(i), b.row(j));
  }
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ShapeError(fmt::format("dot: lengths {} and {} differ", a.size(), b.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double log_sum_exp(std::span<const double> x) {
  if (x.empty()) throw ShapeError("log_sum_exp of empty input");
  const double mx = *std::max_element(x.begin(), x.end());
  double acc = 0.0;
  for (double v : x) acc += std::exp(v - mx);
  return mx + std::log(acc);
}

std::vector<double> softmax(std::span<const double> x) {
  if (x.empty()) throw ShapeError("softmax of empty input");
  const double mx = *std::max_element(x.begin(), x.end());
  if (!std::isfinite(mx)) throw NumericError("softmax: non-finite input");
  std::vector<double> out(x.size());
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - mx);
    total += out[i];
  }
  for (double& v : out) v /= total;
  return out;
}

Tensor softmax(const Tensor& x) {
  if (x.rank() == 1) return Tensor(x.shape(), softmax(x.data()));
  Tensor out = Tensor::zeros_like(x);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = softmax(x.row(r));
    std::copy(row.begin(), row.end(), out.row(r).begin());
  }
  return out;
}

}  // namespace rope_probe
