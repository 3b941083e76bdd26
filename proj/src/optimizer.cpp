#include "rope_probe/optimizer.hpp"

#include <cmath>
#include <fmt/format.h>

#include "rope_probe/errors.hpp"

namespace rope_probe {

void OptimizerConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (!(beta1 > 0.0 && beta1 < 1.0)) throw std::invalid_argument("beta1 must lie in (0, 1)");
  if (!(beta2 > 0.0 && beta2 < 1.0)) throw std::invalid_argument("beta2 must lie in (0, 1)");
  if (!(epsilon > 0.0)) throw std::invalid_argument("epsilon must be positive");
}

Optimizer::Optimizer(OptimizerConfig config, std::span<const Tensor> params) : config_(config) {
  config_.validate();
  if (config_.kind == OptimizerKind::kAdam) {
    for (const auto& p : params) {
      m_.push_back(Tensor::zeros_like(p));
      v_.push_back(Tensor::zeros_like(p));
    }
  }
}

void Optimizer::check_aligned(std::span<Tensor> params, std::span<const Tensor> grads) const {
  if (params.size() != grads.size()) {
    throw ShapeError(fmt::format("{} parameters but {} gradients", params.size(), grads.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].same_shape(grads[i])) {
      throw ShapeError(fmt::format("gradient {} does not match its parameter's shape", i));
    }
    if (config_.kind == OptimizerKind::kAdam && !m_[i].same_shape(params[i])) {
      throw ShapeError(fmt::format("parameter {} changed shape since construction", i));
    }
    grads[i].check_finite(fmt::format("gradient {}", i));
  }
}

void Optimizer::update_range(Tensor& param, const Tensor& grad, std::size_t index,
                             std::size_t begin, std::size_t end, double bias1, double bias2) {
  const double lr = config_.learning_rate;
  if (config_.kind == OptimizerKind::kSgd) {
    for (std::size_t j = begin; j < end; ++j) param[j] -= lr * grad[j];
    return;
  }
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  Tensor& m = m_[index];
  Tensor& v = v_[index];
  for (std::size_t j = begin; j < end; ++j) {
    const double g = grad[j];
    m[j] = b1 * m[j] + (1.0 - b1) * g;
    v[j] = b2 * v[j] + (1.0 - b2) * g * g;
    const double m_hat = m[j] / bias1;
    const double v_hat = v[j] / bias2;
    param[j] -= lr * m_hat / (std::sqrt(v_hat) + config_.epsilon);
  }
}

void Optimizer::step(std::span<Tensor> params, std::span<const Tensor> grads) {
  check_aligned(params, grads);
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double bias1 = 1.0 - std::pow(config_.beta1, t);
  const double bias2 = 1.0 - std::pow(config_.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    update_range(params[i], grads[i], i, 0, params[i].size(), bias1, bias2);
  }
}

void Optimizer::step_rows(std::span<Tensor> params, std::span<const Tensor> grads,
                          std::span<const std::vector<bool>> row_touched) {
  check_aligned(params, grads);
  if (row_touched.size() != params.size()) throw ShapeError("row mask count differs from parameter count");
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double bias1 = 1.0 - std::pow(config_.beta1, t);
  const double bias2 = 1.0 - std::pow(config_.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::size_t rows = params[i].rows();
    const std::size_t cols = params[i].cols();
    if (row_touched[i].size() != rows) throw ShapeError("row mask length differs from row count");
    for (std::size_t r = 0; r < rows; ++r) {
      if (row_touched[i][r]) update_range(params[i], grads[i], i, r * cols, (r + 1) * cols, bias1, bias2);
    }
  }
}

}  // namespace rope_probe
