#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "rope_probe/tensor.hpp"

namespace rope_probe {

enum class OptimizerKind : std::uint8_t { kSgd, kAdam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const;
};

// First-order optimizer over a fixed list of parameter tensors. Adam keeps
// per-parameter first and second moments.
class Optimizer {
 public:
  Optimizer(OptimizerConfig config, std::span<const Tensor> params);

  // Applies one update in place. Gradients must align with params and be
  // finite. All parameter rows are updated.
  void step(std::span<Tensor> params, std::span<const Tensor> grads);

  // Row-sparse variant for embedding tables: only rows flagged in
  // row_touched[p] are updated (moments included). The step counter
  // advances once per call.
  void step_rows(std::span<Tensor> params, std::span<const Tensor> grads,
                 std::span<const std::vector<bool>> row_touched);

  const OptimizerConfig& config() const { return config_; }
  std::uint64_t step_count() const { return steps_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }

 private:
  void check_aligned(std::span<Tensor> params, std::span<const Tensor> grads) const;
  void update_range(Tensor& param, const Tensor& grad, std::size_t index,
                    std::size_t begin, std::size_t end, double bias1, double bias2);

  OptimizerConfig config_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::uint64_t steps_ = 0;
};

}  // namespace rope_probe
