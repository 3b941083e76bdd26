#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "rope_probe/attention.hpp"
#include "rope_probe/rope.hpp"
#include "rope_probe/tensor.hpp"
#include "rope_probe/toy_task.hpp"

// Fused forward/backward kernels for the two objectives that dominate run
// time. Every kernel has a serial reference path and an OpenMP path; both
// accumulate in the same fixed order, so their outputs are bit-identical
// for any thread count.
namespace rope_probe::kernels {

enum class ExecPolicy : std::uint8_t { kSerial, kParallel };

// Caps OpenMP workers; 0 leaves the runtime default.
void set_thread_count(int threads);
int thread_count();

struct EpisodeContext {
  ScaleMode scale = ScaleMode::kInverseSqrt;
  std::optional<RopeTable> rope;

  static EpisodeContext from(const TaskConfig& config);
};

double episode_loss(const EmbeddingStore& store, const Episode& episode, const EpisodeContext& ctx);

// Per-episode losses in episode order.
std::vector<double> batch_losses(const EmbeddingStore& store, std::span<const Episode> episodes,
                                 const EpisodeContext& ctx, ExecPolicy policy);

struct BatchGradient {
  double mean_loss = 0.0;
  Tensor q;
  Tensor k;
  Tensor v;
  // Rows that received a contribution this batch. All V rows do.
  std::vector<bool> q_rows;
  std::vector<bool> k_rows;
  std::vector<bool> v_rows;
};

// Gradient of the batch-mean episode loss with respect to Q, K, V.
BatchGradient batch_loss_and_grad(const EmbeddingStore& store, std::span<const Episode> episodes,
                                  const EpisodeContext& ctx, ExecPolicy policy);

// One attention instance with keys already rotated and the unmasked
// reference output cached, ready for repeated mask evaluations.
struct PreparedSnapshot {
  std::vector<double> q;          // pre-rotation query
  Tensor rotated_keys;            // [s x 2D]
  Tensor values;                  // [s x 2D]
  std::vector<double> reference;  // attend(q, K, V)
  std::int64_t query_position = 0;
};

struct PreparedHead {
  std::vector<PreparedSnapshot> snapshots;
  std::optional<RopeConfig> rope;  // applied to the masked query when set
  ScaleMode scale = ScaleMode::kInverseSqrt;
  std::size_t dim = 0;
};

struct MaskObjective {
  double objective = 0.0;   // distortion + alpha * sum(u)
  double distortion = 0.0;  // mean squared output change over snapshots
  double l1 = 0.0;          // sum(u)
  std::vector<double> grad;
};

MaskObjective mask_objective(const PreparedHead& head, std::span<const double> u, double alpha,
                             bool with_grad, ExecPolicy policy);

}  // namespace rope_probe::kernels
