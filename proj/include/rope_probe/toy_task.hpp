#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "rope_probe/attention.hpp"
#include "rope_probe/autodiff.hpp"
#include "rope_probe/optimizer.hpp"
#include "rope_probe/rng.hpp"
#include "rope_probe/rope.hpp"
#include "rope_probe/tensor.hpp"

namespace rope_probe {

// How samples_per_epoch is counted.
enum class EpochUnit : std::uint8_t { kEpisodes, kSteps };

struct TaskConfig {
  std::size_t n = 1000;
  std::size_t subset_size = 128;
  std::size_t dim = 128;  // 2D
  std::int64_t max_position = 2048;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  std::size_t samples_per_epoch = 10000;
  std::size_t epochs = 100;
  bool rope_enabled = true;
  std::uint64_t seed = 0;
  ScaleMode scale = ScaleMode::kInverseSqrt;
  double rope_base = 10000.0;
  RopeLayout layout = RopeLayout::kHalfSplit;
  EpochUnit epoch_unit = EpochUnit::kEpisodes;
  OptimizerKind optimizer = OptimizerKind::kAdam;

  void validate() const;
  RopeConfig rope() const;
  std::size_t steps_per_epoch() const;
};

// Full-scale defaults and the reduced preset used for quick runs.
TaskConfig full_preset();
TaskConfig desk_preset();

// The n learnable (q_i, k_i, v_i) tuples, each table n x 2D.
struct EmbeddingStore {
  Tensor q;
  Tensor k;
  Tensor v;

  std::size_t size() const { return q.rows(); }
  std::size_t dim() const { return q.cols(); }
  void validate() const;
  bool operator==(const EmbeddingStore&) const = default;
};

// i.i.d. N(0, 1/(2D)) entries, drawn Q then K then V in row-major order.
EmbeddingStore init_store(const TaskConfig& config, Rng& rng);

struct Episode {
  std::size_t target = 0;
  std::vector<std::size_t> subset;      // includes target, no duplicates
  std::vector<std::int64_t> positions;  // distinct, aligned with subset
};

Episode sample_episode(const TaskConfig& config, Rng& rng);

// -log P(v_target | q_target, K_S, V_S), softmax over all n values.
// Reference path on the autodiff tape.
double episode_loss(const EmbeddingStore& store, const Episode& episode, const TaskConfig& config);

// Records the episode loss on `g` over existing table nodes.
Var build_episode_loss(Graph& g, Var q, Var k, Var v, const Episode& episode, const TaskConfig& config);

struct StoreGradient {
  double loss = 0.0;
  Tensor q;
  Tensor k;
  Tensor v;
};

// Loss and its gradient with respect to Q, K, V via backward().
StoreGradient episode_loss_and_grad(const EmbeddingStore& store, const Episode& episode,
                                    const TaskConfig& config);

struct TrainResult {
  EmbeddingStore store;
  std::vector<double> epoch_losses;  // mean training loss per epoch
};

using EpochCallback = std::function<void(std::size_t epoch, double mean_loss)>;

// Deterministic given config.seed. Throws NumericError on divergence.
TrainResult train(const TaskConfig& config, const EpochCallback& on_epoch = {});

// Continues from an explicit initial store.
TrainResult train_from(const TaskConfig& config, EmbeddingStore initial, Rng& rng,
                       const EpochCallback& on_epoch = {});

// Mean episode loss over `episodes` freshly sampled episodes.
double eval_loss(const EmbeddingStore& store, const TaskConfig& config, std::size_t episodes,
                 Rng& rng);

}  // namespace rope_probe
