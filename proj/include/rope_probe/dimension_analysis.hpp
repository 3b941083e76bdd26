#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

#include "rope_probe/toy_task.hpp"

namespace rope_probe {

enum class DimSide : std::uint8_t { kFirst, kLast };
std::string_view to_string(DimSide side);
DimSide parse_side(std::string_view text);

// Which tables an ablation zeroes.
enum class AblationTarget : std::uint8_t { kQueryAndKey, kQueryOnly };

struct MagnitudeRow {
  std::size_t dim = 0;  // canonical index, 0-based
  double mean_abs_q = 0.0;
  double mean_abs_k = 0.0;
  double rms_q = 0.0;
  double rms_k = 0.0;
};

struct AblationRow {
  DimSide side = DimSide::kFirst;
  std::size_t removed = 0;
  double eval_loss = 0.0;
};

struct DimensionReport {
  std::vector<MagnitudeRow> magnitudes;
  std::vector<AblationRow> ablation;
  std::vector<double> l1_row_norms;
};

// Store with each row of Q, K, V permuted into canonical dimension order.
EmbeddingStore canonicalize(const EmbeddingStore& store, RopeLayout layout);

// Per canonical dimension: mean and RMS of |Q[:, d]| and |K[:, d]|.
std::vector<MagnitudeRow> magnitude_profile(const EmbeddingStore& store, RopeLayout layout);

// Mean of a magnitude column over canonical dims [begin, end).
double mean_abs_q(const std::vector<MagnitudeRow>& rows, std::size_t begin, std::size_t end);
double mean_abs_k(const std::vector<MagnitudeRow>& rows, std::size_t begin, std::size_t end);

// Copy of the store with the first or last `count` canonical dimensions
// zeroed in Q (and K, unless target is kQueryOnly).
EmbeddingStore ablate(const EmbeddingStore& store, RopeLayout layout, DimSide side,
                      std::size_t count, AblationTarget target);

struct AblationPlan {
  std::vector<DimSide> sides = {DimSide::kFirst, DimSide::kLast};
  std::vector<std::size_t> counts = {0, 16, 32};
  std::size_t episodes = 2000;
  std::uint64_t episode_seed = 0;  // shared by every cell
  AblationTarget target = AblationTarget::kQueryAndKey;
};

// eval_loss for each (side, count). Every cell replays the same episode
// stream, so the count = 0 cells equal the unablated loss exactly.
std::vector<AblationRow> ablation_sweep(const EmbeddingStore& store, const TaskConfig& config,
                                        const AblationPlan& plan);

// L1 norm of every row of W (rows = head dimensions).
std::vector<double> l1_row_norms(const Tensor& w);

}  // namespace rope_probe
