#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "rope_probe/kernels.hpp"
#include "rope_probe/optimizer.hpp"
#include "rope_probe/snapshot.hpp"

namespace rope_probe {

struct MaskFitConfig {
  std::optional<double> alpha;  // defaults to 1/(2D)
  double learning_rate = 1e-2;
  std::size_t steps = 2000;
  double init = 1.0;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::kAdam;

  double resolved_alpha(std::size_t dim) const;
  void validate() const;
};

// Learned query mask u in [0,1]^{2D} for one head, in the head's storage
// layout. utility_scores() gives the canonical view.
struct UtilityMask {
  std::vector<double> u;
  double objective = 0.0;
  double distortion = 0.0;
  double l1 = 0.0;
  double alpha = 0.0;
  std::size_t steps = 0;
  std::size_t best_step = 0;
  RopeLayout layout = RopeLayout::kHalfSplit;
};

kernels::PreparedHead prepare_head(const SnapshotHead& head);

// Projected Adam on
//   mean_snapshots || attend(q) - attend(q * u) ||^2 + alpha * sum(u)
// with u clamped to [0,1] after every step. Returns the best iterate.
UtilityMask fit_mask(const SnapshotHead& head, const MaskFitConfig& config,
                     kernels::ExecPolicy policy = kernels::ExecPolicy::kSerial);

// The same objective on the autodiff tape; reference for the kernel.
double mask_objective_reference(const SnapshotHead& head, std::span<const double> u, double alpha,
                                std::vector<double>* grad = nullptr);

std::vector<double> utility_scores(const UtilityMask& mask);

// Binary mask (u_d >= threshold) applied to the query, then attend.
std::vector<double> apply_threshold_mask(const AttentionSnapshot& snapshot, const HeadInfo& info,
                                         const UtilityMask& mask, double threshold = 0.5);

}  // namespace rope_probe
