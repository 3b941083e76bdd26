#include "rope_probe/utility_mask.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <fmt/format.h>

#include "rope_probe/autodiff.hpp"
#include "rope_probe/errors.hpp"

namespace rope_probe {

double MaskFitConfig::resolved_alpha(std::size_t dim) const {
  return alpha.value_or(1.0 / static_cast<double>(dim));
}

void MaskFitConfig::validate() const {
  if (alpha && !(*alpha >= 0.0)) throw std::invalid_argument("alpha must be non-negative");
  if (!(init >= 0.0 && init <= 1.0)) throw std::invalid_argument("mask init must lie in [0, 1]");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("mask learning rate must be positive");
}

namespace {

void check_head(const SnapshotHead& head) {
  if (head.snapshots.empty()) throw std::invalid_argument("no snapshots for head");
  const std::size_t d = head.info.dim;
  for (std::size_t i = 0; i < head.snapshots.size(); ++i) {
    const auto& s = head.snapshots[i];
    if (s.q.size() != d) {
      throw ShapeError(fmt::format("snapshot {} has dim {} but the head has {}", i, s.q.size(), d));
    }
    s.to_input(head.info.scale).validate(head.info.rope);
  }
}

}  // namespace

kernels::PreparedHead prepare_head(const SnapshotHead& head) {
  check_head(head);
  kernels::PreparedHead prepared;
  prepared.rope = head.info.rope_config();
  prepared.scale = head.info.scale;
  prepared.dim = head.info.dim;
  const std::vector<double> thetas = prepared.rope ? frequencies(*prepared.rope) : std::vector<double>{};
  for (const auto& s : head.snapshots) {
    kernels::PreparedSnapshot p;
    p.q = s.q;
    p.values = s.values;
    p.query_position = s.query_position;
    p.rotated_keys = s.keys;
    if (prepared.rope) {
      for (std::size_t j = 0; j < s.keys.rows(); ++j) {
        rotate_signed_into(s.keys.row(j), s.positions[j], thetas, *prepared.rope, p.rotated_keys.row(j));
      }
    }
    p.reference = attend(s.to_input(head.info.scale), prepared.rope);
    prepared.snapshots.push_back(std::move(p));
  }
  return prepared;
}

UtilityMask fit_mask(const SnapshotHead& head, const MaskFitConfig& config, kernels::ExecPolicy policy) {
  config.validate();
  const kernels::PreparedHead prepared = prepare_head(head);
  const std::size_t d = prepared.dim;
  const double alpha = config.resolved_alpha(d);

  std::vector<Tensor> params{Tensor({d}, std::vector<double>(d, config.init))};
  Optimizer optimizer({.kind = config.optimizer, .learning_rate = config.learning_rate}, params);

  UtilityMask best;
  best.alpha = alpha;
  best.steps = config.steps;
  best.layout = head.info.layout;
  best.objective = std::numeric_limits<double>::infinity();
  auto consider = [&](const kernels::MaskObjective& obj, std::size_t step) {
    if (obj.objective < best.objective) {
      best.u.assign(params[0].data().begin(), params[0].data().end());
      best.objective = obj.objective;
      best.distortion = obj.distortion;
      best.l1 = obj.l1;
      best.best_step = step;
    }
  };

  for (std::size_t step = 0; step < config.steps; ++step) {
    auto obj = kernels::mask_objective(prepared, params[0].data(), alpha, true, policy);
    consider(obj, step);
    const std::vector<Tensor> grads{Tensor({d}, std::move(obj.grad))};
    optimizer.step(params, grads);
    for (auto& x : params[0].data()) x = std::clamp(x, 0.0, 1.0);
  }
  consider(kernels::mask_objective(prepared, params[0].data(), alpha, false, policy), config.steps);
  return best;
}

double mask_objective_reference(const SnapshotHead& head, std::span<const double> u, double alpha,
                                std::vector<double>* grad) {
  check_head(head);
  const std::size_t d = head.info.dim;
  if (u.size() != d) throw ShapeError("mask length differs from head dim");
  const auto rope = head.info.rope_config();
  const double c = score_scale(head.info.scale, d);

  Graph g;
  const Var uvar = g.parameter(Tensor({d}, std::vector<double>(u.begin(), u.end())));
  Var total{};
  bool first = true;
  for (const auto& s : head.snapshots) {
    const auto reference = attend(s.to_input(head.info.scale), rope);
    Var qm = g.mul(g.constant(Tensor({1, d}, s.q)), uvar);
    Var keys = g.constant(s.keys);
    if (rope) {
      qm = g.rope_rotate(qm, {s.query_position}, *rope);
      keys = g.rope_rotate(keys, s.positions, *rope);
    }
    const Var w = g.softmax(g.scale(g.matmul_transposed(qm, keys), c));
    const Var out = g.matmul(w, g.constant(s.values));
    const Var term = g.l2_squared(g.sub(out, g.constant(Tensor({1, d}, reference))));
    total = first ? term : g.add(total, term);
    first = false;
  }
  const Var objective =
      g.add(g.scale(total, 1.0 / static_cast<double>(head.snapshots.size())), g.scale(g.l1_norm(uvar), alpha));
  if (grad) {
    const auto grads = g.backward(objective);
    grad->assign(grads.front().value.data().begin(), grads.front().value.data().end());
  }
  return g.scalar(objective);
}

std::vector<double> utility_scores(const UtilityMask& mask) {
  return to_canonical(mask.u, DimOrdering::for_layout(mask.layout, mask.u.size() / 2));
}

std::vector<double> apply_threshold_mask(const AttentionSnapshot& snapshot, const HeadInfo& info,
                                         const UtilityMask& mask, double threshold) {
  std::vector<double> binary(mask.u.size());
  for (std::size_t i = 0; i < binary.size(); ++i) binary[i] = mask.u[i] >= threshold ? 1.0 : 0.0;
  return attend_masked(snapshot.to_input(info.scale), binary, info.rope_config());
}

}  // namespace rope_probe
