#pragma once

// Finite-difference probes of the two training objectives. The probed
// function is the long-double oracle shifted by its value at the base
// point, so the differences are not swamped by double rounding of an O(1)
// loss.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "rope_probe/gradcheck.hpp"
#include "rope_probe/kernels.hpp"
#include "rope_probe/toy_task.hpp"
#include "rope_probe/utility_mask.hpp"

namespace probe {

using LD = long double;

// Max relative error over Q, K and V of both the tape gradient and the
// fused kernel gradient, on an n = 8, 2D = 8, subset 4 instance.
inline double retrieval_gradient_error(std::uint64_t seed, bool rope, double h = 1e-5) {
  using namespace rope_probe;
  TaskConfig c;
  c.n = 8;
  c.dim = 8;
  c.subset_size = 4;
  c.batch_size = 1;
  c.rope_enabled = rope;
  c.seed = seed;
  Rng rng(seed);
  const auto store = init_store(c, rng);
  const auto ep = sample_episode(c, rng);

  const auto tape = episode_loss_and_grad(store, ep, c);
  const std::vector<Episode> batch{ep};
  const auto fused = kernels::batch_loss_and_grad(store, batch, kernels::EpisodeContext::from(c),
                                                  kernels::ExecPolicy::kSerial);

  const bool half = c.layout == RopeLayout::kHalfSplit;
  const LD scale = 1.0L / std::sqrt(LD(c.dim));
  auto loss = [&](const Tensor& q, const Tensor& k, const Tensor& v) {
    return oracle::retrieval_loss<LD>(oracle::rows_of<LD>(q.storage(), c.dim),
                                      oracle::rows_of<LD>(k.storage(), c.dim),
                                      oracle::rows_of<LD>(v.storage(), c.dim), ep.target, ep.subset,
                                      ep.positions, rope, half, LD(c.rope_base), scale);
  };
  const LD base = loss(store.q, store.k, store.v);

  double worst = 0.0;
  for (int t = 0; t < 3; ++t) {
    auto f = [&](const Tensor& x) {
      return static_cast<double>(loss(t == 0 ? x : store.q, t == 1 ? x : store.k, t == 2 ? x : store.v) - base);
    };
    const Tensor& x = t == 0 ? store.q : t == 1 ? store.k : store.v;
    const Tensor& a = t == 0 ? tape.q : t == 1 ? tape.k : tape.v;
    const Tensor& b = t == 0 ? fused.q : t == 1 ? fused.k : fused.v;
    worst = std::max(worst, finite_difference_check(f, x, a, h).max_relative_error);
    worst = std::max(worst, finite_difference_check(f, x, b, h).max_relative_error);
  }
  return worst;
}

// Max relative error of the mask-objective gradient (tape and kernel) at a
// random interior u, for a RoPE head with s = 4 keys and 2D = 8.
inline double mask_gradient_error(std::uint64_t seed, double h = 1e-5) {
  using namespace rope_probe;
  const auto head = fixture::random_rope_head(seed, 8, 4, 2, RopeLayout::kHalfSplit);
  std::mt19937_64 rng(seed ^ 0x5eedULL);
  std::uniform_real_distribution<double> unit(0.05, 0.95);
  std::vector<double> u(8);
  for (auto& x : u) x = unit(rng);
  const double alpha = 1.0 / 8.0;

  std::vector<double> tape_grad;
  mask_objective_reference(head, u, alpha, &tape_grad);
  const auto fused = kernels::mask_objective(prepare_head(head), u, alpha, true, kernels::ExecPolicy::kSerial);

  std::vector<oracle::Snapshot> snaps;
  for (const auto& s : head.snapshots) {
    snaps.push_back({s.q, oracle::rows_of<double>(s.keys.storage(), 8),
                     oracle::rows_of<double>(s.values.storage(), 8), s.positions, s.query_position});
  }
  auto objective = [&](const std::vector<double>& x) {
    return oracle::mask_objective<LD>(snaps, std::vector<LD>(x.begin(), x.end()), LD(alpha), true, true,
                                      LD(head.info.rope_base), 1.0L / std::sqrt(8.0L));
  };
  const LD base = objective(u);
  auto f = [&](const Tensor& x) { return static_cast<double>(objective(x.storage()) - base); };
  const Tensor x = Tensor::vector(u);
  return std::max(finite_difference_check(f, x, Tensor::vector(tape_grad), h).max_relative_error,
                  finite_difference_check(f, x, Tensor::vector(fused.grad), h).max_relative_error);
}

}  // namespace probe
