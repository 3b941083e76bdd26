#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "gradient_probes.hpp"
#include "oracles.hpp"
#include "rope_probe/errors.hpp"
#include "rope_probe/utility_mask.hpp"

using namespace rope_probe;

namespace {

SnapshotHead one_key_head(std::uint64_t seed) {
  auto f = fixture::random_rope_head(seed, 8, 1, 3, RopeLayout::kHalfSplit);
  return f;
}

// The same head expressed in the other storage layout.
SnapshotHead adjacent_twin(const SnapshotHead& half) {
  const auto ord = DimOrdering::for_layout(RopeLayout::kHalfSplit, half.info.dim / 2);
  SnapshotHead out = half;
  out.info.layout = RopeLayout::kAdjacentPairs;
  for (auto& s : out.snapshots) {
    s.q = to_canonical(s.q, ord);
    for (std::size_t j = 0; j < s.keys.rows(); ++j) {
      const auto k = to_canonical(s.keys.row(j), ord);
      const auto v = to_canonical(s.values.row(j), ord);
      std::copy(k.begin(), k.end(), s.keys.row(j).begin());
      std::copy(v.begin(), v.end(), s.values.row(j).begin());
    }
  }
  return out;
}

}  // namespace

TEST(MaskFitConfig, DefaultsAndValidation) {
  MaskFitConfig c;
  EXPECT_EQ(c.learning_rate, 1e-2);
  EXPECT_EQ(c.steps, 2000u);
  EXPECT_EQ(c.init, 1.0);
  EXPECT_DOUBLE_EQ(c.resolved_alpha(128), 1.0 / 128.0);
  c.alpha = -1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = MaskFitConfig{};
  c.init = 1.5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(FitMask, ZeroAlphaKeepsAllOnes) {
  const auto head = fixture::random_rope_head(1, 8, 5, 3, RopeLayout::kHalfSplit);
  MaskFitConfig c;
  c.alpha = 0.0;
  c.steps = 200;
  const auto m = fit_mask(head, c);
  EXPECT_EQ(m.u, std::vector<double>(8, 1.0));
  EXPECT_EQ(m.objective, 0.0);
  EXPECT_LT(m.distortion, 1e-10);
  EXPECT_EQ(utility_scores(m), std::vector<double>(8, 1.0));
}

TEST(FitMask, ZeroKeyColumnIsDroppedAtNoDistortionCost) {
  // One snapshot, dimension 3 dead. The three live dimensions act
  // identically and the large values make any change to them expensive.
  SnapshotHead head;
  head.info.dim = 4;
  head.info.rope = false;
  head.info.layout = RopeLayout::kAdjacentPairs;
  AttentionSnapshot s;
  s.q = {1.0, 1.0, 1.0, 0.7};
  s.keys = Tensor::matrix({{0.6, 0.6, 0.6, 0.0}, {-0.6, -0.6, -0.6, 0.0}});
  s.values = Tensor::matrix({{1e4, 0, 0, 0}, {-1e4, 0, 0, 0}});
  s.positions = {0, 0};
  head.snapshots = {s};

  // Grid over u_3 with the other entries at 1: distortion never moves and
  // the objective falls as u_3 falls.
  const double alpha = 1.0 / 4.0;
  double previous = -1.0;
  for (int step = 0; step <= 10; ++step) {
    std::vector<double> u(4, 1.0);
    u[3] = step / 10.0;
    const double obj = mask_objective_reference(head, u, alpha);
    EXPECT_NEAR(obj, alpha * (3.0 + u[3]), 1e-12);
    if (step > 0) EXPECT_GT(obj, previous);
    previous = obj;
  }
  const auto m = fit_mask(head, MaskFitConfig{});
  EXPECT_LT(m.u[3], 0.5);
  for (int i = 0; i < 3; ++i) EXPECT_GT(m.u[i], 0.5);
  EXPECT_LT(m.distortion, 1e-6);
}

TEST(FitMask, OneKeyHeadDropsEverything) {
  const auto head = one_key_head(4);
  MaskFitConfig c;
  c.steps = 300;
  const auto m = fit_mask(head, c);
  for (double u : m.u) EXPECT_LT(u, 0.5);
  EXPECT_EQ(m.distortion, 0.0);
}

TEST(FitMask, ResultInvariants) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto head = fixture::random_rope_head(seed, 8, 6, 3, RopeLayout::kHalfSplit);
    MaskFitConfig c;
    c.steps = 150;
    const auto m = fit_mask(head, c);
    for (double u : m.u) {
      EXPECT_GE(u, 0.0);
      EXPECT_LE(u, 1.0);
    }
    const double at_init = mask_objective_reference(head, std::vector<double>(8, 1.0), m.alpha);
    EXPECT_LE(m.objective, at_init);
    double l1 = 0.0;
    for (double u : m.u) l1 += u;
    EXPECT_NEAR(m.l1, l1, 1e-12);
    EXPECT_NEAR(m.objective, m.distortion + m.alpha * m.l1, 1e-12);
    EXPECT_NEAR(m.objective, mask_objective_reference(head, m.u, m.alpha), 1e-10);
  }
}

TEST(FitMask, DeterministicAndPolicyIndependent) {
  const auto head = fixture::random_rope_head(9, 8, 6, 5, RopeLayout::kHalfSplit);
  MaskFitConfig c;
  c.steps = 100;
  const auto a = fit_mask(head, c, kernels::ExecPolicy::kSerial);
  const auto b = fit_mask(head, c, kernels::ExecPolicy::kSerial);
  kernels::set_thread_count(3);
  const auto p = fit_mask(head, c, kernels::ExecPolicy::kParallel);
  kernels::set_thread_count(0);
  EXPECT_EQ(a.u, b.u);
  EXPECT_EQ(a.u, p.u);
  EXPECT_EQ(a.objective, p.objective);
}

TEST(FitMask, Errors) {
  SnapshotHead empty;
  empty.info.dim = 4;
  EXPECT_THROW(fit_mask(empty, MaskFitConfig{}), std::invalid_argument);
  auto head = fixture::random_rope_head(1, 8, 3, 2, RopeLayout::kHalfSplit);
  head.snapshots[1].q.resize(6);
  EXPECT_THROW(fit_mask(head, MaskFitConfig{}), ShapeError);
}

TEST(MaskObjective, KernelMatchesTape) {
  for (auto layout : {RopeLayout::kHalfSplit, RopeLayout::kAdjacentPairs}) {
    for (bool rope : {true, false}) {
      auto head = fixture::random_rope_head(21, 8, 4, 3, layout);
      head.info.rope = rope;
      const auto prepared = prepare_head(head);
      std::mt19937_64 rng(5);
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      std::vector<double> u(8);
      for (auto& x : u) x = unit(rng);
      std::vector<double> tape_grad;
      const double tape = mask_objective_reference(head, u, 0.125, &tape_grad);
      const auto kernel = kernels::mask_objective(prepared, u, 0.125, true, kernels::ExecPolicy::kSerial);
      EXPECT_NEAR(kernel.objective, tape, 1e-12);
      for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(kernel.grad[i], tape_grad[i], 1e-12);
    }
  }
}

TEST(MaskObjective, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) EXPECT_LT(probe::mask_gradient_error(seed), 1e-5) << "seed " << seed;
}

TEST(UtilityScores, LayoutTwinsAgree) {
  const auto half = fixture::random_rope_head(31, 8, 6, 3, RopeLayout::kHalfSplit);
  const auto adj = adjacent_twin(half);
  MaskFitConfig c;
  c.steps = 300;
  const auto a = utility_scores(fit_mask(half, c));
  const auto b = utility_scores(fit_mask(adj, c));
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
}

TEST(UtilityScores, CanonicalOrder) {
  UtilityMask m;
  m.u = {0.1, 0.2, 0.3, 0.4};
  m.layout = RopeLayout::kHalfSplit;
  EXPECT_EQ(utility_scores(m), (std::vector<double>{0.1, 0.3, 0.2, 0.4}));
}

TEST(ThresholdMask, Examples) {
  const auto head = fixture::random_rope_head(41, 8, 5, 1, RopeLayout::kHalfSplit);
  const auto& s = head.snapshots[0];
  const auto unmasked = attend(s.to_input(head.info.scale), head.info.rope_config());
  UtilityMask m;
  m.u = {0.5, 0.9, 1.0, 0.7, 0.5, 0.6, 0.8, 0.99};
  EXPECT_EQ(apply_threshold_mask(s, head.info, m), unmasked);
  m.u.assign(8, 0.0);
  EXPECT_EQ(apply_threshold_mask(s, head.info, m, 0.0), unmasked);

  const auto f = fixture::dead_dimension_head(5, 4);
  const auto fit = fit_mask(f.head, MaskFitConfig{});
  const auto& fs = f.head.snapshots[0];
  const auto full = attend(fs.to_input(f.head.info.scale), std::nullopt);
  const auto thresholded = apply_threshold_mask(fs, f.head.info, fit);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(thresholded[i], full[i], 1e-12 * std::abs(full[i]) + 1e-12);
}
