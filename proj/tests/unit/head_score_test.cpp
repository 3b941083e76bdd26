#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "rope_probe/errors.hpp"
#include "rope_probe/head_score.hpp"

using namespace rope_probe;

TEST(ScoreHead, AllContextIsOne) {
  const std::vector<AttentionRecord> recs = {fixture::all_context_record(0, 0)};
  const auto s = score_head(recs);
  EXPECT_NEAR(s.score, 1.0, 1e-12);
  EXPECT_TRUE(s.is_retrieval);
}

TEST(ScoreHead, UniformRowsGiveContextFraction) {
  for (std::uint32_t t : {10u, 37u, 512u}) {
    const std::uint32_t c = t / 3;
    const std::vector<AttentionRecord> recs = {fixture::uniform_record(1, 2, t, c, 2)};
    EXPECT_NEAR(score_head(recs).score, double(c) / double(t), 1e-9);
  }
}

TEST(ScoreHead, BosOnlyIsZero) {
  const std::vector<AttentionRecord> recs = {fixture::bos_only_record(0, 0)};
  const auto s = score_head(recs);
  EXPECT_EQ(s.score, 0.0);
  EXPECT_FALSE(s.is_retrieval);
}

TEST(ScoreHead, BosInsideContextSpanIsExcluded) {
  // Context span [0, 6) includes BOS at 0. Half the mass sits on BOS.
  auto rec = fixture::attention_record(0, 0, 10, SegmentSpans{0, 0, 6, 8, 10}, [](std::span<double> row) {
    row[0] = 0.5;
    row[3] = 0.25;
    row[9] = 0.25;
  });
  const std::vector<AttentionRecord> recs = {rec};
  EXPECT_DOUBLE_EQ(score_head(recs).score, 0.25);
  EXPECT_DOUBLE_EQ(score_head(recs, {.threshold = 0.5, .renormalize_bos = true}).score, 0.5);
  EXPECT_DOUBLE_EQ(context_mass(rec.rows.row(0), rec.spans, false), 0.25);
}

TEST(ScoreHead, MeanOverRowsThenRecords) {
  // Record A: one row with mass 1, one row with mass 0 -> 0.5.
  // Record B: single row with mass 0.2.
  const auto spans_a = SegmentSpans{0, 1, 3, 4, 6};
  auto a = fixture::attention_record(0, 0, 6, spans_a, [](std::span<double>) {});
  a.rows(0, 1) = 1.0;
  a.rows(1, 0) = 1.0;
  auto b = fixture::attention_record(0, 0, 5, SegmentSpans{0, 1, 3, 4, 5}, [](std::span<double> row) {
    row[2] = 0.2;
    row[4] = 0.8;
  });
  const std::vector<AttentionRecord> recs = {a, b};
  EXPECT_NEAR(score_head(recs).score, (0.5 + 0.2) / 2.0, 1e-15);
}

TEST(ScoreHead, InvariantToRecordAndRowOrder) {
  std::mt19937_64 rng(3);
  std::vector<AttentionRecord> recs;
  for (int i = 0; i < 6; ++i) {
    auto rec = fixture::attention_record(2, 5, 20, fixture::standard_spans(20, 8, 4), [&](std::span<double> row) {
      std::vector<double> logits = oracle::gaussian(row.size(), rng);
      const auto p = oracle::exp_normalize(logits);
      std::copy(p.begin(), p.end(), row.begin());
    });
    recs.push_back(rec);
  }
  const double base = score_head(recs).score;
  EXPECT_GE(base, 0.0);
  EXPECT_LE(base, 1.0);
  for (int trial = 0; trial < 10; ++trial) {
    auto shuffled = recs;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    for (auto& r : shuffled) {
      std::vector<std::size_t> perm(r.rows.rows());
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      Tensor rows = r.rows;
      for (std::size_t i = 0; i < perm.size(); ++i)
        std::copy(r.rows.row(perm[i]).begin(), r.rows.row(perm[i]).end(), rows.row(i).begin());
      r.rows = rows;
    }
    EXPECT_NEAR(score_head(shuffled).score, base, 1e-15);
  }
}

TEST(ScoreHead, Errors) {
  EXPECT_THROW(score_head(std::vector<AttentionRecord>{}), std::invalid_argument);
  const std::vector<AttentionRecord> mixed = {fixture::all_context_record(0, 0), fixture::all_context_record(0, 1)};
  EXPECT_THROW(score_head(mixed), std::invalid_argument);
  auto bad = fixture::all_context_record(0, 0);
  bad.spans.context_end = 10;  // overlaps the question/output span
  EXPECT_THROW(score_head(std::vector<AttentionRecord>{bad}), FormatError);
}

TEST(ScoreAllHeads, GroupsAndSorts) {
  const std::vector<AttentionRecord> recs = {fixture::bos_only_record(1, 0), fixture::all_context_record(0, 3),
                                             fixture::all_context_record(1, 0), fixture::uniform_record(0, 1, 10, 4, 2)};
  const auto scores = score_all_heads(recs);
  ASSERT_EQ(scores.size(), 3u);
  EXPECT_EQ(std::make_pair(scores[0].layer, scores[0].head), std::make_pair(0, 1));
  EXPECT_EQ(std::make_pair(scores[1].layer, scores[1].head), std::make_pair(0, 3));
  EXPECT_EQ(std::make_pair(scores[2].layer, scores[2].head), std::make_pair(1, 0));
  EXPECT_NEAR(scores[2].score, 0.5, 1e-15);
  EXPECT_FALSE(scores[2].is_retrieval);
}

TEST(ClassifyHeads, StrictThreshold) {
  const std::vector<HeadScore> zeros = {{0, 0, 0.0, false}, {0, 1, 0.0, false}};
  EXPECT_TRUE(classify_heads(zeros).empty());
  const std::vector<HeadScore> two = {{0, 0, 0.4, false}, {0, 1, 0.6, true}};
  const auto picked = classify_heads(two);
  ASSERT_EQ(picked.size(), 1u);
  EXPECT_EQ(picked[0].head, 1);
  const std::vector<HeadScore> top = {{0, 0, 1.0, true}};
  EXPECT_TRUE(classify_heads(top, 1.0).empty());
  const std::vector<HeadScore> half = {{0, 0, 0.5, false}};
  EXPECT_TRUE(classify_heads(half).empty());
}

TEST(Intervene, NoMaskingAndFullMasking) {
  for (auto layout : {RopeLayout::kHalfSplit, RopeLayout::kAdjacentPairs}) {
    auto head = fixture::random_rope_head(7, 8, 5, 1, layout);
    const auto& s = head.snapshots[0];
    const auto unmasked = attend(s.to_input(head.info.scale), head.info.rope_config());
    EXPECT_EQ(intervene_mask_dims(s, head.info, DimSide::kFirst, 0), unmasked);
    const auto zero = intervene_mask_dims(s, head.info, DimSide::kLast, 8);
    for (std::size_t c = 0; c < 8; ++c) {
      double mean = 0.0;
      for (std::size_t r = 0; r < 5; ++r) mean += s.values(r, c) / 5.0;
      EXPECT_NEAR(zero[c], mean, 1e-14);
    }
    EXPECT_THROW(intervene_mask_dims(s, head.info, DimSide::kFirst, 9), std::out_of_range);
  }
}

TEST(Intervene, MasksCanonicalBands) {
  auto head = fixture::random_rope_head(8, 8, 5, 1, RopeLayout::kHalfSplit);
  head.info.rope = false;
  const auto& s = head.snapshots[0];
  // First 2 canonical dims of a half-split head are storage 0 and 4.
  std::vector<double> u(8, 1.0);
  u[0] = u[4] = 0.0;
  EXPECT_EQ(intervene_mask_dims(s, head.info, DimSide::kFirst, 2),
            attend_masked(s.to_input(head.info.scale), u, std::nullopt));
  u.assign(8, 1.0);
  u[3] = u[7] = 0.0;
  EXPECT_EQ(intervene_mask_dims(s, head.info, DimSide::kLast, 2),
            attend_masked(s.to_input(head.info.scale), u, std::nullopt));
}
