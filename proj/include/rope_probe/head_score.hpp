#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "rope_probe/dimension_analysis.hpp"
#include "rope_probe/snapshot.hpp"

namespace rope_probe {

struct HeadScore {
  int layer = 0;
  int head = 0;
  double score = 0.0;
  bool is_retrieval = false;
};

struct HeadScoreOptions {
  double threshold = 0.5;
  // Divide each row's context mass by (1 - weight on BOS).
  bool renormalize_bos = false;
};

// Context-span attention mass (BOS column excluded) of one query row.
double context_mass(std::span<const double> row, const SegmentSpans& spans, bool renormalize_bos);

// Mean context mass over rows, then over records. All records must share
// (layer, head).
HeadScore score_head(std::span<const AttentionRecord> records, const HeadScoreOptions& options = {});

// Groups records by (layer, head) and scores each group; sorted by layer, head.
std::vector<HeadScore> score_all_heads(std::span<const AttentionRecord> records,
                                       const HeadScoreOptions& options = {});

// Heads with score strictly above the threshold.
std::vector<HeadScore> classify_heads(std::span<const HeadScore> scores, double threshold = 0.5);

// Zeroes the first or last `count` canonical dimensions of q and attends.
std::vector<double> intervene_mask_dims(const AttentionSnapshot& snapshot, const HeadInfo& info,
                                        DimSide side, std::size_t count);

}  // namespace rope_probe
