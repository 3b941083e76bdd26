#include "rope_probe/head_score.hpp"

#include <algorithm>
#include <fmt/format.h>
#include <map>

#include "rope_probe/errors.hpp"

namespace rope_probe {

double context_mass(std::span<const double> row, const SegmentSpans& spans, bool renormalize_bos) {
  double mass = 0.0;
  for (std::size_t c = spans.context_begin; c < spans.context_end; ++c) {
    if (c == spans.bos) continue;
    mass += row[c];
  }
  if (renormalize_bos) {
    const double rest = 1.0 - row[spans.bos];
    mass = rest > 0.0 ? mass / rest : 0.0;
  }
  return std::clamp(mass, 0.0, 1.0);
}

HeadScore score_head(std::span<const AttentionRecord> records, const HeadScoreOptions& options) {
  if (records.empty()) throw std::invalid_argument("score_head needs at least one record");
  HeadScore out{records.front().layer, records.front().head, 0.0, false};
  double total = 0.0;
  for (const auto& rec : records) {
    if (rec.layer != out.layer || rec.head != out.head) {
      throw std::invalid_argument(fmt::format("records mix heads ({}, {}) and ({}, {})", out.layer,
                                              out.head, rec.layer, rec.head));
    }
    rec.validate();
    double record_mass = 0.0;
    for (std::size_t r = 0; r < rec.rows.rows(); ++r) {
      record_mass += context_mass(rec.rows.row(r), rec.spans, options.renormalize_bos);
    }
    total += record_mass / static_cast<double>(rec.rows.rows());
  }
  out.score = total / static_cast<double>(records.size());
  out.is_retrieval = out.score > options.threshold;
  return out;
}

std::vector<HeadScore> score_all_heads(std::span<const AttentionRecord> records,
                                       const HeadScoreOptions& options) {
  std::map<std::pair<int, int>, std::vector<AttentionRecord>> groups;
  for (const auto& rec : records) groups[{rec.layer, rec.head}].push_back(rec);
  std::vector<HeadScore> scores;
  for (const auto& [key, group] : groups) scores.push_back(score_head(group, options));
  return scores;
}

std::vector<HeadScore> classify_heads(std::span<const HeadScore> scores, double threshold) {
  std::vector<HeadScore> out;
  for (const auto& s : scores) {
    if (s.score > threshold) out.push_back(s);
  }
  return out;
}

std::vector<double> intervene_mask_dims(const AttentionSnapshot& snapshot, const HeadInfo& info,
                                        DimSide side, std::size_t count) {
  const std::size_t dim = snapshot.q.size();
  if (count > dim) throw std::out_of_range(fmt::format("cannot mask {} of {} dimensions", count, dim));
  const auto ordering = DimOrdering::for_layout(info.layout, dim / 2);
  std::vector<double> keep(dim, 1.0);
  for (std::size_t k = 0; k < dim; ++k) {
    const std::size_t c = ordering.storage_to_canonical[k];
    if (side == DimSide::kFirst ? c < count : c >= dim - count) keep[k] = 0.0;
  }
  return attend_masked(snapshot.to_input(info.scale), keep, info.rope_config());
}

}  // namespace rope_probe
