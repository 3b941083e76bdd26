#pragma once

// Synthetic inputs with known answers, shared by the unit, CLI and
// acceptance tests.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "rope_probe/snapshot.hpp"

namespace fixture {

struct DeadDimensionHead {
  rope_probe::SnapshotHead head;
  std::vector<bool> dead;
};

// A head whose keys are zero in `dead_count` randomly chosen dimensions, so
// the query entries there never reach a score. Values are large so that
// every live query dimension visibly moves the output.
inline DeadDimensionHead dead_dimension_head(std::uint64_t seed, std::size_t dead_count,
                                             std::size_t dim = 16, std::size_t keys = 8,
                                             std::size_t snapshots = 4, double value_scale = 1e4) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<std::size_t> order(dim);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  DeadDimensionHead out;
  out.dead.assign(dim, false);
  for (std::size_t i = 0; i < dead_count; ++i) out.dead[order[i]] = true;

  auto& info = out.head.info;
  info.dim = dim;
  info.rope = false;
  info.layout = rope_probe::RopeLayout::kAdjacentPairs;
  for (std::size_t k = 0; k < snapshots; ++k) {
    rope_probe::AttentionSnapshot s;
    s.q.resize(dim);
    for (auto& x : s.q) x = nd(rng);
    s.keys = rope_probe::Tensor({keys, dim});
    s.values = rope_probe::Tensor({keys, dim});
    for (std::size_t j = 0; j < keys; ++j) {
      for (std::size_t c = 0; c < dim; ++c) {
        s.keys(j, c) = out.dead[c] ? 0.0 : nd(rng);
        s.values(j, c) = value_scale * nd(rng);
      }
    }
    s.positions.assign(keys, 0);
    out.head.snapshots.push_back(std::move(s));
  }
  return out;
}

// Random RoPE head with distinct key positions.
inline rope_probe::SnapshotHead random_rope_head(std::uint64_t seed, std::size_t dim, std::size_t keys,
                                                 std::size_t snapshots,
                                                 rope_probe::RopeLayout layout) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_int_distribution<std::int64_t> pos(0, 2047);
  rope_probe::SnapshotHead head;
  head.info.dim = dim;
  head.info.rope = true;
  head.info.layout = layout;
  for (std::size_t k = 0; k < snapshots; ++k) {
    rope_probe::AttentionSnapshot s;
    s.q.resize(dim);
    for (auto& x : s.q) x = nd(rng);
    s.keys = rope_probe::Tensor({keys, dim});
    s.values = rope_probe::Tensor({keys, dim});
    for (auto& x : s.keys.data()) x = nd(rng);
    for (auto& x : s.values.data()) x = nd(rng);
    for (std::size_t j = 0; j < keys; ++j) s.positions.push_back(pos(rng));
    s.query_position = pos(rng);
    head.snapshots.push_back(std::move(s));
  }
  return head;
}

// Attention record with `rows` identical query rows built by `fill`.
template <typename Fill>
rope_probe::AttentionRecord attention_record(int layer, int head, std::uint32_t seq_len,
                                             rope_probe::SegmentSpans spans, Fill fill) {
  rope_probe::AttentionRecord rec;
  rec.layer = layer;
  rec.head = head;
  rec.spans = spans;
  const std::size_t rows = spans.answer_end - spans.answer_begin;
  rec.rows = rope_probe::Tensor({rows, seq_len});
  for (std::size_t r = 0; r < rows; ++r) fill(rec.rows.row(r));
  return rec;
}

// Sequence of T tokens: BOS at 0, context [1, c + 1), question/output at the end.
inline rope_probe::SegmentSpans standard_spans(std::uint32_t total, std::uint32_t context,
                                               std::uint32_t answer) {
  return {0, 1, 1 + context, total - answer, total};
}

inline rope_probe::AttentionRecord all_context_record(int layer, int head) {
  const auto spans = standard_spans(12, 6, 3);
  return attention_record(layer, head, 12, spans, [&](std::span<double> row) {
    for (std::uint32_t c = spans.context_begin; c < spans.context_end; ++c) row[c] = 1.0 / 6.0;
  });
}

inline rope_probe::AttentionRecord uniform_record(int layer, int head, std::uint32_t total,
                                                  std::uint32_t context, std::uint32_t answer) {
  return attention_record(layer, head, total, standard_spans(total, context, answer),
                          [&](std::span<double> row) {
                            for (auto& x : row) x = 1.0 / static_cast<double>(total);
                          });
}

inline rope_probe::AttentionRecord bos_only_record(int layer, int head) {
  return attention_record(layer, head, 12, standard_spans(12, 6, 3),
                          [](std::span<double> row) { row[0] = 1.0; });
}

}  // namespace fixture
