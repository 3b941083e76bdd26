#include "rope_probe/snapshot.hpp"

#include <fmt/format.h>

#include "rope_probe/errors.hpp"

namespace rope_probe {

std::optional<RopeConfig> HeadInfo::rope_config() const {
  if (!rope) return std::nullopt;
  if (dim == 0 || dim % 2 != 0) throw FormatError(fmt::format("head dim {} cannot carry RoPE", dim));
  // Snapshot positions are not bounded by a training window; the table
  // size only matters for caching.
  return RopeConfig{.base = rope_base, .pairs = dim / 2, .layout = layout, .max_position = 1};
}

AttentionInput AttentionSnapshot::to_input(ScaleMode scale) const {
  AttentionInput in;
  in.q = q;
  in.keys = keys;
  in.values = values;
  in.positions = positions;
  in.query_position = query_position;
  in.scale = scale;
  return in;
}

void SegmentSpans::validate(std::uint32_t seq_len) const {
  if (bos >= seq_len) throw FormatError(fmt::format("BOS index {} outside sequence of {}", bos, seq_len));
  if (context_begin > context_end || context_end > seq_len) {
    throw FormatError(fmt::format("context span [{}, {}) invalid for sequence of {}", context_begin,
                                  context_end, seq_len));
  }
  if (answer_begin > answer_end || answer_end > seq_len) {
    throw FormatError(fmt::format("question/output span [{}, {}) invalid for sequence of {}",
                                  answer_begin, answer_end, seq_len));
  }
  const bool disjoint = context_end <= answer_begin || answer_end <= context_begin;
  if (!disjoint) throw FormatError("context and question/output spans overlap");
}

void AttentionRecord::validate() const {
  if (rows.rank() != 2 || rows.rows() == 0) throw FormatError("attention record has no rows");
  spans.validate(static_cast<std::uint32_t>(rows.cols()));
  if (rows.rows() != spans.answer_end - spans.answer_begin) {
    throw FormatError(fmt::format("{} rows but question/output span holds {} tokens", rows.rows(),
                                  spans.answer_end - spans.answer_begin));
  }
  for (double w : rows.data()) {
    if (!(w >= 0.0)) throw FormatError("attention weights must be non-negative and finite");
  }
}

}  // namespace rope_probe
