#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "rope_probe/attention.hpp"
#include "rope_probe/rope.hpp"
#include "rope_probe/tensor.hpp"

namespace rope_probe {

// Identity and rotation settings of one attention head, as carried in a
// container's JSON metadata.
struct HeadInfo {
  std::string model = "toy";
  int layer = 0;
  int head = 0;
  std::size_t dim = 0;
  RopeLayout layout = RopeLayout::kHalfSplit;
  double rope_base = 10000.0;
  bool rope = true;
  ScaleMode scale = ScaleMode::kInverseSqrt;

  std::optional<RopeConfig> rope_config() const;
};

// One recorded (q, K, V, positions) instance for a single head. Vectors are
// pre-rotation; the consumer applies RoPE.
struct AttentionSnapshot {
  std::vector<double> q;
  Tensor keys;
  Tensor values;
  std::vector<std::int64_t> positions;
  std::int64_t query_position = 0;

  AttentionInput to_input(ScaleMode scale) const;
};

struct SnapshotHead {
  HeadInfo info;
  std::vector<AttentionSnapshot> snapshots;
};

struct SegmentSpans {
  std::uint32_t bos = 0;
  std::uint32_t context_begin = 0;
  std::uint32_t context_end = 0;
  std::uint32_t answer_begin = 0;
  std::uint32_t answer_end = 0;

  std::array<std::uint32_t, 5> as_array() const {
    return {bos, context_begin, context_end, answer_begin, answer_end};
  }
  // Throws FormatError unless both spans lie within seq_len, are disjoint,
  // and the BOS index is in range.
  void validate(std::uint32_t seq_len) const;
};

// Attention-weight rows of one head for the query tokens of the
// question/output segment.
struct AttentionRecord {
  int layer = 0;
  int head = 0;
  Tensor rows;  // [n_rows x seq_len], n_rows == answer_end - answer_begin
  SegmentSpans spans;

  std::size_t seq_len() const { return rows.cols(); }
  void validate() const;
};

}  // namespace rope_probe
