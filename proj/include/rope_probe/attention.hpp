#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "rope_probe/rope.hpp"
#include "rope_probe/tensor.hpp"

namespace rope_probe {

enum class ScaleMode : std::uint8_t { kInverseSqrt, kNone };

std::string_view to_string(ScaleMode mode);
ScaleMode parse_scale_mode(std::string_view text);
double score_scale(ScaleMode mode, std::size_t dim);

// Single-head attention instance: one query against s key/value rows.
struct AttentionInput {
  std::vector<double> q;                     // [2D]
  Tensor keys;                               // [s x 2D]
  Tensor values;                             // [s x 2D]
  std::optional<std::vector<std::int64_t>> positions;  // key positions, length s
  std::int64_t query_position = 0;           // rotation applied to q when RoPE is on
  ScaleMode scale = ScaleMode::kInverseSqrt;

  std::size_t dim() const { return q.size(); }
  std::size_t length() const { return keys.rows(); }
  void validate(bool needs_positions) const;
};

// Softmax weights over keys. With RoPE, score_s = rotate(q, m0) . rotate(k_s, pos_s).
std::vector<double> attention_weights(const AttentionInput& input,
                                      const std::optional<RopeConfig>& rope);

// sum_s weights_s * v_s
std::vector<double> attend(const AttentionInput& input, const std::optional<RopeConfig>& rope);

// attend with q replaced by q * u elementwise, u in [0,1]^{2D}.
std::vector<double> attend_masked(const AttentionInput& input, std::span<const double> u,
                                  const std::optional<RopeConfig>& rope);

}  // namespace rope_probe
