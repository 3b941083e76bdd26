#include "rope_probe/attention.hpp"

#include <cmath>
#include <fmt/format.h>

#include "rope_probe/errors.hpp"

namespace rope_probe {

std::string_view to_string(ScaleMode mode) {
  return mode == ScaleMode::kInverseSqrt ? "inv-sqrt" : "none";
}

ScaleMode parse_scale_mode(std::string_view text) {
  if (text == "inv-sqrt" || text == "inverse-sqrt") return ScaleMode::kInverseSqrt;
  if (text == "none") return ScaleMode::kNone;
  throw std::invalid_argument(fmt::format("unknown scale mode '{}'", text));
}

double score_scale(ScaleMode mode, std::size_t dim) {
  return mode == ScaleMode::kInverseSqrt ? 1.0 / std::sqrt(static_cast<double>(dim)) : 1.0;
}

void AttentionInput::validate(bool needs_positions) const {
  if (keys.empty() || keys.rows() == 0) throw ShapeError("attention needs at least one key");
  if (keys.cols() != q.size() || values.cols() != q.size()) {
    throw ShapeError(fmt::format("attention: q has length {}, keys {} cols, values {} cols",
                                 q.size(), keys.cols(), values.cols()));
  }
  if (keys.rows() != values.rows()) {
    throw ShapeError(fmt::format("attention: {} keys but {} values", keys.rows(), values.rows()));
  }
  if (positions && positions->size() != keys.rows()) {
    throw ShapeError(fmt::format("attention: {} positions for {} keys", positions->size(), keys.rows()));
  }
  if (needs_positions && !positions) throw std::invalid_argument("RoPE attention requires key positions");
  if (positions) {
    for (auto p : *positions) {
      if (p < 0) throw std::invalid_argument(fmt::format("negative key position {}", p));
    }
  }
  if (query_position < 0) throw std::invalid_argument("negative query position");
}

namespace {

std::vector<double> weights_for_query(const AttentionInput& input, std::span<const double> q,
                                      const std::optional<RopeConfig>& rope) {
  input.validate(rope.has_value());
  const std::size_t s = input.length();
  const double c = score_scale(input.scale, input.dim());
  std::vector<double> scores(s);
  if (rope) {
    if (rope->dim() != input.dim()) {
      throw ShapeError(fmt::format("RoPE dim {} vs head dim {}", rope->dim(), input.dim()));
    }
    const auto thetas = frequencies(*rope);
    std::vector<double> qr(q.size());
    std::vector<double> kr(q.size());
    rotate_signed_into(q, input.query_position, thetas, *rope, qr);
    for (std::size_t j = 0; j < s; ++j) {
      rotate_signed_into(input.keys.row(j), (*input.positions)[j], thetas, *rope, kr);
      scores[j] = c * dot(qr, kr);
    }
  } else {
    for (std::size_t j = 0; j < s; ++j) scores[j] = c * dot(q, input.keys.row(j));
  }
  return softmax(scores);
}

std::vector<double> mix_values(const Tensor& values, const std::vector<double>& w) {
  std::vector<double> out(values.cols(), 0.0);
  for (std::size_t j = 0; j < w.size(); ++j) {
    const auto row = values.row(j);
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += w[j] * row[c];
  }
  return out;
}

}  // namespace

std::vector<double> attention_weights(const AttentionInput& input,
                                      const std::optional<RopeConfig>& rope) {
  return weights_for_query(input, input.q, rope);
}

std::vector<double> attend(const AttentionInput& input, const std::optional<RopeConfig>& rope) {
  return mix_values(input.values, weights_for_query(input, input.q, rope));
}

std::vector<double> attend_masked(const AttentionInput& input, std::span<const double> u,
                                  const std::optional<RopeConfig>& rope) {
  if (u.size() != input.q.size()) {
    throw ShapeError(fmt::format("mask has length {}, query {}", u.size(), input.q.size()));
  }
  std::vector<double> qm(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) {
    if (!(u[i] >= 0.0 && u[i] <= 1.0)) {
      throw std::invalid_argument(fmt::format("mask entry {} = {} outside [0, 1]", i, u[i]));
    }
    qm[i] = input.q[i] * u[i];
  }
  return mix_values(input.values, weights_for_query(input, qm, rope));
}

}  // namespace rope_probe
