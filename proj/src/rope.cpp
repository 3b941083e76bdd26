#include "rope_probe/rope.hpp"

#include <cmath>
#include <fmt/format.h>

#include "rope_probe/errors.hpp"
#include "rope_probe/tensor.hpp"

namespace rope_probe {

std::string_view to_string(RopeLayout layout) {
  return layout == RopeLayout::kAdjacentPairs ? "adjacent" : "half-split";
}

RopeLayout parse_layout(std::string_view text) {
  if (text == "adjacent" || text == "adjacent-pairs") return RopeLayout::kAdjacentPairs;
  if (text == "half-split" || text == "half") return RopeLayout::kHalfSplit;
  throw std::invalid_argument(fmt::format("unknown RoPE layout '{}'", text));
}

void RopeConfig::validate() const {
  if (pairs == 0) throw ShapeError("RoPE needs at least one rotation pair");
  if (!(base > 0.0) || !std::isfinite(base)) throw std::invalid_argument("RoPE base must be positive");
  if (max_position <= 0) throw std::invalid_argument("RoPE max_position must be positive");
}

std::vector<double> frequencies(const RopeConfig& config) {
  config.validate();
  const double two_d = static_cast<double>(config.dim());
  std::vector<double> thetas(config.pairs);
  for (std::size_t i = 0; i < config.pairs; ++i) {
    thetas[i] = std::pow(config.base, -2.0 * static_cast<double>(i) / two_d);
  }
  return thetas;
}

std::pair<std::size_t, std::size_t> pair_indices(const RopeConfig& config, std::size_t i) {
  if (config.layout == RopeLayout::kAdjacentPairs) return {2 * i, 2 * i + 1};
  return {i, i + config.pairs};
}

namespace {

void check_dim(std::span<const double> v, const RopeConfig& config) {
  if (v.size() != config.dim()) {
    throw ShapeError(fmt::format("RoPE expects length {} but got {}", config.dim(), v.size()));
  }
}

}  // namespace

void rotate_signed_into(std::span<const double> v, std::int64_t delta,
                        std::span<const double> thetas, const RopeConfig& config,
                        std::span<double> out) {
  for (std::size_t i = 0; i < config.pairs; ++i) {
    const auto [a, b] = pair_indices(config, i);
    const double angle = static_cast<double>(delta) * thetas[i];
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    const double x = v[a];
    const double y = v[b];
    out[a] = c * x - s * y;
    out[b] = s * x + c * y;
  }
}

std::vector<double> rotate_signed(std::span<const double> v, std::int64_t delta,
                                  const RopeConfig& config) {
  check_dim(v, config);
  const auto thetas = frequencies(config);
  std::vector<double> out(v.size());
  rotate_signed_into(v, delta, thetas, config, out);
  return out;
}

std::vector<double> rotate(std::span<const double> v, std::int64_t m, const RopeConfig& config) {
  if (m < 0) throw std::invalid_argument(fmt::format("negative position {}", m));
  return rotate_signed(v, m, config);
}

bool beyond_max_position(std::int64_t m, const RopeConfig& config) {
  return m >= config.max_position;
}

double relative_dot(std::span<const double> q, std::span<const double> k, std::int64_t m,
                    std::int64_t n, const RopeConfig& config) {
  check_dim(q, config);
  check_dim(k, config);
  return dot(rotate(q, m, config), rotate(k, n, config));
}

DimOrdering DimOrdering::for_layout(RopeLayout layout, std::size_t pairs) {
  DimOrdering ordering;
  ordering.storage_to_canonical.resize(2 * pairs);
  for (std::size_t k = 0; k < 2 * pairs; ++k) {
    if (layout == RopeLayout::kAdjacentPairs) {
      ordering.storage_to_canonical[k] = k;
    } else {
      ordering.storage_to_canonical[k] = k < pairs ? 2 * k : 2 * (k - pairs) + 1;
    }
  }
  return ordering;
}

void DimOrdering::validate() const {
  std::vector<bool> seen(size(), false);
  for (auto c : storage_to_canonical) {
    if (c >= size() || seen[c]) throw ShapeError("dimension ordering is not a permutation");
    seen[c] = true;
  }
}

std::vector<double> to_canonical(std::span<const double> v, const DimOrdering& ordering) {
  if (v.size() != ordering.size()) {
    throw ShapeError(fmt::format("ordering has {} entries, vector has {}", ordering.size(), v.size()));
  }
  std::vector<double> out(v.size());
  for (std::size_t k = 0; k < v.size(); ++k) out[ordering.storage_to_canonical[k]] = v[k];
  return out;
}

std::vector<double> from_canonical(std::span<const double> v, const DimOrdering& ordering) {
  if (v.size() != ordering.size()) {
    throw ShapeError(fmt::format("ordering has {} entries, vector has {}", ordering.size(), v.size()));
  }
  std::vector<double> out(v.size());
  for (std::size_t k = 0; k < v.size(); ++k) out[k] = v[ordering.storage_to_canonical[k]];
  return out;
}

RopeTable::RopeTable(const RopeConfig& config) : config_(config), thetas_(frequencies(config)) {
  const auto positions = static_cast<std::size_t>(config.max_position);
  cos_.resize(positions * config.pairs);
  sin_.resize(positions * config.pairs);
  for (std::size_t m = 0; m < positions; ++m) {
    for (std::size_t i = 0; i < config.pairs; ++i) {
      const double angle = static_cast<double>(static_cast<std::int64_t>(m)) * thetas_[i];
      cos_[m * config.pairs + i] = std::cos(angle);
      sin_[m * config.pairs + i] = std::sin(angle);
    }
  }
}

void RopeTable::rotate_into(std::span<const double> v, std::int64_t m, int sign,
                            std::span<double> out) const {
  if (m < 0 || m >= config_.max_position) {
    rotate_signed_into(v, sign * m, thetas_, config_, out);
    return;
  }
  const std::size_t base = static_cast<std::size_t>(m) * config_.pairs;
  const double sgn = sign >= 0 ? 1.0 : -1.0;
  for (std::size_t i = 0; i < config_.pairs; ++i) {
    const auto [a, b] = pair_indices(config_, i);
    const double c = cos_[base + i];
    const double s = sgn * sin_[base + i];
    const double x = v[a];
    const double y = v[b];
    out[a] = c * x - s * y;
    out[b] = s * x + c * y;
  }
}

}  // namespace rope_probe
