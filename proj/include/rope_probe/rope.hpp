#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace rope_probe {

// Which storage indices form rotation pair i (0-based, i < D):
//   adjacent-pairs: (2i, 2i + 1)
//   half-split:     (i, i + D)      -- the layout LLaMA-style code uses
enum class RopeLayout : std::uint8_t { kAdjacentPairs, kHalfSplit };

std::string_view to_string(RopeLayout layout);
RopeLayout parse_layout(std::string_view text);

struct RopeConfig {
  double base = 10000.0;
  std::size_t pairs = 64;  // D; head dimension is 2D
  RopeLayout layout = RopeLayout::kHalfSplit;
  std::int64_t max_position = 2048;

  std::size_t dim() const { return 2 * pairs; }
  void validate() const;
  bool operator==(const RopeConfig&) const = default;
};

// theta_i = base^(-2(i-1)/(2D)), i = 1..D. Strictly decreasing, theta_1 = 1.
std::vector<double> frequencies(const RopeConfig& config);

// Storage indices of rotation pair i.
std::pair<std::size_t, std::size_t> pair_indices(const RopeConfig& config, std::size_t i);

// Rotates v by position m (m >= 0). Positions beyond max_position are
// accepted; query `beyond_max_position` to flag them.
std::vector<double> rotate(std::span<const double> v, std::int64_t m, const RopeConfig& config);
bool beyond_max_position(std::int64_t m, const RopeConfig& config);

// Rotation by a signed offset, i.e. M_delta for delta possibly negative.
// Used for relative rotations and for the transpose M_m^T = M_{-m}.
std::vector<double> rotate_signed(std::span<const double> v, std::int64_t delta,
                                  const RopeConfig& config);
void rotate_signed_into(std::span<const double> v, std::int64_t delta,
                        std::span<const double> thetas, const RopeConfig& config,
                        std::span<double> out);

// rotate(q, m) . rotate(k, n)
double relative_dot(std::span<const double> q, std::span<const double> k, std::int64_t m,
                    std::int64_t n, const RopeConfig& config);

// Permutation from storage index to canonical (frequency-descending,
// adjacent-pair) index.
struct DimOrdering {
  std::vector<std::size_t> storage_to_canonical;

  static DimOrdering for_layout(RopeLayout layout, std::size_t pairs);
  std::size_t size() const { return storage_to_canonical.size(); }
  void validate() const;
};

std::vector<double> to_canonical(std::span<const double> v, const DimOrdering& ordering);
std::vector<double> from_canonical(std::span<const double> v, const DimOrdering& ordering);

// Precomputed cos/sin of m * theta_i for m in [0, max_position).
class RopeTable {
 public:
  explicit RopeTable(const RopeConfig& config);

  const RopeConfig& config() const { return config_; }
  std::span<const double> thetas() const { return thetas_; }

  // out = M_m v (sign = +1) or M_m^T v (sign = -1). Falls back to direct
  // evaluation outside the table.
  void rotate_into(std::span<const double> v, std::int64_t m, int sign, std::span<double> out) const;

 private:
  RopeConfig config_;
  std::vector<double> thetas_;
  std::vector<double> cos_;
  std::vector<double> sin_;
};

}  // namespace rope_probe
