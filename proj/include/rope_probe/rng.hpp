#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace rope_probe {

using Rng = std::mt19937_64;

// Derives an independent sub-seed from a master seed and a label
// (splitmix64 over an FNV-1a hash of the label).
std::uint64_t derive_seed(std::uint64_t master, std::string_view label);
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);

}  // namespace rope_probe
