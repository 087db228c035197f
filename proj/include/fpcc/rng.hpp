// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace fpcc {

using Rng = std::mt19937_64;

/// Seed of the named child stream of `master`. Streams with different names
/// are decorrelated, so toggling one consumer never shifts another's draws.
std::uint64_t derive_seed(std::uint64_t master, std::string_view stream);

inline Rng make_rng(std::uint64_t master, std::string_view stream) {
  return Rng(derive_seed(master, stream));
}

}  // namespace fpcc
