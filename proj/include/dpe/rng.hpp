#pragma once

#include <cstdint>
#include <random>

namespace dpe {

using Rng = std::mt19937_64;

// Independent stream derived from (master seed, stream index); replicate i
// of a study uses stream i so results do not depend on scheduling.
inline Rng make_rng(std::uint64_t master_seed, std::uint64_t stream = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(master_seed),
                    static_cast<std::uint32_t>(master_seed >> 32),
                    static_cast<std::uint32_t>(stream),
                    static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

}  // namespace dpe
