#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace omniflux {

// One engine type everywhere so checkpoints can serialize its state.
using Rng = std::mt19937_64;

std::string rng_state(const Rng& rng);
void restore_rng_state(Rng& rng, const std::string& state);

// Independent stream for a (seed, purpose) pair.
Rng derive_rng(std::uint64_t seed, std::uint64_t stream);

double uniform01(Rng& rng);
std::size_t uniform_index(Rng& rng, std::size_t n);

}  // namespace omniflux
