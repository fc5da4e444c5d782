#pragma once

#include <cstdint>

namespace memgauge {

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/// Independent sub-streams of one master seed.
enum class SeedStream : std::uint64_t {
    masks = 1,
    trial = 2,
    init = 3,
    shuffle = 4,
    reference = 5,
    data = 6,
    distill = 7,
};

/// seed' = mix64(mix64(master ^ mix64(stream)) + index). Trial k of a run uses
/// derive_seed(master, SeedStream::trial, k), so any trial can be reproduced on its own.
constexpr std::uint64_t derive_seed(std::uint64_t master, SeedStream stream, std::uint64_t index = 0) noexcept {
    return mix64(mix64(master ^ mix64(static_cast<std::uint64_t>(stream))) + index);
}

} // namespace memgauge
