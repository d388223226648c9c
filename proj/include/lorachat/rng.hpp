// Copyright (c) 2026 lorachat contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string_view>
#include <vector>

namespace lorachat {

namespace detail {

inline constexpr std::uint64_t kSplitMixGamma = 0x9E3779B97F4A7C15ULL;

inline constexpr std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace detail

/// FNV-1a over raw bytes; used for config hashes and frozen-weight checksums.
inline std::uint64_t fnv1a64(std::span<const std::byte> bytes) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (std::byte b : bytes) {
        h ^= static_cast<std::uint64_t>(b);
        h *= 0x100000001B3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(std::string_view text) {
    return fnv1a64(std::as_bytes(std::span(text.data(), text.size())));
}

template <class T>
std::uint64_t fnv1a64_values(std::span<const T> values) {
    return fnv1a64(std::as_bytes(values));
}

/// splitmix64: 64-bit integer-state generator. All randomness in the library
/// flows through this type so that seeded runs reproduce across platforms.
/// Streams are splittable: `split(tag)` derives an independent child stream
/// without advancing the parent.
class SplitMix64 {
  public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        state_ += detail::kSplitMixGamma;
        return detail::mix64(state_);
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    double next_double() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    /// Uniform in (0, 1]; safe as a log() argument.
    double next_open() { return static_cast<double>((next() >> 11) + 1) * 0x1.0p-53; }

    /// Uniform integer in [0, n). Lemire multiply-shift; n must be > 0.
    std::uint64_t next_below(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next()) * static_cast<unsigned __int128>(n)) >> 64);
    }

    /// One Gaussian draw via Box-Muller. Consumes exactly two uniforms per
    /// call, so the stream position stays predictable.
    double normal(double mean = 0.0, double stddev = 1.0) {
        const double u1 = next_open();
        const double u2 = next_double();
        const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
        return mean + stddev * z;
    }

    /// Child stream keyed by `tag`; independent of `next()` calls on *this.
    SplitMix64 split(std::uint64_t tag) const {
        return SplitMix64(detail::mix64(state_ ^ detail::mix64(tag + detail::kSplitMixGamma)));
    }

    std::uint64_t state() const { return state_; }

  private:
    std::uint64_t state_;
};

/// In-place Fisher-Yates shuffle driven by a SplitMix64 stream.
template <class T>
void shuffle(std::vector<T>& items, SplitMix64& rng) {
    for (std::size_t i = items.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.next_below(i));
        std::swap(items[i - 1], items[j]);
    }
}

}  // namespace lorachat
