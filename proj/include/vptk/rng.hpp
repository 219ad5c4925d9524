#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace vptk {

/// Counter-free SplitMix64 stream. Every randomized operation in this
/// library draws from one of these, seeded per sample, so results are
/// independent of scheduling and reproducible across platforms.
///
/// Draw conventions (fixed, relied on by replay):
///   next_u64       advances the state once.
///   next_unit_real = (next_u64 >> 11) * 2^-53, in [0, 1).
///   next_gaussian  consumes two unit reals u1, u2 (in that order) and
///                  returns sqrt(-2 ln(1 - u1)) * cos(2 pi u2).
class SampleRng {
public:
    explicit SampleRng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    double next_unit_real() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double next_gaussian() {
        const double u1 = next_unit_real();
        const double u2 = next_unit_real();
        // 1 - u1 lies in (0, 1], so the log is finite.
        return std::sqrt(-2.0 * std::log(1.0 - u1)) *
               std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    /// Uniform integer in [0, n). Requires n >= 1.
    std::uint64_t next_below(std::uint64_t n) {
        return static_cast<std::uint64_t>(next_unit_real() * static_cast<double>(n));
    }

    std::uint64_t state() const { return state_; }

private:
    std::uint64_t state_;
};

/// FNV-1a 64-bit hash of a byte string. Used to derive per-sample seeds
/// from stable sample identifiers.
inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Deterministic seed for sample `id` under a run-level seed.
inline std::uint64_t sample_seed(std::uint64_t global_seed, std::string_view id) {
    return global_seed ^ fnv1a64(id);
}

/// Mixes two 64-bit values into a fresh seed (used to derive per-iteration
/// perturbation seeds inside training loops).
inline std::uint64_t derive_seed(std::uint64_t a, std::uint64_t b) {
    SampleRng r(a ^ (b * 0xD1B54A32D192ED03ULL));
    return r.next_u64();
}

} // namespace vptk
