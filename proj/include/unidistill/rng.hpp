#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace unidistill {

// Counter-based 64-bit generator.
//
// A stream is identified by a key derived from (seed, purpose):
//     key = splitmix64(seed ^ fnv1a64(purpose))
// and the n-th raw draw is splitmix64(key + n * 0x9E3779B97F4A7C15).
// Draws depend only on (seed, purpose, n), so independent purposes
// ("teacher", "latent", "time", ...) never share state and any draw can be
// reproduced without replaying the others.
inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

inline constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ull;
    }
    return h;
}

inline constexpr std::uint64_t stream_key(std::uint64_t seed, std::string_view purpose) noexcept {
    return splitmix64(seed ^ fnv1a64(purpose));
}

class CounterRng {
public:
    CounterRng() = default;
    CounterRng(std::uint64_t seed, std::string_view purpose) : key_(stream_key(seed, purpose)) {}

    std::uint64_t next_u64() noexcept {
        return splitmix64(key_ + (counter_++) * 0x9E3779B97F4A7C15ull);
    }

    // Uniform on [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform on (0, 1), safe for log().
    double uniform_open() noexcept { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    // Box-Muller; the sine branch is cached so each pair of uniforms yields two normals.
    double normal() noexcept {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform_open();
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * std::numbers::pi * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

    std::uint64_t key() const noexcept { return key_; }
    std::uint64_t counter() const noexcept { return counter_; }

private:
    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace unidistill
