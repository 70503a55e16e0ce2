#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "fperase/errors.hpp"

namespace fperase {

// The one RNG of the project: splitmix64. Identical seed gives an identical
// stream on every platform, which is what dataset shuffles, DARE masks and
// weight init rely on.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ull;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n).
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n == 0) throw InputError("uniform_int: n must be positive");
        // Rejection sampling keeps the distribution exact and the stream portable.
        const std::uint64_t limit = ~0ull - (~0ull % n);
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Standard normal via Box-Muller; consumes two uniforms per pair, caches one.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    // Fisher-Yates permutation of {0, ..., n-1}.
    std::vector<std::int64_t> permutation(std::int64_t n) {
        std::vector<std::int64_t> p(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
        for (std::int64_t i = n - 1; i > 0; --i) {
            const auto j = static_cast<std::int64_t>(uniform_int(static_cast<std::uint64_t>(i + 1)));
            std::swap(p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>(j)]);
        }
        return p;
    }

    // Uniformly random derangement (no fixed point), by rejection.
    std::vector<std::int64_t> derangement(std::int64_t n) {
        if (n < 2) throw InputError("derangement: needs n >= 2, a single pair cannot be mismatched");
        for (;;) {
            auto p = permutation(n);
            bool fixed = false;
            for (std::int64_t i = 0; i < n; ++i) {
                if (p[static_cast<std::size_t>(i)] == i) {
                    fixed = true;
                    break;
                }
            }
            if (!fixed) return p;
        }
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::int64_t i = static_cast<std::int64_t>(v.size()) - 1; i > 0; --i) {
            const auto j = static_cast<std::int64_t>(uniform_int(static_cast<std::uint64_t>(i + 1)));
            std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
        }
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// Deterministic hash of a byte string built from the splitmix64 mixer.
// Used wherever a stable input -> token mapping is needed.
inline std::uint64_t hash_bytes(const void* data, std::size_t len, std::uint64_t seed = 0) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed ^ 0x9E3779B97F4A7C15ull;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= static_cast<std::uint64_t>(bytes[i]) + 0x9E3779B97F4A7C15ull + (h << 6) + (h >> 2);
        std::uint64_t z = h;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        h = z ^ (z >> 31);
    }
    return h;
}

}  // namespace fperase
