#pragma once

// Seeded, splittable random streams.
//
// Algorithm (reproducible across implementations):
//   engine        std::mt19937_64 seeded with a single 64-bit value
//   split(name,i) child seed = splitmix64(seed ^ fnv1a64(name) ^ splitmix64(i + 1))
//   uniform()     (next() >> 11) * 2^-53, in [0, 1)
//   below(n)      rejection sampling of next() % n below the largest multiple of n
//   normal()      Box-Muller on two fresh uniforms, cosine branch only
//   shuffle       Fisher-Yates from the back, swapping i with below(i + 1)
// The std <random> distributions are implementation-defined and are not used.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string_view>
#include <utility>

namespace pyreid {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline constexpr std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xCBF29CE484222325ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

    std::uint64_t seed() const noexcept { return seed_; }

    // Independent stream identified by (this seed, name, index); does not
    // advance this generator.
    Rng split(std::string_view name, std::uint64_t index = 0) const {
        return Rng(splitmix64(seed_ ^ fnv1a64(name) ^ splitmix64(index + 1)));
    }

    std::uint64_t next() { return engine_(); }

    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = n == 0 ? 0 : (~std::uint64_t{0} - (~std::uint64_t{0} % n + 1) % n);
        for (;;) {
            const std::uint64_t x = next();
            if (x <= limit) return x % n;
        }
    }

    double normal() {
        const double u1 = 1.0 - uniform(); // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    template <typename U>
    void shuffle(std::span<U> xs) {
        for (std::size_t i = xs.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(xs[i - 1], xs[j]);
        }
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

} // namespace pyreid
