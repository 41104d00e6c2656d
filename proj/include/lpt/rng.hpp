#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>

namespace lpt {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/// Derives a child seed from (parent seed, index). Used everywhere a unit of
/// work (image, batch sample, profile) needs its own rng stream so that
/// results do not depend on scheduling order.
inline std::uint64_t hash64(std::uint64_t seed, std::uint64_t index) {
    return splitmix64(seed ^ (splitmix64(index) + 0x9E3779B97F4A7C15ull));
}

/// Deterministic random source. All distribution mappings are implemented
/// here (not via std:: distributions, whose output is not pinned by the
/// standard) so that sequences are reproducible across toolchains.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1), 53-bit resolution.
    double uniform01() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Uniform integer in [lo, hi); returns lo when lo == hi.
    /// This is the randint convention the crop/resize augmentation relies on.
    std::int64_t randint(std::int64_t lo, std::int64_t hi) {
        if (lo > hi) throw std::invalid_argument("randint: lo > hi");
        if (lo == hi) return lo;
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo);
        return lo + static_cast<std::int64_t>(engine_() % span);
    }

    /// Standard normal via Box-Muller (cosine branch only).
    double normal() {
        double u1 = uniform01();
        double u2 = uniform01();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

private:
    std::mt19937_64 engine_;
};

}  // namespace lpt
