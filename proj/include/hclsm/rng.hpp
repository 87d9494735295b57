#pragma once

// Counter-based splittable RNG. Every subsystem derives its own stream from
// the root seed, so determinism survives reordering of subsystem calls.
// All draws are explicit bit manipulation (no stdlib distributions), which
// keeps sequences identical across platforms and compilers.

#include <cmath>
#include <cstdint>

namespace hclsm {

inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Named purposes for stream derivation.
enum class RngStream : std::uint64_t {
    worldgen = 1,
    param_init = 2,
    slot_noise = 3,
    gumbel = 4,
    data_order = 5,
    test = 6,
};

class SplitRng {
public:
    explicit SplitRng(std::uint64_t seed) : state_(mix64(seed ^ 0x5851f42d4c957f2dULL)) {}

    static SplitRng from(std::uint64_t root, RngStream stream, std::uint64_t counter = 0) {
        std::uint64_t h = mix64(root);
        h = mix64(h ^ (static_cast<std::uint64_t>(stream) * 0xd6e8feb86659fd93ULL));
        h = mix64(h ^ (counter * 0xa0761d6478bd642fULL));
        return SplitRng(h);
    }

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform in (0, 1]; safe as a log argument.
    double uniform_pos() { return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53; }

    // Box-Muller; consumes exactly two uniforms per call (no cached spare).
    double normal() {
        double u1 = uniform_pos();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    // Standard logistic noise log(u) - log(1-u) for binary-concrete sampling.
    double logistic() {
        double u = uniform_pos();
        if (u >= 1.0) u = 1.0 - 0x1.0p-53;
        return std::log(u) - std::log1p(-u);
    }

    std::size_t index(std::size_t n) { return n ? static_cast<std::size_t>(next_u64() % n) : 0; }

private:
    std::uint64_t state_;
};

}  // namespace hclsm
