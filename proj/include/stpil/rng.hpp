#pragma once

#include <cstdint>
#include <vector>

#include "stpil/common.hpp"

namespace stpil {

/// Seedable 64-bit PRNG. The generator is SplitMix64 (Steele, Lea & Flood's
/// mixing constants); the full algorithm is these three lines, so any
/// implementation with the same seed reproduces the stream bit for bit.
/// All stochastic behavior in the library (dropout masks, negative samples,
/// shuffles, initialization) draws from this type and nothing else.
class RngState {
public:
    static constexpr const char* algorithm = "splitmix64";

    explicit RngState(std::uint64_t seed = 0) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1), 53-bit resolution.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    /// Unbiased uniform integer in [0, n). Rejection sampling, no modulo bias.
    std::uint64_t uniform_below(std::uint64_t n) {
        STPIL_REQUIRE(n > 0, "RngState::uniform_below: n must be positive");
        const std::uint64_t threshold = (0 - n) % n;
        for (;;) {
            const std::uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    bool bernoulli(double p) { return next_double() < p; }

    /// Deterministic child stream; `label` separates independent uses
    /// (per-epoch shuffles, per-instance dropout, ...) of one master seed.
    RngState fork(std::uint64_t label) {
        RngState mixer(state_ ^ (0x9e3779b97f4a7c15ULL * (label + 1)));
        return RngState(mixer.next_u64());
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    std::uint64_t state() const { return state_; }

private:
    std::uint64_t state_;
};

}  // namespace stpil
