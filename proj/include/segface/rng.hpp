#pragma once

#include <cstdint>

namespace segface {

// SplitMix64 mixing function. All randomness in the artifact flows through
// this so that datasets, initialization and training are reproducible
// bit-for-bit across runs, independent of platform library RNGs.
inline uint64_t mix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline uint64_t hash2(uint64_t a, uint64_t b) {
    return mix64(a ^ mix64(b));
}

inline uint64_t hash3(uint64_t a, uint64_t b, uint64_t c) {
    return mix64(a ^ mix64(b ^ mix64(c)));
}

inline uint64_t hash4(uint64_t a, uint64_t b, uint64_t c, uint64_t d) {
    return mix64(a ^ mix64(b ^ mix64(c ^ mix64(d))));
}

// Uniform double in [0, 1) from the top 53 bits.
inline double unit_double(uint64_t r) {
    return static_cast<double>(r >> 11) * 0x1.0p-53;
}

class Rng {
public:
    explicit Rng(uint64_t seed = 0) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // [0, 1)
    double uniform() { return unit_double(next_u64()); }

    // [lo, hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n); unbiased multiply-shift reduction
    uint64_t uniform_index(uint64_t n) {
        return static_cast<uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
    }

    uint64_t state() const { return state_; }
    void set_state(uint64_t s) { state_ = s; }

private:
    uint64_t state_;
};

template <typename Container>
void shuffle(Container& c, Rng& rng) {
    for (size_t i = c.size(); i > 1; --i) {
        size_t j = static_cast<size_t>(rng.uniform_index(i));
        std::swap(c[i - 1], c[j]);
    }
}

}  // namespace segface
