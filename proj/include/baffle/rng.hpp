#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <span>

namespace baffle {

// Counter-based pseudo-random generator.
//
// All randomness in the library is derived from this construction, which makes
// every draw a pure function of (key, counter):
//
//   mix64      : the SplitMix64 finalizer, a bijective 64-bit mixer.
//   derive_seed: folds a list of 64-bit parts into one key by iterated mixing,
//                so independent sub-streams can be keyed by structured tuples
//                like (seed, round, client, step).
//   CounterRng : maps counter i to uniform/gaussian draws. Gaussian draws use
//                Box-Muller on two uniforms, so draws 2j and 2j+1 share one
//                pair of counters.
//
// Random access is the point: a client and the server can regenerate
// perturbation k of round t independently and get bit-identical vectors.

constexpr std::uint64_t mix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts) {
    std::uint64_t h = 0x243F6A8885A308D3ull; // domain constant
    for (std::uint64_t p : parts) h = mix64(h ^ p);
    return h;
}

class CounterRng {
public:
    explicit CounterRng(std::uint64_t key) : key_(key) {}

    std::uint64_t bits(std::uint64_t i) const { return mix64(key_ ^ mix64(i)); }

    // Uniform on (0, 1]; never returns 0 so it is safe under log().
    double uniform(std::uint64_t i) const {
        return (double)((bits(i) >> 11) + 1) * 0x1p-53;
    }

    // i-th standard normal draw.
    double gaussian(std::uint64_t i) const {
        const std::uint64_t j = i / 2;
        const double u1 = uniform(2 * j);
        const double u2 = uniform(2 * j + 1);
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * M_PI * u2;
        return (i % 2 == 0) ? r * std::cos(a) : r * std::sin(a);
    }

    // out[j] = scale * gaussian(offset + j), computed pairwise.
    void fill_gaussian(std::span<double> out, double scale = 1.0,
                       std::uint64_t offset = 0) const {
        std::size_t j = 0;
        while (j < out.size()) {
            const std::uint64_t i = offset + j;
            if (i % 2 == 0 && j + 1 < out.size()) {
                const double u1 = uniform(i);
                const double u2 = uniform(i + 1);
                const double r = std::sqrt(-2.0 * std::log(u1));
                const double a = 2.0 * M_PI * u2;
                out[j] = scale * (r * std::cos(a));
                out[j + 1] = scale * (r * std::sin(a));
                j += 2;
            } else {
                out[j] = scale * gaussian(i);
                ++j;
            }
        }
    }

    std::uint64_t key() const { return key_; }

private:
    std::uint64_t key_;
};

// Sequential convenience wrapper for shuffles and ad-hoc sampling.
class SeqRng {
public:
    explicit SeqRng(std::uint64_t key) : rng_(key) {}

    std::uint64_t next_bits() { return rng_.bits(pos_++); }
    double next_uniform() { return rng_.uniform(pos_++); }
    double next_gaussian() { return rng_.gaussian(2 * pos_++); }

    // Uniform index in [0, n). Modulo bias is ~n/2^64, irrelevant here.
    std::size_t index(std::size_t n) { return (std::size_t)(next_bits() % n); }

    template <typename T>
    void shuffle(std::span<T> v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = index(i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    CounterRng rng_;
    std::uint64_t pos_ = 0;
};

} // namespace baffle
