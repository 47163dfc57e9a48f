#pragma once

#include <cstdint>
#include <cmath>
#include <numbers>
#include <random>
#include <utility>

namespace qrnn {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

// Deterministic random source backed by std::mt19937_64 (the generator the
// standard pins down bit-for-bit). Variate transforms are implemented here
// rather than through std::*_distribution, which is not portable across
// standard libraries.
//
// Streams for distinct purposes derive from the master seed as
//   stream(tag).seed = splitmix64(seed ^ splitmix64(tag))
// with the tags below fixed across the library.
class Rng {
public:
    static constexpr std::uint64_t kInit = 1;
    static constexpr std::uint64_t kQuantize = 2;
    static constexpr std::uint64_t kShuffle = 3;
    static constexpr std::uint64_t kData = 4;
    static constexpr std::uint64_t kDiagnostics = 5;

    explicit Rng(std::uint64_t seed) : seed_(seed), gen_(splitmix64(seed)) {}

    std::uint64_t seed() const { return seed_; }

    // Derived substream; independent of how much this stream has advanced.
    Rng stream(std::uint64_t tag) const { return Rng(splitmix64(seed_ ^ splitmix64(tag))); }

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return double(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    bool bernoulli(double p) { return uniform() < p; }

    // Standard normal via Box-Muller; the spare value is cached.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform(); // (0, 1]
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Uniform index in [0, n); rejection sampling, no modulo bias.
    std::size_t index(std::size_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % std::uint64_t(n);
        for (;;) {
            const std::uint64_t x = gen_();
            if (x < limit) return std::size_t(x % n);
        }
    }

    // Fisher-Yates shuffle.
    template <typename It>
    void shuffle(It first, It last) {
        const auto n = std::size_t(last - first);
        for (std::size_t i = n; i > 1; --i) {
            const std::size_t j = index(i);
            std::swap(first[i - 1], first[j]);
        }
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

} // namespace qrnn
