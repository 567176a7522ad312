#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace massl {

/// SplitMix64: a 64-bit counter-based generator (Steele, Lea, Flood 2014).
///
/// The state is a Weyl counter advanced by a fixed odd constant; each output
/// is a bijective mix of the counter. The standard library distributions are
/// implementation-defined, so every draw used by this project goes through
/// the helpers below to keep datasets and runs byte-identical across
/// platforms and compilers.
class SplitMix64 {
  public:
    explicit SplitMix64(std::uint64_t seed = 0) : state_(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). Rejection sampling removes modulo bias.
    std::uint64_t below(std::uint64_t n) {
        if (n <= 1) return 0;
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t r;
        do {
            r = next();
        } while (r >= limit);
        return r % n;
    }

    /// Standard normal via Box-Muller (one value per call; the pair's twin is discarded).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Independent child stream; used to give each sample / run its own generator.
    SplitMix64 fork(std::uint64_t salt) {
        SplitMix64 mixer(next() ^ (salt * 0xD1B54A32D192ED03ULL));
        return SplitMix64(mixer.next());
    }

  private:
    std::uint64_t state_;
};

/// Derive a seed for stream `index` of a root seed without consuming a generator.
inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t index) {
    SplitMix64 g(root ^ (index * 0x9E3779B97F4A7C15ULL + 0x632BE59BD9B4E019ULL));
    g.next();
    return g.next();
}

/// In-place Fisher-Yates shuffle.
template <typename Vec>
void shuffle(Vec& v, SplitMix64& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.below(i));
        using std::swap;
        swap(v[i - 1], v[j]);
    }
}

}  // namespace massl
