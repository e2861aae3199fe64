#ifndef XMODNET_RNG_HPP
#define XMODNET_RNG_HPP

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

namespace xmodnet {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Seeded generator with hand-rolled distributions. std:: distributions are
/// implementation-defined, so all sampling goes through these to keep runs
/// reproducible across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(splitmix64(seed)) {}

    std::uint64_t next_u64() { return gen_(); }

    /// Uniform in [0, 1).
    double uniform() { return double(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::size_t uniform_index(std::size_t n) {
        // rejection sampling to avoid modulo bias
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v;
        do {
            v = gen_();
        } while (v >= limit);
        return std::size_t(v % n);
    }

    /// Box-Muller.
    double normal(double mean = 0.0, double stddev = 1.0) {
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
        return mean + stddev * z;
    }

    template <typename It>
    void shuffle(It first, It last) {
        const auto n = std::size_t(last - first);
        for (std::size_t i = n; i > 1; --i)
            std::swap(first[i - 1], first[uniform_index(i)]);
    }

    /// k distinct indices from [0, n), in draw order.
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
        std::vector<std::size_t> pool(n);
        for (std::size_t i = 0; i < n; ++i) pool[i] = i;
        std::vector<std::size_t> picked;
        picked.reserve(k);
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t j = i + uniform_index(n - i);
            std::swap(pool[i], pool[j]);
            picked.push_back(pool[i]);
        }
        return picked;
    }

    /// Independent substream derived from (seed, stream), not from evolving
    /// generator state, so substreams do not depend on draw order.
    static Rng for_stream(std::uint64_t seed, std::uint64_t stream) {
        return Rng(splitmix64(seed) ^ splitmix64(stream ^ 0xd1b54a32d192ed03ULL));
    }

private:
    std::mt19937_64 gen_;
};

} // namespace xmodnet

#endif // XMODNET_RNG_HPP
