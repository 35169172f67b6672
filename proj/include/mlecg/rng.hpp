#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace mlecg {

// All randomness in the project flows through this wrapper around
// mt19937_64. The engine itself is fully specified by the standard; the
// distributions are hand-rolled here because the std ones are
// implementation-defined, which would break run reproducibility across
// toolchains.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // 53-bit uniform in [0, 1).
    double uniform01() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Box-Muller with a cached spare.
    double normal(double mu = 0.0, double sigma = 1.0) {
        if (has_spare_) {
            has_spare_ = false;
            return mu + sigma * spare_;
        }
        double u1 = uniform01();
        double u2 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return mu + sigma * r * std::cos(a);
    }

    bool bernoulli(double p) { return uniform01() < p; }

    // Unbiased integer in [0, n) via rejection sampling.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) return 0;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x = eng_();
        while (x >= limit) x = eng_();
        return x % n;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Deterministic substream derivation (splitmix64 over seed ^ stream).
    static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
        std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    Rng fork(std::uint64_t stream) { return Rng(derive(eng_(), stream)); }

private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace mlecg
