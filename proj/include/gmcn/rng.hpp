#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace gmcn {

// Deterministic RNG. mt19937_64 is fully specified by the standard and the
// distributions below are implemented by hand, so identical seeds give
// identical streams on every platform and standard library.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // uniform in [0, 1)
    double uniform() {
        return (gen_() >> 11) * (1.0 / 9007199254740992.0);  // 53 random bits
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // integer in [0, n)
    uint64_t below(uint64_t n) {
        // modulo bias is irrelevant at our scales but cheap to avoid
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v;
        do { v = gen_(); } while (v >= limit);
        return v % n;
    }

    // standard normal via Box-Muller
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
    }

    // independent stream for a work item; splitmix64 over (seed, index)
    static uint64_t derive_seed(uint64_t base, uint64_t index) {
        uint64_t z = base + 0x9e3779b97f4a7c15ull * (index + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

private:
    std::mt19937_64 gen_;
    double spare_ = 0;
    bool have_spare_ = false;
};

}  // namespace gmcn
