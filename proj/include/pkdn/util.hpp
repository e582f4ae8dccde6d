#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace pkdn {

using i64 = std::int64_t;
using u64 = std::uint64_t;

// Deterministic RNG. Normal draws use Box-Muller on top of the raw engine so
// the bit stream does not depend on the standard library's distribution
// implementations.
class Rng {
public:
    explicit Rng(u64 seed) : eng_(seed) {}

    double uniform() {
        // 53-bit mantissa in [0,1)
        return static_cast<double>(eng_() >> 11) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
        return mean + stddev * z;
    }

    u64 next_u64() { return eng_(); }

    // index in [0, n)
    u64 below(u64 n) { return n == 0 ? 0 : eng_() % n; }

    std::mt19937_64& engine() { return eng_; }

private:
    std::mt19937_64 eng_;
};

// splitmix-style mix for deriving independent child seeds
inline u64 mix_seed(u64 seed, u64 salt) {
    u64 z = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

template <class... Args>
std::string cat(Args&&... args) {
    std::ostringstream os;
    (os << ... << args);
    return os.str();
}

}  // namespace pkdn
