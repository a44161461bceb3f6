#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace cdfirst {

// mt19937_64 is fully specified by the standard; the transforms below are
// hand-rolled because std::*_distribution output is implementation-defined
// and would break byte-identical reproducibility across toolchains.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : g_(seed) {}

    /// Uniform on [0, 1) with 53-bit resolution.
    double uniform() { return std::ldexp(static_cast<double>(g_() >> 11), -53); }

    double uniform(double a, double b) { return a + (b - a) * uniform(); }

    /// Standard normal via Box-Muller (cosine branch only).
    double normal() {
        double u1 = 1.0 - uniform();  // (0, 1]: keeps the log finite
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    double normal(double mu, double sigma) { return mu + sigma * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

    std::uint64_t next_u64() { return g_(); }

private:
    std::mt19937_64 g_;
};

}  // namespace cdfirst
