#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "slimrec/common.hpp"

namespace slimrec {

// Deterministic RNG. All randomness in a run flows from one master seed
// through named sub-streams (init, gumbel, dropout, shuffle, data), so each
// component is reproducible independently of the others. Value generation is
// hand-rolled on top of mt19937_64 rather than <random> distributions, which
// keeps bit-level behaviour identical across standard library versions.
class Rng {
public:
    Rng() : engine_(0) {}
    explicit Rng(uint64_t seed) : engine_(seed) {}

    static uint64_t derive_seed(uint64_t master, const std::string& stream) {
        // FNV-1a over the stream name, mixed with the master seed.
        uint64_t h = 14695981039346656037ull;
        for (char c : stream) {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ull;
        }
        h ^= master + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
        return h;
    }

    static Rng substream(uint64_t master, const std::string& stream) {
        return Rng(derive_seed(master, stream));
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    uint64_t uniform_index(uint64_t n) {
        // Rejection sampling for an unbiased bounded draw.
        uint64_t limit = std::numeric_limits<uint64_t>::max() - std::numeric_limits<uint64_t>::max() % n;
        uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    // Standard Gumbel noise g = -log(-log u), u ~ Uniform(0,1).
    double gumbel() {
        double u = uniform();
        // Keep u away from 0 so the double log stays finite.
        if (u < 1e-300) u = 1e-300;
        return -std::log(-std::log(u));
    }

    std::vector<size_t> permutation(size_t n) {
        std::vector<size_t> p(n);
        std::iota(p.begin(), p.end(), size_t{0});
        for (size_t i = n; i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_index(i));
            std::swap(p[i - 1], p[j]);
        }
        return p;
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace slimrec
