#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace escape {

// Deterministic splitmix64 generator. Standard-library distributions are
// implementation-defined, so all draws are produced here to keep datasets,
// checkpoints and rollouts byte-identical across platforms.
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

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n), n > 0. Fixed-point multiply keeps the draw
    // sequence identical everywhere.
    int64_t uniform_int(int64_t n) {
        return static_cast<int64_t>((static_cast<__uint128_t>(next_u64()) * static_cast<uint64_t>(n)) >> 64);
    }

    // Standard normal via Box-Muller; caches the second variate.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // Independent child stream; mixing the label avoids correlated substreams.
    Rng split(uint64_t label) {
        Rng child(next_u64() ^ (label * 0x9E3779B97F4A7C15ULL + 0xD1B54A32D192ED03ULL));
        return child;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
            int64_t j = uniform_int(i + 1);
            std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
        }
    }

private:
    uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace escape
