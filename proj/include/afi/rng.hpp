#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "afi/errors.hpp"

namespace afi {

// Deterministic RNG. mt19937 output is pinned by the standard; the
// distributions below are hand-rolled because the std:: distribution
// algorithms are implementation-defined and would break bit-level replay.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : engine_(static_cast<uint32_t>(seed ^ (seed >> 32))) {}

    uint32_t next_u32() { return engine_(); }

    // Uniform in [0, 1) with 32 random bits.
    double uniform() { return next_u32() * (1.0 / 4294967296.0); }

    // Uniform integer in [0, n), n >= 1.
    uint32_t uniform_int(uint32_t n) {
        check_config(n >= 1, "Rng::uniform_int: n must be >= 1");
        // Rejection sampling keeps the distribution exact.
        const uint32_t limit = UINT32_MAX - (UINT32_MAX % n);
        uint32_t v = next_u32();
        while (v >= limit) v = next_u32();
        return v % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Standard normal via Box-Muller (the cached second value keeps draws
    // reproducible as a pure function of the engine stream).
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(theta);
        has_cached_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    std::string serialize() const {
        std::ostringstream os;
        os << engine_ << ' ' << (has_cached_ ? 1 : 0) << ' ';
        os.precision(17);
        os << cached_;
        return os.str();
    }

    static Rng deserialize(const std::string& text) {
        Rng rng;
        std::istringstream is(text);
        int flag = 0;
        is >> rng.engine_ >> flag >> rng.cached_;
        check_data(!is.fail(), "Rng::deserialize: malformed state string");
        rng.has_cached_ = flag != 0;
        return rng;
    }

private:
    std::mt19937 engine_;
    bool has_cached_ = false;
    double cached_ = 0.0;
};

}  // namespace afi
