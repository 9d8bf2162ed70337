#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace rfm {

/// Seeded random stream. Every distribution object is constructed fresh per
/// draw so the engine state alone captures the stream position, which keeps
/// checkpointed training resumable bit-for-bit.
class Rng {
   public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    /// Uniform on [0, 1); consumes exactly one engine output.
    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

    /// Uniform on the open interval (0, 1).
    double uniform_open() {
        for (;;) {
            const double u = uniform();
            if (u > 0.0) return u;
        }
    }

    double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }

    /// Normal truncated to [-2, 2] standard deviations, scaled by `stddev`.
    double truncated_normal(double stddev) {
        for (;;) {
            const double z = normal();
            if (std::abs(z) <= 2.0) return z * stddev;
        }
    }

    std::uint64_t next_u64() { return engine_(); }

    std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }

    void discard(unsigned long long n) { engine_.discard(n); }

    std::string state() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }

    void set_state(const std::string& s) {
        std::istringstream is(s);
        is >> engine_;
    }

    bool operator==(const Rng& other) const { return engine_ == other.engine_; }

    template <Real T>
    Tensor<T> randn(Shape shape, double stddev = 1.0) {
        std::vector<T> v(numel(shape));
        for (T& x : v) x = static_cast<T>(normal() * stddev);
        return Tensor<T>(std::move(shape), std::move(v));
    }

   private:
    std::mt19937_64 engine_;
};

/// SplitMix64 finalizer; derives independent seeds from (seed, index).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace rfm
