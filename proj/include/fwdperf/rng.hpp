#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace fwdperf {

// PCG32 (O'Neill). One independent stream per odd increment, so a
// (seed, stream) pair identifies a reproducible sequence without any
// coordination between workers.
class Pcg32 {
public:
    using result_type = std::uint32_t;

    Pcg32(std::uint64_t seed, std::uint64_t stream) : inc_((stream << 1u) | 1u) {
        next();
        state_ += seed;
        next();
    }

    std::uint32_t next() {
        const std::uint64_t old = state_;
        state_ = old * 6364136223846793005ULL + inc_;
        const auto xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
        const auto rot = static_cast<std::uint32_t>(old >> 59u);
        return (xorshifted >> rot) | (xorshifted << ((-rot) & 31u));
    }

    std::uint32_t operator()() { return next(); }
    static constexpr std::uint32_t min() { return 0u; }
    static constexpr std::uint32_t max() { return 0xFFFFFFFFu; }

    // 53-bit uniform on the open interval (0, 1).
    double uniform() {
        const std::uint64_t hi = next() >> 5;  // 27 bits
        const std::uint64_t lo = next() >> 6;  // 26 bits
        const double u = (static_cast<double>((hi << 26) | lo) + 0.5) * 0x1.0p-53;
        return u;
    }

private:
    std::uint64_t state_ = 0;
    std::uint64_t inc_;
};

// SplitMix64 finaliser, used to derive sub-stream identifiers.
constexpr std::uint64_t mix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t derive_stream(std::uint64_t a, std::uint64_t b) {
    return mix64(mix64(a) ^ (b + 0x632BE59BD9B4E019ULL));
}

// Box-Muller producing standard normals in pairs. Written out explicitly
// because std::normal_distribution is not reproducible across standard
// library implementations.
class NormalSource {
public:
    explicit NormalSource(Pcg32 rng) : rng_(rng) {}

    double operator()() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = rng_.uniform();
        const double u2 = rng_.uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

private:
    Pcg32 rng_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace fwdperf
