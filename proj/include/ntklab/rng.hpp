#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace ntklab {

namespace detail {

// splitmix64 finalizer: full-avalanche 64-bit mix.
inline std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace detail

// Counter-based generator: output i of stream (seed, stream) is a pure integer
// function mix(key(seed, stream) + i*gamma), so identical (seed, stream) gives a
// bit-identical u64 sequence on any platform, streams can be handed to
// independent workers without sequence coupling, and forking never perturbs the
// parent. No libm is involved until the Gaussian layer.
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
        : key_(detail::mix64(detail::mix64(seed ^ 0x5851F42D4C957F2DULL) ^ stream)),
          counter_(0) {}

    // Child generator for substream `id`; decoupled from this generator's state.
    Rng fork(std::uint64_t id) const {
        Rng child(0, 0);
        child.key_ = detail::mix64(key_ ^ detail::mix64(id ^ 0xD6E8FEB86659FD93ULL));
        child.counter_ = 0;
        return child;
    }

    std::uint64_t next_u64() {
        return detail::mix64(key_ + (counter_++) * 0x9E3779B97F4A7C15ULL);
    }

    // Uniform on [2^-54, 1): strictly positive so log() below is always finite.
    double uniform01() {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    // Box-Muller pair; one value returned, its partner cached.
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = uniform01();
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    double rademacher() { return (next_u64() >> 63) ? 1.0 : -1.0; }

private:
    std::uint64_t key_;
    std::uint64_t counter_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

inline std::vector<double> sample_gaussian_vector(Rng& rng, std::size_t dim) {
    std::vector<double> v(dim);
    for (double& x : v) x = rng.gaussian();
    return v;
}

inline std::vector<double> sample_rademacher(Rng& rng, std::size_t count) {
    std::vector<double> v(count);
    for (double& x : v) x = rng.rademacher();
    return v;
}

}  // namespace ntklab
