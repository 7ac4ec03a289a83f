#pragma once

#include <cmath>
#include <cstdint>

namespace clusterpolicy {

// Counter-derived random streams. A root seed spawns independent child
// streams by index, so work split across threads draws exactly the same
// numbers as a serial run. The generator itself is splitmix64, which is
// plenty for Monte-Carlo use and keeps every draw platform-independent
// (no std::normal_distribution, whose output differs across standard
// library implementations).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), state_(seed) {}

    /// Independent stream derived from this stream's seed and an index.
    Rng child(std::uint64_t index) const {
        std::uint64_t s = seed_ ^ (0x9e3779b97f4a7c15ULL * (index + 1));
        s = mix(s);
        s = mix(s);
        return Rng(s);
    }

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        return mix_value(state_);
    }

    /// Uniform on [0, 1).
    double uniform01() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    /// Uniform on (0, 1].
    double uniform01_open_low() { return 1.0 - uniform01(); }

    /// Standard normal via Box-Muller (one draw kept, no cached state).
    double normal() {
        double u1 = uniform01_open_low();
        double u2 = uniform01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }

    int bernoulli(double p) { return uniform01() < p ? 1 : 0; }

    /// Uniform integer in [0, n).
    std::uint64_t uniform_index(std::uint64_t n) { return next_u64() % n; }

    std::uint64_t seed() const { return seed_; }

private:
    static std::uint64_t mix_value(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }
    static std::uint64_t mix(std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        return mix_value(z);
    }

    std::uint64_t seed_;
    std::uint64_t state_;
};

}  // namespace clusterpolicy
