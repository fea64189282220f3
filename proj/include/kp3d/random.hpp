#pragma once

// Seeded RNG with a stateless-normal draw so the full generator state is
// exactly the mt19937 state (serializable via stream operators).

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace kp3d {

class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : gen_(static_cast<std::mt19937::result_type>(seed)) {}

    double uniform(double lo = 0.0, double hi = 1.0) {
        // 53-bit mantissa draw, independent of distribution implementations
        std::uint64_t a = gen_() >> 5, b = gen_() >> 6;
        double u = (a * 67108864.0 + b) / 9007199254740992.0;
        return lo + u * (hi - lo);
    }

    int uniform_int(int lo, int hi) {  // inclusive range
        return lo + static_cast<int>(uniform(0.0, 1.0) * (hi - lo + 1)) % (hi - lo + 1);
    }

    // Box-Muller without spare caching.
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
        return mean + stddev * z;
    }

    std::uint64_t next_seed() { return (static_cast<std::uint64_t>(gen_()) << 32) | gen_(); }

    std::string serialize() const {
        std::ostringstream os;
        os << gen_;
        return os.str();
    }

    void deserialize(const std::string& s) {
        std::istringstream is(s);
        is >> gen_;
    }

    std::mt19937& engine() { return gen_; }

private:
    std::mt19937 gen_;
};

}  // namespace kp3d
