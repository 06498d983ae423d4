#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace sadkit {

/// mt19937 with hand-rolled distributions so streams are identical across
/// standard libraries.
class Rng {
public:
    explicit Rng(std::uint32_t seed) : gen_(seed) {}

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() {
        const std::uint64_t hi = gen_() >> 6;  // 26 bits
        const std::uint64_t lo = gen_() >> 5;  // 27 bits
        return static_cast<double>((hi << 27) | lo) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * n) % n; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
    }

private:
    std::mt19937 gen_;
};

}  // namespace sadkit
