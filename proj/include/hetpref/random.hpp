#pragma once

// Seeded random streams with platform-independent draws. Distributions in
// <random> are implementation-defined, so uniforms are built directly from
// the 64-bit engine output.

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string_view>
#include <utility>
#include <vector>

namespace hetpref {

inline std::uint64_t splitmix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

    /// Independent stream derived from a root seed and a stable name.
    static Rng substream(std::uint64_t root, std::string_view name) {
        std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a over the name
        for (unsigned char c : name) {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
        return Rng(splitmix64(root) ^ h);
    }

    static Rng substream(std::uint64_t root, std::uint64_t index) {
        return Rng(splitmix64(root ^ splitmix64(index + 0x632be59bd9b4e019ULL)));
    }

    std::uint64_t next() { return engine_(); }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n) by rejection sampling.
    std::size_t below(std::size_t n) {
        if (n == 0) throw std::invalid_argument("Rng::below(0)");
        const std::uint64_t bound = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % bound;
        std::uint64_t v;
        do {
            v = engine_();
        } while (v >= limit);
        return static_cast<std::size_t>(v % bound);
    }

    /// k distinct indices from [0, n), in draw order (partial Fisher-Yates).
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
        if (k > n) throw std::invalid_argument("sample larger than population");
        std::vector<std::size_t> pool(n);
        for (std::size_t i = 0; i < n; ++i) pool[i] = i;
        for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + below(n - i)]);
        pool.resize(k);
        return pool;
    }

    /// Standard normal via Box-Muller.
    double normal() {
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace hetpref
