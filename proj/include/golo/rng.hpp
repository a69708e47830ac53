#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace golo {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t hash_str(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Derives independent deterministic seeds from one root seed. Every random
// draw in the project flows from a root seed through named streams, e.g.
// derive_seed(root, "data", step, slot).
inline uint64_t derive_seed(uint64_t root, std::string_view stream,
                            uint64_t a = 0, uint64_t b = 0) {
    uint64_t h = splitmix64(root ^ hash_str(stream));
    h = splitmix64(h ^ (a * 0x9e3779b97f4a7c15ULL + 1));
    h = splitmix64(h ^ (b * 0xd1342543de82ef95ULL + 2));
    return h;
}

// mt19937_64 is fully specified by the standard, so sequences are portable;
// the uniform mappings below avoid unspecified std::distribution behavior.
class Rng {
  public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    double uniform() {  // [0, 1)
        return double(gen_() >> 11) * 0x1.0p-53;
    }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    // i in [lo, hi] inclusive
    int64_t uniform_int(int64_t lo, int64_t hi) {
        return lo + int64_t(gen_() % uint64_t(hi - lo + 1));
    }
    bool bernoulli(double p) { return uniform() < p; }
    uint64_t raw() { return gen_(); }

  private:
    std::mt19937_64 gen_;
};

}  // namespace golo
