#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace mext {

// splitmix64. Self-contained so that streams are bit-identical across
// platforms and standard-library versions; training reproducibility depends
// on it.
inline uint64_t splitmix64(uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline uint64_t mix_u64(uint64_t a, uint64_t b) {
    uint64_t s = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
    return splitmix64(s);
}

inline uint64_t hash_str(std::string_view s) {
    // FNV-1a
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {
        // burn-in so that small seeds diverge immediately
        (void)splitmix64(state_);
    }

    uint64_t next_u64() { return splitmix64(state_); }

    // uniform in [0, 1), 53-bit resolution
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n); n > 0
    uint64_t below(uint64_t n) { return next_u64() % n; }

    int index(int n) { return int(below(uint64_t(n))); }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        // Box-Muller; 1-u keeps the log argument strictly positive
        const double u = 1.0 - uniform();
        const double v = uniform();
        const double r = std::sqrt(-2.0 * std::log(u));
        const double a = 6.283185307179586476925286766559 * v;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // normal(0, sigma) rejected outside +/- 2 sigma
    double truncated_normal(double sigma) {
        for (;;) {
            const double z = normal();
            if (z >= -2.0 && z <= 2.0) return z * sigma;
        }
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = size_t(below(uint64_t(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

    // independent deterministic substream
    Rng fork(std::string_view tag) const { return Rng(mix_u64(state_, hash_str(tag))); }
    Rng fork(uint64_t tag) const { return Rng(mix_u64(state_, tag)); }

private:
    uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace mext
