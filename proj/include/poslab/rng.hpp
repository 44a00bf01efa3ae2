#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace poslab {

// 64-bit FNV-1a, used for substream derivation and content hashing.
inline uint64_t fnv1a64(std::string_view s, uint64_t h = 14695981039346656037ull) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t fnv1a64_bytes(const void* p, size_t n, uint64_t h = 14695981039346656037ull) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// All randomness flows from one root seed through named substreams, so any
// stage (corpus/poison/train/eval) can be re-run in isolation.
inline uint64_t substream_seed(uint64_t root, std::string_view name, uint64_t index = 0) {
    return splitmix64(root ^ fnv1a64(name) ^ (0x6a09e667f3bcc909ull * (index + 1)));
}

class Rng {
  public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    // inclusive bounds
    int uniform_int(int lo, int hi) {
        std::uniform_int_distribution<int> d(lo, hi);
        return d(gen_);
    }
    double uniform_real(double lo = 0.0, double hi = 1.0) {
        std::uniform_real_distribution<double> d(lo, hi);
        return d(gen_);
    }
    double normal(double mean = 0.0, double stddev = 1.0) {
        std::normal_distribution<double> d(mean, stddev);
        return d(gen_);
    }
    // index drawn from an unnormalized nonnegative weight vector
    size_t weighted_index(const std::vector<double>& weights) {
        std::discrete_distribution<size_t> d(weights.begin(), weights.end());
        return d(gen_);
    }
    template <typename T>
    void shuffle(std::vector<T>& v) {
        std::shuffle(v.begin(), v.end(), gen_);
    }
    std::mt19937_64& engine() { return gen_; }

  private:
    std::mt19937_64 gen_;
};

} // namespace poslab
