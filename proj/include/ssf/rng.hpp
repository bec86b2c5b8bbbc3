#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ssf/errors.hpp"

namespace ssf {

// Deterministic RNG used everywhere instead of the std distributions, whose
// output is implementation-defined. All draws are pure functions of the seed
// and the draw sequence.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : gen_(seed), seed_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1) with 53 bits of precision.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n).
    int uniform_int(int n) {
        if (n <= 0) throw ContractError("Rng::uniform_int: n must be positive");
        uint64_t un = static_cast<uint64_t>(n);
        uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        uint64_t v;
        do {
            v = gen_();
        } while (v >= limit);
        return static_cast<int>(v % un);
    }

    // Standard normal via Box-Muller.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // First k elements of a random permutation of {0..n-1}.
    std::vector<int> sample_indices(int n, int k) {
        if (k > n) throw ContractError("Rng::sample_indices: k > n");
        std::vector<int> idx(n);
        for (int i = 0; i < n; ++i) idx[i] = i;
        for (int i = 0; i < k; ++i) {
            int j = i + uniform_int(n - i);
            std::swap(idx[i], idx[j]);
        }
        idx.resize(k);
        return idx;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
            int j = uniform_int(i + 1);
            std::swap(v[i], v[j]);
        }
    }

    // splitmix64 finalizer; used to derive independent streams.
    static uint64_t mix(uint64_t a, uint64_t b) {
        uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Independent stream derived from the construction seed; draws made on
    // this Rng so far do not affect the result.
    Rng split(uint64_t stream) const { return Rng(mix(seed_, stream)); }

    // State round-trips through text (mt19937_64 stream operators are exact).
    std::string serialize() const {
        uint64_t sb;
        std::memcpy(&sb, &spare_, sizeof(sb));
        std::ostringstream os;
        os << seed_ << " " << (has_spare_ ? 1 : 0) << " " << sb << " " << gen_;
        return os.str();
    }

    void deserialize(const std::string& s) {
        std::istringstream is(s);
        int hs = 0;
        uint64_t sb = 0;
        is >> seed_ >> hs >> sb >> gen_;
        if (!is) throw IoError("Rng::deserialize: malformed state string");
        has_spare_ = hs != 0;
        std::memcpy(&spare_, &sb, sizeof(spare_));
    }

private:
    std::mt19937_64 gen_;
    uint64_t seed_ = 0;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace ssf
