#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "duet/common.hpp"

namespace duet {

// Deterministic xoshiro256++ generator. We own the full bit stream (seeding,
// uniform/normal draws, shuffling) so that identical seeds give identical
// byte streams independent of the standard library in use.
class Rng {
public:
    Rng() : Rng(0x9e3779b97f4a7c15ull) {}

    explicit Rng(uint64_t seed) { reseed(seed); }

    void reseed(uint64_t seed) {
        // splitmix64 expansion of the seed into the four lanes.
        uint64_t x = seed;
        for (auto& lane : s_) {
            x += 0x9e3779b97f4a7c15ull;
            uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
            lane = z ^ (z >> 31);
        }
        has_spare_normal_ = false;
        spare_normal_ = 0.0;
    }

    uint64_t next_u64() {
        const uint64_t result = rotl_(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl_(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Rejection sampling keeps the draw unbiased.
    uint64_t uniform_index(uint64_t n) {
        DUET_CHECK(n > 0, "rng: uniform_index requires n > 0");
        const uint64_t threshold = (0 - n) % n;
        for (;;) {
            const uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    int uniform_int(int lo, int hi_inclusive) {
        DUET_CHECK(hi_inclusive >= lo, "rng: empty integer range");
        return lo + int(uniform_index(uint64_t(hi_inclusive - lo) + 1));
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller with a cached spare; deterministic across platforms.
    double normal() {
        if (has_spare_normal_) {
            has_spare_normal_ = false;
            return spare_normal_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_normal_ = r * std::sin(theta);
        has_spare_normal_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = size_t(uniform_index(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Sample k distinct indices from [0, n); output sorted ascending.
    std::vector<int> sample_indices(int n, int k) {
        DUET_CHECK(k >= 0 && k <= n, "rng: cannot sample ", k, " of ", n);
        std::vector<int> pool(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) pool[size_t(i)] = i;
        for (int i = 0; i < k; ++i) {
            const int j = i + int(uniform_index(uint64_t(n - i)));
            std::swap(pool[size_t(i)], pool[size_t(j)]);
        }
        std::vector<int> out(pool.begin(), pool.begin() + k);
        std::sort(out.begin(), out.end());
        return out;
    }

    // Derive an independent stream (e.g. per worker or per record).
    Rng fork(uint64_t salt) {
        Rng child;
        child.s_ = s_;
        child.s_[0] ^= 0x9e3779b97f4a7c15ull * (salt + 1);
        child.s_[2] ^= 0xd1b54a32d192ed03ull * (salt + 0x632be59bd9b4e019ull);
        child.next_u64();
        child.next_u64();
        child.has_spare_normal_ = false;
        return child;
    }

    // State serialization for bit-exact checkpoint resume.
    std::string serialize() const {
        char buf[4 * 17 + 4];
        std::snprintf(buf, sizeof(buf), "%016llx %016llx %016llx %016llx %d",
                      (unsigned long long)s_[0], (unsigned long long)s_[1],
                      (unsigned long long)s_[2], (unsigned long long)s_[3],
                      has_spare_normal_ ? 1 : 0);
        std::string out(buf);
        if (has_spare_normal_) {
            char fb[40];
            std::snprintf(fb, sizeof(fb), " %a", spare_normal_);
            out += fb;
        }
        return out;
    }

    void deserialize(const std::string& text) {
        unsigned long long a = 0, b = 0, c = 0, d = 0;
        int spare_flag = 0;
        double spare = 0.0;
        const int n = std::sscanf(text.c_str(), "%llx %llx %llx %llx %d %la",
                                  &a, &b, &c, &d, &spare_flag, &spare);
        DUET_CHECK(n >= 5, "rng: malformed serialized state: ", text);
        s_ = {a, b, c, d};
        has_spare_normal_ = spare_flag != 0;
        spare_normal_ = has_spare_normal_ ? spare : 0.0;
        if (has_spare_normal_) DUET_CHECK(n == 6, "rng: missing spare normal in state");
    }

private:
    static uint64_t rotl_(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::array<uint64_t, 4> s_{};
    bool has_spare_normal_ = false;
    double spare_normal_ = 0.0;
};

} // namespace duet
