#pragma once

// Deterministic RNG used everywhere in this project.  We deliberately avoid
// std::* distributions because their output is implementation-defined; the
// generators below produce identical streams on every platform we build for.
//
// Rng is xoshiro256++ seeded through splitmix64.  Substreams for independent
// work items (one per sequence, per batch slot, ...) are derived by hashing
// the parent seed with the item index, never by sharing a generator.

#include <cstdint>
#include <cmath>
#include <vector>

namespace lexi {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Stable derived seed for a named purpose (data stream, init, codebooks...)
// so unrelated consumers of one master seed never share a stream.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t sm = seed ^ (salt * 0xd1b54a32d192ed03ULL + 0x8bb84b93962eacc9ULL);
    return splitmix64(sm);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& w : s_) w = splitmix64(sm);
        has_gauss_ = false;
        gauss_ = 0.0;
    }

    // Derive an independent substream; stable under reordering of calls.
    static Rng substream(std::uint64_t seed, std::uint64_t index) {
        std::uint64_t sm = seed ^ (0x6a09e667f3bcc909ULL + index * 0x9e3779b97f4a7c15ULL);
        return Rng(splitmix64(sm));
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0,1) with 53 random bits.
    double next_double() {
        return (next_u64() >> 11) * 0x1.0p-53;
    }

    // Unbiased integer in [0, n) by rejection.
    std::uint64_t next_below(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do { x = next_u64(); } while (x >= limit);
        return x % n;
    }

    // Standard normal via Box-Muller; caches the second deviate.
    double next_gauss() {
        if (has_gauss_) {
            has_gauss_ = false;
            return gauss_;
        }
        double u1, u2;
        do { u1 = next_double(); } while (u1 <= 0.0);
        u2 = next_double();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        gauss_ = r * std::sin(a);
        has_gauss_ = true;
        return r * std::cos(a);
    }

    // Index drawn from unnormalised nonnegative weights.
    std::size_t next_categorical(const std::vector<double>& w) {
        double total = 0.0;
        for (double x : w) total += x;
        double u = next_double() * total;
        for (std::size_t i = 0; i + 1 < w.size(); ++i) {
            u -= w[i];
            if (u < 0.0) return i;
        }
        return w.empty() ? 0 : w.size() - 1;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = next_below(i);
            std::swap(v[i - 1], v[j]);
        }
    }

    // Serialisation for checkpoint resume: 4 state words + gauss cache.
    struct State {
        std::uint64_t s[4];
        bool has_gauss;
        double gauss;
    };
    State state() const {
        State st;
        for (int i = 0; i < 4; ++i) st.s[i] = s_[i];
        st.has_gauss = has_gauss_;
        st.gauss = gauss_;
        return st;
    }
    void set_state(const State& st) {
        for (int i = 0; i < 4; ++i) s_[i] = st.s[i];
        has_gauss_ = st.has_gauss;
        gauss_ = st.gauss;
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }
    std::uint64_t s_[4];
    bool has_gauss_;
    double gauss_;
};

} // namespace lexi
