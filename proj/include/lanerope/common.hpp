#pragma once

// Shared plumbing: error types, a minimal row-major matrix, and the
// counter-based RNG used for reproducible sampling.

#include <cmath>
#include <cstdint>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace lanerope {

// Bad argument or config value. CLI maps this to the usage exit code.
struct invalid_parameter_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// A resource bound was exceeded (context length, cache capacity).
struct budget_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// An internal precondition failed; indicates a bug in the caller.
struct contract_violation_error : std::logic_error {
    using std::logic_error::logic_error;
};

// Malformed input file or record.
struct data_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Training produced a non-finite value.
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dense row-major matrix. Deliberately minimal: the hot loops index the
// flat buffer directly, everything else goes through at().
template <class S>
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<S> v;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * c, S(0)) {}

    S* row(int r) { return v.data() + static_cast<size_t>(r) * cols; }
    const S* row(int r) const { return v.data() + static_cast<size_t>(r) * cols; }
    S& at(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
    const S& at(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }
    size_t size() const { return v.size(); }

    bool operator==(const Mat& o) const { return rows == o.rows && cols == o.cols && v == o.v; }
};

// --- counter-based RNG -----------------------------------------------------
//
// Stateless mixing of a key tuple to a 64-bit word. Any draw is addressable
// by (seed, query, group, lane, step) alone, so a single lane's stream can be
// reproduced without replaying anything else.

namespace rng {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t mix(uint64_t a, uint64_t b) { return splitmix64(splitmix64(a) ^ (b * 0xff51afd7ed558ccdull + 0x2545f4914f6cdd1dull)); }

struct Key {
    uint64_t seed = 0;
    uint64_t query = 0;
    uint64_t group = 0;
    uint64_t lane = 0;
};

inline uint64_t word_at(const Key& k, uint64_t step) {
    uint64_t h = splitmix64(k.seed);
    h = mix(h, k.query);
    h = mix(h, k.group);
    h = mix(h, k.lane);
    h = mix(h, step);
    return h;
}

// Uniform in [0, 1), 53-bit resolution.
inline double uniform_at(const Key& k, uint64_t step) {
    return static_cast<double>(word_at(k, step) >> 11) * 0x1.0p-53;
}

// Small sequential generator for init and data synthesis; same mixer, one
// running counter.
struct Stream {
    Key key;
    uint64_t counter = 0;

    explicit Stream(uint64_t seed) { key.seed = seed; }
    Stream(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
        key.seed = seed;
        key.query = a;
        key.group = b;
        key.lane = c;
    }

    uint64_t next_u64() { return word_at(key, counter++); }
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    // [lo, hi] inclusive.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        return lo + static_cast<int64_t>(uniform() * static_cast<double>(hi - lo + 1));
    }
    double normal() {
        // Box-Muller; burns two words per call, no cached spare (keeps the
        // draw count a pure function of call count).
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        constexpr double two_pi = 6.283185307179586476925286766559;
        double r = std::sqrt(-2.0 * std::log(u1));
        return r * std::cos(two_pi * u2);
    }
};

}  // namespace rng

}  // namespace lanerope
