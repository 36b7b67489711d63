#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace talk3d {

[[noreturn]] inline void fail(const std::string& msg) {
    throw std::runtime_error(msg);
}

#define T3D_REQUIRE(cond, msg)          \
    do {                                \
        if (!(cond)) ::talk3d::fail(msg); \
    } while (0)

/// Worker count used by all parallel kernels. Reads TALK3D_THREADS once;
/// defaults to the hardware concurrency (capped at 16).
int thread_count();

namespace detail {
/// Runs fn(t) for t in [0, nthreads) across the persistent pool; blocks until
/// all return. Exceptions from workers are rethrown in the caller.
void pool_dispatch(int nthreads, const std::function<void(int)>& fn);
}  // namespace detail

/// Runs body(lo, hi) over a deterministic static partition of [0, n).
/// Small ranges stay on the calling thread.
template <class F>
void parallel_for(std::int64_t n, F&& body) {
    if (n <= 0) return;
    const int nt = thread_count();
    if (nt <= 1 || n < 4096) {
        body(std::int64_t{0}, n);
        return;
    }
    const std::int64_t chunk = (n + nt - 1) / nt;
    detail::pool_dispatch(nt, [&](int t) {
        const std::int64_t lo = std::int64_t{t} * chunk;
        const std::int64_t hi = std::min(n, lo + chunk);
        if (lo < hi) body(lo, hi);
    });
}

// ---------------------------------------------------------------------------
// Deterministic RNG. splitmix64 streams so that results do not depend on any
// library's distribution internals.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
    return splitmix64(a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2)));
}

/// Uniform double in [0,1) from a counter-based stream; independent of
/// threading and call order.
inline double hash01(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    const std::uint64_t h = splitmix64(hash_combine(hash_combine(seed, a), b));
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

struct Rng {
    std::uint64_t state;

    explicit Rng(std::uint64_t seed) : state(seed) {}

    std::uint64_t next_u64() {
        state += 0x9e3779b97f4a7c15ull;
        std::uint64_t z = state;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    /// Uniform in [0,1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller.
    double normal() {
        const double u1 = 1.0 - uniform();  // (0,1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Integer in [0, n).
    std::int64_t index(std::int64_t n) {
        return static_cast<std::int64_t>(next_u64() % static_cast<std::uint64_t>(n));
    }
};

// ---------------------------------------------------------------------------
// Branch-free double-precision exp (Cephes rational approximation, <1 ulp on
// the clamped range). The hot paths (activations, compositing) evaluate it
// tens of millions of times per step, and unlike libm calls it vectorizes.
// ---------------------------------------------------------------------------
inline double fast_exp(double x) {
    constexpr double kMax = 708.0, kMin = -708.0;
    x = x > kMax ? kMax : x;
    x = x < kMin ? kMin : x;

    constexpr double log2e = 1.4426950408889634073599;
    constexpr double c1 = 6.93145751953125e-1;         // ln2 hi
    constexpr double c2 = 1.42860682030941723212e-6;   // ln2 lo
    constexpr double round_magic = 6755399441055744.0;  // 2^52 + 2^51
    const double n = (x * log2e + round_magic) - round_magic;
    const double r = (x - n * c1) - n * c2;
    const double rr = r * r;

    double px = 1.26177193074810590878e-4;
    px = px * rr + 3.02994407707441961300e-2;
    px = px * rr + 9.99999999999999999910e-1;
    px *= r;
    double qx = 3.00198505138664455042e-6;
    qx = qx * rr + 2.52448340349684104192e-3;
    qx = qx * rr + 2.27265548208155028766e-1;
    qx = qx * rr + 2.0;
    const double e = 1.0 + 2.0 * (px / (qx - px));

    // 2^n as a product of two halves so +-708 stays in finite exponent range
    const auto ni = static_cast<std::int64_t>(n);
    const std::int64_t n1 = ni >> 1;
    const std::int64_t n2 = ni - n1;
    const double s1 = std::bit_cast<double>(static_cast<std::uint64_t>(n1 + 1023) << 52);
    const double s2 = std::bit_cast<double>(static_cast<std::uint64_t>(n2 + 1023) << 52);
    return e * s1 * s2;
}

inline double fast_sigmoid(double x) { return 1.0 / (1.0 + fast_exp(-x)); }

inline std::uint64_t fnv1a64(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

}  // namespace talk3d
