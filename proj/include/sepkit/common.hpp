#pragma once

#include <bit>
#include <charconv>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <cmath>
#include <string>

namespace sepkit {

// Shortest decimal form that parses back to the same double; used wherever
// numbers land in text files that must be byte-stable across runs.
inline std::string fmt_double(double x) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, res.ptr);
}

// Round a double to the nearest float32-representable value. Persistent state
// (parameters, optimizer moments, EMA copies) is kept quantized so that the
// float32 checkpoint payload round-trips without loss.
inline double quantize_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 14695981039346656037ull) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ull;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Mixes an id into a seed; used to derive independent per-stream seeds.
inline uint64_t hash_combine(uint64_t seed, uint64_t v) {
    uint64_t x = seed ^ (v + 0x9e3779b97f4a7c15ull + (seed << 6) + (seed >> 2));
    return splitmix64(x);
}

// Distance in representable doubles, for near-exact comparisons.
inline int64_t ulp_diff(double a, double b) {
    if (std::isnan(a) || std::isnan(b)) return INT64_MAX;
    auto ord = [](double v) -> uint64_t {
        uint64_t u = std::bit_cast<uint64_t>(v);
        return (u & 0x8000000000000000ull) ? ~u : u | 0x8000000000000000ull;
    };
    uint64_t x = ord(a), y = ord(b);
    uint64_t d = x > y ? x - y : y - x;
    return d > static_cast<uint64_t>(INT64_MAX) ? INT64_MAX : static_cast<int64_t>(d);
}

}  // namespace sepkit
