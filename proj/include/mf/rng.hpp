// Counter-based deterministic random streams.
//
// A stream is (key, counter); draw i is a bijective mix of key + i so the
// sequence is reproducible across runs and platforms and never depends on
// how many *other* streams exist.  Child streams derive a fresh key from
// (parent key, label, index) without consuming any parent draws, so adding a
// consumer in one part of the pipeline cannot shift draws elsewhere.
#pragma once

#include "mf/tensor.hpp"

#include <cstdint>
#include <numbers>
#include <string_view>

namespace mf {

namespace detail {
// splitmix64 finalizer (Steele et al.); also used as the key-derivation mixer.
inline uint64_t mix64(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}
inline uint64_t fnv1a(std::string_view s) {
    uint64_t h = 0xCBF29CE484222325ull;
    for (char c : s) {
        h ^= static_cast<uint8_t>(c);
        h *= 0x100000001B3ull;
    }
    return h;
}
constexpr uint64_t kGamma = 0x9E3779B97F4A7C15ull;
}  // namespace detail

class RngStream {
public:
    RngStream() : RngStream(0) {}
    explicit RngStream(uint64_t seed) : key_(detail::mix64(seed ^ detail::kGamma)), ctr_(0) {}

    static RngStream root(uint64_t seed) { return RngStream(seed); }

    // Derived stream; does not advance this stream.
    RngStream child(std::string_view label, uint64_t index = 0) const {
        RngStream s;
        s.key_ = detail::mix64(key_ ^ detail::mix64(detail::fnv1a(label) + index * detail::kGamma));
        s.ctr_ = 0;
        s.have_spare_ = false;
        return s;
    }

    uint64_t next_u64() {
        ++ctr_;
        return detail::mix64(key_ + ctr_ * detail::kGamma);
    }

    // Strictly inside (0, 1): safe under log().
    double uniform01() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // [0, n). Lemire reduction; bias is O(n / 2^64).
    uint64_t uniform_int(uint64_t n) {
        return static_cast<uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform01();
        double u2 = uniform01();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    uint64_t key() const { return key_; }
    uint64_t counter() const { return ctr_; }

private:
    uint64_t key_ = 0;
    uint64_t ctr_ = 0;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

template <class T>
Tensor<T> gaussian_sample(RngStream& rng, std::vector<int64_t> shape) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<T>(rng.normal());
    return t;
}

// In-place Fisher-Yates over an index vector.
template <class I>
void shuffle(std::vector<I>& v, RngStream& rng) {
    for (size_t i = v.size(); i > 1; --i) {
        size_t j = static_cast<size_t>(rng.uniform_int(i));
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace mf
