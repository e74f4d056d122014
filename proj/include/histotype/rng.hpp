#pragma once

// Pinned pseudo-random generation. Every sampling decision in the pipeline
// goes through these types so results are identical across platforms and
// standard libraries.
//
//   SplitMix64   state += 0x9e3779b97f4a7c15, then the Stafford variant 13 mix.
//   Xoshiro256   xoshiro256** 1.0; its 256-bit state is filled by four
//                consecutive SplitMix64 outputs of the seed.
//   below(n)     rejection sampling: draws x until x >= (2^64 - n) mod n,
//                returns x mod n (unbiased).
//   uniform()    top 53 bits of one draw times 2^-53, in [0, 1).
//   shuffle()    Fisher-Yates from the back, j = below(i + 1).

#include <cstdint>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

namespace histotype {

class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    std::uint64_t state_;
};

class Xoshiro256 {
public:
    explicit Xoshiro256(std::uint64_t seed);

    std::uint64_t next();

    /// Uniform integer in [0, n). n must be positive.
    std::uint64_t below(std::uint64_t n);

    /// Uniform double in [0, 1).
    double uniform();

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller (one value per call, no caching).
    double normal();

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            auto j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t s_[4];
};

/// FNV-1a, 64-bit.
std::uint64_t fnv1a64(std::string_view data);

/// Derives an independent seed from a parent seed and a tag (stage name,
/// class name, wsi id...).
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag);

/// Derives the seed of stream `index` of a parent seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

/// k distinct indices of [0, n) chosen uniformly, returned ascending.
std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, Xoshiro256& rng);

}  // namespace histotype
