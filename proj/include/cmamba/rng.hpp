#pragma once

#include <cstdint>
#include <vector>

namespace cmamba {

// Deterministic counter-based generator (SplitMix64 stream) with Box-Muller
// normal sampling. The same (seed, stream) pair always reproduces the same
// draw sequence; child generators give independent streams for workers.
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

    std::uint64_t next_u64();
    double uniform();                       // [0, 1)
    double uniform(double lo, double hi);
    double normal();                        // N(0, 1)
    double normal(double mean, double stddev);
    std::uint64_t below(std::uint64_t n);   // unbiased draw from [0, n)
    std::vector<std::size_t> permutation(std::size_t n);

    Rng child(std::uint64_t stream) const;

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream() const { return stream_; }

private:
    std::uint64_t seed_ = 0;
    std::uint64_t stream_ = 0;
    std::uint64_t state_ = 0;
    bool has_cached_normal_ = false;
    double cached_normal_ = 0.0;
};

}  // namespace cmamba
