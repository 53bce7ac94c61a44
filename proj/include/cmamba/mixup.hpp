#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cmamba/rng.hpp"
#include "cmamba/tensor.hpp"

namespace cmamba {

enum class MixupMode { channel, vanilla_sample, off };

std::string to_string(MixupMode m);
MixupMode mixup_mode_from_string(const std::string& s);

struct MixupConfig {
    double sigma = 1.0;  // stddev of the per-channel coefficients
    bool enabled = true;
    MixupMode mode = MixupMode::channel;

    void validate() const;
    bool active() const { return enabled && mode != MixupMode::off; }
};

// Core rule with an injected permutation and coefficient vector:
// x'[:,v] = x[:,v] + lambda[v] * x[:,perm[v]], same (perm, lambda) for y.
// x is rows_x*V, y is rows_y*V, both row-major, updated in place.
void channel_mixup_apply(double* x, std::size_t rows_x, double* y, std::size_t rows_y,
                         std::size_t v, const std::vector<std::size_t>& perm,
                         const std::vector<double>& lambda);

// Draws perm = random permutation of the channels and lambda ~ N(0, sigma^2)
// per channel, then applies the rule above to copies of (x, y).
// x: (L,V), y: (T,V). Requires cfg.enabled with channel mode.
std::pair<Tensor, Tensor> channel_mixup(const Tensor& x, const Tensor& y,
                                        const MixupConfig& cfg, Rng& rng);

// Classic two-sample interpolation baseline, lambda in [0,1].
std::pair<Tensor, Tensor> vanilla_mixup(const Tensor& x_i, const Tensor& y_i,
                                        const Tensor& x_j, const Tensor& y_j, double lambda);

// Owns the generator and tracks the training/evaluation phase; applying the
// augmentation outside training is a contract violation.
class Augmenter {
public:
    Augmenter(MixupConfig cfg, std::uint64_t seed);

    void set_training(bool training) { training_ = training; }
    bool training() const { return training_; }

    // In-place per-sample application on (L,V)/(T,V) blocks; a no-op when the
    // config is inactive. Throws std::logic_error during evaluation.
    void apply(double* x, std::size_t rows_x, double* y, std::size_t rows_y, std::size_t v);
    void apply(Tensor& x, Tensor& y);

    // Batch form on (B,L,V)/(B,T,V): channel mode mixes each sample's
    // channels; vanilla_sample mode interpolates each sample with a randomly
    // drawn partner from the same batch.
    void apply_batch(Tensor& x, Tensor& y);

    std::size_t calls() const { return calls_; }
    const MixupConfig& config() const { return cfg_; }

private:
    MixupConfig cfg_;
    Rng rng_;
    bool training_ = true;
    std::size_t calls_ = 0;
};

}  // namespace cmamba
