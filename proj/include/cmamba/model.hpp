#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cmamba/gdd_mlp.hpp"
#include "cmamba/rng.hpp"
#include "cmamba/ssm.hpp"
#include "cmamba/tensor.hpp"

namespace cmamba {

struct ModelConfig {
    std::size_t look_back = 96;   // L
    std::size_t horizon = 96;     // T
    std::size_t channels = 0;     // V
    std::size_t patch_len = 16;   // P
    std::size_t stride = 8;
    std::size_t embed_dim = 128;  // E
    std::size_t num_blocks = 2;   // k
    double dropout = 0.0;
    bool use_gdd = true;
    double gdd_expansion = 1.0;   // r
    MambaBlockConfig block;       // d_model is filled from embed_dim

    std::size_t num_patches() const { return (look_back - patch_len) / stride + 2; }
    void validate() const;
    MambaBlockConfig resolved_block() const;
    GddMlpConfig gdd_config() const { return GddMlpConfig{channels, gdd_expansion}; }
};

// Per-sample, per-channel statistics of the look-back window,
// std = sqrt(var + 1e-5).
struct NormStats {
    Tensor mean;  // (B,V)
    Tensor std;   // (B,V)
};

constexpr double kInstanceNormEps = 1e-5;

// x: (B,L,V) -> z-scored copy plus the stats needed to invert it.
std::pair<Tensor, NormStats> instance_norm(const Tensor& x);

// y: (B,T,V) in normalized units -> original units of the look-back window.
Tensor denormalize(const Tensor& y, const NormStats& stats);

// Splits each channel into overlapping patches: (B,L,V) -> (B,V,N,P).
// The series is right-padded by replicating its last value `stride` times,
// yielding exactly floor((L-P)/stride) + 2 patches.
Tensor patching(const Tensor& x_norm, std::size_t patch_len, std::size_t stride);

struct CMambaBlock {
    MambaBlockParams mamba;
    GddMlpParams gdd;  // left empty when the mixer is disabled
};

class CMambaModel {
public:
    CMambaModel(ModelConfig cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }
    std::size_t parameter_count() const;

    // Patch embedding plus positional term: (B,V,N,P) -> (B,V,N,E).
    Tensor embed(const Tensor& patches, bool training, Rng* dropout_rng) const;
    // Stacked blocks with residual mixing: (B,V,N,E) -> (B,V,N,E).
    Tensor encode(const Tensor& z0, bool training, Rng* dropout_rng) const;
    // Projection head in normalized units: (B,V,N,E) -> (B,T,V).
    Tensor head(const Tensor& zk) const;

    Tensor w_patch;               // (P,E)
    Tensor w_pos;                 // (N,E)
    std::vector<CMambaBlock> blocks;
    Tensor w_head;                // (N*E, T)

private:
    ModelConfig cfg_;
    std::vector<std::pair<std::string, Tensor>> params_;
};

// Full pipeline: instance norm, patching, embedding, encoder, head, denorm.
// x: (B,L,V) -> (B,T,V). Dropout is applied only when training with a
// generator supplied.
Tensor model_forward(const CMambaModel& model, const Tensor& x, bool training, Rng* dropout_rng = nullptr);

// Analytic operation counts (2 FLOPs per multiply-accumulate, 1 per add/mul/
// compare, 1 per transcendental), for one batch at inference.
struct FlopBreakdown {
    double total = 0.0;         // model as configured
    double gdd_module = 0.0;    // pooling + networks + sigmoid + apply
    double gdd_networks = 0.0;  // dense maps of the two networks only
    // cost relative to the same model without the channel mixer
    double increment_ratio() const { return gdd_module / (total - gdd_module); }
};

FlopBreakdown estimate_flops(const ModelConfig& cfg, std::size_t batch);

}  // namespace cmamba
