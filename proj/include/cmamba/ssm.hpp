#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "cmamba/rng.hpp"
#include "cmamba/tensor.hpp"

namespace cmamba {

enum class AMode { feature_specific, feature_independent };
enum class DMode { free, data_dependent };

std::string to_string(AMode m);
std::string to_string(DMode m);
AMode a_mode_from_string(const std::string& s);
DMode d_mode_from_string(const std::string& s);

struct MambaBlockConfig {
    std::size_t d_model = 0;     // embedding width fed to the block
    std::size_t d_state = 16;
    std::size_t expansion = 1;
    bool use_conv = false;
    std::size_t conv_kernel = 4;
    bool use_z_branch = true;
    AMode a_mode = AMode::feature_independent;
    DMode d_mode = DMode::data_dependent;
    std::size_t dt_rank = 0;     // 0 -> ceil(d_inner / 16)

    std::size_t d_inner() const { return d_model * expansion; }
    std::size_t resolved_dt_rank() const {
        return dt_rank > 0 ? dt_rank : (d_inner() + 15) / 16;
    }
    void validate() const;

    // The cited selective-state-space module: conv + z-gate, per-feature
    // state transition, free skip parameter.
    static MambaBlockConfig vanilla(std::size_t d_model, std::size_t d_state = 16);
};

// Learnable state-space parameters of one block. The transition parameter is
// stored as a_log with A = -exp(a_log), keeping A strictly negative.
struct SSMParams {
    Tensor a_log;                // (S) feature-independent, (E,S) feature-specific
    Tensor w_b, w_c;             // input projections (E,S)
    Tensor dt_w1, dt_w2, dt_bias;  // low-rank step-size map (E,R),(R,E),(E)
    Tensor d_free;               // (E) in free mode
    Tensor w_d;                  // (E,E) in data-dependent mode
};

struct MambaBlockParams {
    Tensor in_proj_x;            // (d_model, E)
    Tensor in_proj_z;            // (d_model, E) when the z branch is enabled
    Tensor conv_w, conv_b;       // (E, K), (E) when the conv path is enabled
    SSMParams ssm;
    Tensor out_proj;             // (E, d_model)

    void init(const MambaBlockConfig& cfg, Rng& rng);
    void collect_params(const std::string& prefix,
                        std::vector<std::pair<std::string, Tensor>>& out) const;
    std::size_t a_param_count() const { return ssm.a_log.size(); }
};

// Ordered list of the stages a block's forward pass goes through under a
// given configuration, for wiring assertions.
std::vector<std::string> block_trace(const MambaBlockConfig& cfg);

// Zero-order-hold discretization: abar = exp(dt*A) and
// bbar = (dt*A)^-1 (exp(dt*A) - 1) dt*B, with a series fallback for small
// |dt*A|. A is (S) or (E,S); B is (leading..., S); dt is (leading..., E);
// outputs are (leading..., E, S). Throws std::domain_error when dt <= 0.
std::pair<Tensor, Tensor> discretize(const Tensor& A, const Tensor& B, const Tensor& dt);

namespace detail {

// |z| below this uses the truncated series for (exp(z)-1)/z and its
// derivative, keeping the two branches consistent to ~1e-12 at the switch.
constexpr double kZohSeriesThreshold = 1e-4;

double zoh_phi(double z);    // (exp(z) - 1) / z
double zoh_dphi(double z);   // d/dz of zoh_phi

}  // namespace detail

// Data-dependent recurrence along the token axis, differentiable through all
// five inputs. A: (S) or (E,S); b, c: (B,V,N,S); dt, x: (B,V,N,E). Each
// (batch, channel) lane scans independently; lanes run in parallel but merge
// in fixed order. Throws std::runtime_error naming the token on a non-finite
// state and std::domain_error on non-positive dt.
Tensor selective_scan_core(const Tensor& A, const Tensor& b, const Tensor& c,
                           const Tensor& dt, const Tensor& x);

// Full selective scan of the spec'd block: derives B, C, dt (and D in
// data-dependent mode) from x via the parameter projections, runs the core
// recurrence, and adds the skip term D (.) x.
Tensor selective_scan(const Tensor& x, const SSMParams& params, const MambaBlockConfig& cfg);

// Time-invariant convolution form, the oracle for the scan under
// token-constant parameters. abar, bbar: (E,S); c: (S); d: (E); x: (N,E).
// Pure value computation, never recorded on a tape.
Tensor lti_convolution_reference(const Tensor& x, const Tensor& abar, const Tensor& bbar,
                                 const Tensor& c, const Tensor& d);

// One block: in-projection, optional causal depthwise conv, SiLU, selective
// scan, optional z-gate, out-projection. z_in: (B,V,N,d_model).
Tensor mamba_block_forward(const Tensor& z_in, const MambaBlockConfig& cfg,
                           const MambaBlockParams& params);

// Causal depthwise conv along the token axis (kernel K, left zero padding).
// x: (B,V,N,E); w: (E,K); b: (E).
Tensor causal_depthwise_conv(const Tensor& x, const Tensor& w, const Tensor& b);

}  // namespace cmamba
