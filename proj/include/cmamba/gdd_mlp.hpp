#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "cmamba/rng.hpp"
#include "cmamba/tensor.hpp"

namespace cmamba {

struct GddMlpConfig {
    std::size_t channels = 0;      // V
    double expansion_rate = 1.0;   // r; hidden width = max(1, round(r * V))

    std::size_t hidden() const {
        const double h = std::round(expansion_rate * static_cast<double>(channels));
        return h < 1.0 ? 1 : static_cast<std::size_t>(h);
    }
    void validate() const;
};

// Two independent two-layer channel-mixing networks (V -> h -> V, ReLU in
// between). Each network is shared between the average and max descriptors.
// Last layers start at zero so the module opens at the neutral 0.5*h + 0.5.
struct GddMlpParams {
    Tensor weight_w1, weight_b1, weight_w2, weight_b2;  // weight network
    Tensor bias_w1, bias_b1, bias_w2, bias_b2;          // bias network

    void init(const GddMlpConfig& cfg, Rng& rng);
    void collect_params(const std::string& prefix,
                        std::vector<std::pair<std::string, Tensor>>& out) const;
};

// Cross-channel reweighting of patch embeddings. h: (B,V,N,E). Mean and max
// pooling along E produce per-(channel, patch) descriptors; both pass through
// each network and the sigmoid'd sums give a data-dependent weight and bias
// applied as weight (.) h + bias, broadcast along E.
Tensor gdd_mlp_forward(const Tensor& h, const GddMlpParams& params);

}  // namespace cmamba
