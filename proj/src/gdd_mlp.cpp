#include "cmamba/gdd_mlp.hpp"

#include <cmath>
#include <stdexcept>

namespace cmamba {

void GddMlpConfig::validate() const {
    if (channels == 0) throw std::invalid_argument("gdd config: channels must be positive");
    if (!(expansion_rate > 0.0)) throw std::invalid_argument("gdd config: expansion rate must be positive");
}

void GddMlpParams::init(const GddMlpConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t v = cfg.channels;
    const std::size_t h = cfg.hidden();
    const double bound = 1.0 / std::sqrt(static_cast<double>(v));
    weight_w1 = Tensor::uniform({v, h}, rng, -bound, bound).set_requires_grad();
    weight_b1 = Tensor({h}, 0.0).set_requires_grad();
    weight_w2 = Tensor({h, v}, 0.0).set_requires_grad();
    weight_b2 = Tensor({v}, 0.0).set_requires_grad();
    bias_w1 = Tensor::uniform({v, h}, rng, -bound, bound).set_requires_grad();
    bias_b1 = Tensor({h}, 0.0).set_requires_grad();
    bias_w2 = Tensor({h, v}, 0.0).set_requires_grad();
    bias_b2 = Tensor({v}, 0.0).set_requires_grad();
}

void GddMlpParams::collect_params(const std::string& prefix,
                                  std::vector<std::pair<std::string, Tensor>>& out) const {
    out.emplace_back(prefix + ".weight_w1", weight_w1);
    out.emplace_back(prefix + ".weight_b1", weight_b1);
    out.emplace_back(prefix + ".weight_w2", weight_w2);
    out.emplace_back(prefix + ".weight_b2", weight_b2);
    out.emplace_back(prefix + ".bias_w1", bias_w1);
    out.emplace_back(prefix + ".bias_b1", bias_b1);
    out.emplace_back(prefix + ".bias_w2", bias_w2);
    out.emplace_back(prefix + ".bias_b2", bias_b2);
}

namespace {

// (B,N,V) -> (B,N,V) through one two-layer network
Tensor two_layer(const Tensor& x, const Tensor& w1, const Tensor& b1,
                 const Tensor& w2, const Tensor& b2) {
    return add(matmul(relu(add(matmul(x, w1), b1)), w2), b2);
}

}  // namespace

Tensor gdd_mlp_forward(const Tensor& h, const GddMlpParams& params) {
    const Shape& s = h.shape();
    if (s.size() != 4) throw std::invalid_argument("gdd_mlp: input must be (B,V,N,E), got " + shape_str(s));
    const std::size_t v = s[1];
    if (params.weight_w1.shape()[0] != v) {
        throw std::invalid_argument("gdd_mlp: input has " + std::to_string(v) + " channels but parameters expect " +
                                    std::to_string(params.weight_w1.shape()[0]));
    }

    Tensor avg = reduce(Reduce::mean, h, 3);  // (B,V,N)
    Tensor mx = reduce(Reduce::max, h, 3);
    // mix along the channel axis, per patch
    Tensor avg_t = transpose(avg, 1, 2);  // (B,N,V)
    Tensor mx_t = transpose(mx, 1, 2);

    Tensor weight = sigmoid(add(two_layer(avg_t, params.weight_w1, params.weight_b1,
                                          params.weight_w2, params.weight_b2),
                                two_layer(mx_t, params.weight_w1, params.weight_b1,
                                          params.weight_w2, params.weight_b2)));
    Tensor bias = sigmoid(add(two_layer(avg_t, params.bias_w1, params.bias_b1,
                                        params.bias_w2, params.bias_b2),
                              two_layer(mx_t, params.bias_w1, params.bias_b1,
                                        params.bias_w2, params.bias_b2)));

    for (double w : weight.values()) {
        if (!(w > 0.0 && w < 1.0)) throw std::runtime_error("gdd_mlp: weight left (0,1)");
    }
    for (double bv : bias.values()) {
        if (!(bv > 0.0 && bv < 1.0)) throw std::runtime_error("gdd_mlp: bias left (0,1)");
    }

    Shape bvn1{s[0], s[1], s[2], 1};
    Tensor w4 = reshape(transpose(weight, 1, 2), bvn1);
    Tensor b4 = reshape(transpose(bias, 1, 2), bvn1);
    return add(mul(w4, h), b4);
}

}  // namespace cmamba
