#include "cmamba/mixup.hpp"

#include <stdexcept>

namespace cmamba {

std::string to_string(MixupMode m) {
    switch (m) {
        case MixupMode::channel: return "channel";
        case MixupMode::vanilla_sample: return "vanilla_sample";
        case MixupMode::off: return "off";
    }
    return "?";
}

MixupMode mixup_mode_from_string(const std::string& s) {
    if (s == "channel") return MixupMode::channel;
    if (s == "vanilla_sample") return MixupMode::vanilla_sample;
    if (s == "off") return MixupMode::off;
    throw std::invalid_argument("unknown mixup mode '" + s + "'");
}

void MixupConfig::validate() const {
    if (sigma < 0.0) throw std::invalid_argument("mixup: sigma must be >= 0");
}

void channel_mixup_apply(double* x, std::size_t rows_x, double* y, std::size_t rows_y,
                         std::size_t v, const std::vector<std::size_t>& perm,
                         const std::vector<double>& lambda) {
    if (perm.size() != v || lambda.size() != v) {
        throw std::invalid_argument("channel mixup: perm/lambda size must equal channel count");
    }
    // mix against the original values, so evaluation order cannot matter
    std::vector<double> row(v);
    for (std::size_t r = 0; r < rows_x; ++r) {
        double* xr = x + r * v;
        std::copy(xr, xr + v, row.begin());
        for (std::size_t c = 0; c < v; ++c) xr[c] = row[c] + lambda[c] * row[perm[c]];
    }
    for (std::size_t r = 0; r < rows_y; ++r) {
        double* yr = y + r * v;
        std::copy(yr, yr + v, row.begin());
        for (std::size_t c = 0; c < v; ++c) yr[c] = row[c] + lambda[c] * row[perm[c]];
    }
}

std::pair<Tensor, Tensor> channel_mixup(const Tensor& x, const Tensor& y,
                                        const MixupConfig& cfg, Rng& rng) {
    cfg.validate();
    if (!cfg.enabled || cfg.mode != MixupMode::channel) {
        throw std::logic_error("channel_mixup requires an enabled channel-mode config");
    }
    const Shape& sx = x.shape();
    const Shape& sy = y.shape();
    if (sx.size() != 2 || sy.size() != 2 || sx[1] != sy[1]) {
        throw std::invalid_argument("channel mixup: expected (L,V) and (T,V) with equal V, got " +
                                    shape_str(sx) + " and " + shape_str(sy));
    }
    const std::size_t v = sx[1];
    const auto perm = rng.permutation(v);
    std::vector<double> lambda(v);
    for (double& l : lambda) l = rng.normal(0.0, cfg.sigma);

    Tensor xm = x.clone();
    Tensor ym = y.clone();
    channel_mixup_apply(xm.values().data(), sx[0], ym.values().data(), sy[0], v, perm, lambda);
    return {xm, ym};
}

std::pair<Tensor, Tensor> vanilla_mixup(const Tensor& x_i, const Tensor& y_i,
                                        const Tensor& x_j, const Tensor& y_j, double lambda) {
    if (x_i.shape() != x_j.shape() || y_i.shape() != y_j.shape()) {
        throw std::invalid_argument("vanilla mixup: sample shapes must match");
    }
    if (!(lambda >= 0.0 && lambda <= 1.0)) {
        throw std::invalid_argument("vanilla mixup: lambda must lie in [0,1], got " + std::to_string(lambda));
    }
    Tensor xm = x_i.clone();
    Tensor ym = y_i.clone();
    for (std::size_t i = 0; i < xm.size(); ++i) {
        xm.values()[i] = lambda * x_i.values()[i] + (1.0 - lambda) * x_j.values()[i];
    }
    for (std::size_t i = 0; i < ym.size(); ++i) {
        ym.values()[i] = lambda * y_i.values()[i] + (1.0 - lambda) * y_j.values()[i];
    }
    return {xm, ym};
}

Augmenter::Augmenter(MixupConfig cfg, std::uint64_t seed) : cfg_(cfg), rng_(seed, /*stream=*/7) {
    cfg_.validate();
}

void Augmenter::apply(double* x, std::size_t rows_x, double* y, std::size_t rows_y, std::size_t v) {
    if (!cfg_.active()) return;
    if (!training_) throw std::logic_error("augmentation applied at evaluation time");
    ++calls_;
    const auto perm = rng_.permutation(v);
    std::vector<double> lambda(v);
    for (double& l : lambda) l = rng_.normal(0.0, cfg_.sigma);
    channel_mixup_apply(x, rows_x, y, rows_y, v, perm, lambda);
}

void Augmenter::apply(Tensor& x, Tensor& y) {
    const Shape& sx = x.shape();
    const Shape& sy = y.shape();
    if (sx.size() != 2 || sy.size() != 2 || sx[1] != sy[1]) {
        throw std::invalid_argument("augmenter: expected (L,V) and (T,V) with equal V");
    }
    apply(x.values().data(), sx[0], y.values().data(), sy[0], sx[1]);
}

void Augmenter::apply_batch(Tensor& x, Tensor& y) {
    if (!cfg_.active()) return;
    const Shape& sx = x.shape();
    const Shape& sy = y.shape();
    if (sx.size() != 3 || sy.size() != 3 || sx[0] != sy[0] || sx[2] != sy[2]) {
        throw std::invalid_argument("augmenter: expected (B,L,V) and (B,T,V)");
    }
    const std::size_t b = sx[0], l = sx[1], t = sy[1], v = sx[2];
    if (cfg_.mode == MixupMode::channel) {
        for (std::size_t i = 0; i < b; ++i) {
            apply(x.values().data() + i * l * v, l, y.values().data() + i * t * v, t, v);
        }
        return;
    }
    // vanilla_sample: interpolate against a random partner from the original batch
    if (!training_) throw std::logic_error("augmentation applied at evaluation time");
    const std::vector<double> x0 = x.values();
    const std::vector<double> y0 = y.values();
    for (std::size_t i = 0; i < b; ++i) {
        ++calls_;
        const std::size_t j = static_cast<std::size_t>(rng_.below(b));
        const double lambda = rng_.uniform();
        for (std::size_t k = 0; k < l * v; ++k) {
            x.values()[i * l * v + k] = lambda * x0[i * l * v + k] + (1.0 - lambda) * x0[j * l * v + k];
        }
        for (std::size_t k = 0; k < t * v; ++k) {
            y.values()[i * t * v + k] = lambda * y0[i * t * v + k] + (1.0 - lambda) * y0[j * t * v + k];
        }
    }
}

}  // namespace cmamba
