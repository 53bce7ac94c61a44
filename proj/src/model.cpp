#include "cmamba/model.hpp"

#include <cmath>
#include <stdexcept>

namespace cmamba {

void ModelConfig::validate() const {
    if (channels == 0) throw std::invalid_argument("model config: channels must be positive");
    if (look_back == 0 || horizon == 0) throw std::invalid_argument("model config: look_back and horizon must be positive");
    if (patch_len == 0 || patch_len > look_back) {
        throw std::invalid_argument("model config: patch_len must satisfy 1 <= P <= look_back");
    }
    if (stride == 0 || stride > patch_len) {
        throw std::invalid_argument("model config: stride must satisfy 1 <= stride <= patch_len");
    }
    if (embed_dim == 0) throw std::invalid_argument("model config: embed_dim must be positive");
    if (num_blocks == 0) throw std::invalid_argument("model config: num_blocks must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("model config: dropout must lie in [0,1)");
    if (use_gdd) gdd_config().validate();
    resolved_block().validate();
}

MambaBlockConfig ModelConfig::resolved_block() const {
    MambaBlockConfig b = block;
    b.d_model = embed_dim;
    return b;
}

// ---------------------------------------------------------------------------
// Normalization and patching
// ---------------------------------------------------------------------------

std::pair<Tensor, NormStats> instance_norm(const Tensor& x) {
    const Shape& s = x.shape();
    if (s.size() != 3) throw std::invalid_argument("instance_norm: input must be (B,L,V), got " + shape_str(s));
    const std::size_t b = s[0], l = s[1], v = s[2];
    NormStats stats{Tensor({b, v}), Tensor({b, v})};
    Tensor out(s);
    const auto& xv = x.values();
    auto& mv = stats.mean.values();
    auto& sv = stats.std.values();
    auto& ov = out.values();
    for (std::size_t bi = 0; bi < b; ++bi) {
        for (std::size_t vi = 0; vi < v; ++vi) {
            double sum = 0.0;
            for (std::size_t t = 0; t < l; ++t) sum += xv[(bi * l + t) * v + vi];
            const double mean = sum / static_cast<double>(l);
            double sq = 0.0;
            for (std::size_t t = 0; t < l; ++t) {
                const double d = xv[(bi * l + t) * v + vi] - mean;
                sq += d * d;
            }
            const double sd = std::sqrt(sq / static_cast<double>(l) + kInstanceNormEps);
            mv[bi * v + vi] = mean;
            sv[bi * v + vi] = sd;
            for (std::size_t t = 0; t < l; ++t) {
                ov[(bi * l + t) * v + vi] = (xv[(bi * l + t) * v + vi] - mean) / sd;
            }
        }
    }
    return {out, stats};
}

Tensor denormalize(const Tensor& y, const NormStats& stats) {
    const Shape& s = y.shape();
    if (s.size() != 3) throw std::invalid_argument("denormalize: input must be (B,T,V), got " + shape_str(s));
    if (stats.mean.shape() != Shape{s[0], s[2]}) {
        throw std::invalid_argument("denormalize: stats " + shape_str(stats.mean.shape()) +
                                    " do not match output " + shape_str(s));
    }
    // y * std + mean with (B,V) stats broadcast over T: reshape to (B,1,V)
    Tensor sd = reshape(stats.std, {s[0], 1, s[2]});
    Tensor mean = reshape(stats.mean, {s[0], 1, s[2]});
    return add(mul(y, sd), mean);
}

Tensor patching(const Tensor& x_norm, std::size_t patch_len, std::size_t stride) {
    const Shape& s = x_norm.shape();
    if (s.size() != 3) throw std::invalid_argument("patching: input must be (B,L,V), got " + shape_str(s));
    const std::size_t b = s[0], l = s[1], v = s[2];
    if (patch_len > l) {
        throw std::invalid_argument("patching: patch length " + std::to_string(patch_len) +
                                    " exceeds look-back " + std::to_string(l));
    }
    if (stride == 0 || stride > patch_len) {
        throw std::invalid_argument("patching: stride must satisfy 1 <= stride <= patch length");
    }
    const std::size_t n = (l - patch_len) / stride + 2;

    Tensor out({b, v, n, patch_len});
    const auto& xv = x_norm.values();
    auto& ov = out.values();
    for (std::size_t bi = 0; bi < b; ++bi) {
        for (std::size_t vi = 0; vi < v; ++vi) {
            const double last = xv[(bi * l + (l - 1)) * v + vi];
            for (std::size_t ni = 0; ni < n; ++ni) {
                const std::size_t off = ni * stride;
                for (std::size_t p = 0; p < patch_len; ++p) {
                    const std::size_t t = off + p;
                    // indices past the series read the replicated last value
                    const double value = t < l ? xv[(bi * l + t) * v + vi] : last;
                    ov[((bi * v + vi) * n + ni) * patch_len + p] = value;
                }
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

namespace {

// Inverted dropout via a constant mask drawn outside the tape.
Tensor dropout_mask(const Shape& shape, double rate, Rng& rng) {
    Tensor mask(shape);
    const double keep = 1.0 - rate;
    for (double& m : mask.values()) m = rng.uniform() < keep ? 1.0 / keep : 0.0;
    return mask;
}

Tensor maybe_dropout(Tensor x, double rate, bool training, Rng* rng) {
    if (!training || rate <= 0.0 || rng == nullptr) return x;
    return mul(x, dropout_mask(x.shape(), rate, *rng));
}

}  // namespace

CMambaModel::CMambaModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed, /*stream=*/1);
    const std::size_t p = cfg_.patch_len;
    const std::size_t e = cfg_.embed_dim;
    const std::size_t n = cfg_.num_patches();

    const double bound = 1.0 / std::sqrt(static_cast<double>(p));
    w_patch = Tensor::uniform({p, e}, rng, -bound, bound).set_requires_grad();
    w_pos = Tensor::uniform({n, e}, rng, -0.02, 0.02).set_requires_grad();

    const MambaBlockConfig block_cfg = cfg_.resolved_block();
    blocks.resize(cfg_.num_blocks);
    for (std::size_t i = 0; i < cfg_.num_blocks; ++i) {
        blocks[i].mamba.init(block_cfg, rng);
        if (cfg_.use_gdd) blocks[i].gdd.init(cfg_.gdd_config(), rng);
    }

    const double head_bound = 1.0 / std::sqrt(static_cast<double>(n * e));
    w_head = Tensor::uniform({n * e, cfg_.horizon}, rng, -head_bound, head_bound).set_requires_grad();

    params_.emplace_back("embed.w_patch", w_patch);
    params_.emplace_back("embed.w_pos", w_pos);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string prefix = "block" + std::to_string(i);
        blocks[i].mamba.collect_params(prefix + ".mamba", params_);
        if (cfg_.use_gdd) blocks[i].gdd.collect_params(prefix + ".gdd", params_);
    }
    params_.emplace_back("head.w_proj", w_head);
}

std::size_t CMambaModel::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, p] : params_) n += p.size();
    return n;
}

Tensor CMambaModel::embed(const Tensor& patches, bool training, Rng* dropout_rng) const {
    Tensor z0 = add(matmul(patches, w_patch), w_pos);
    return maybe_dropout(std::move(z0), cfg_.dropout, training, dropout_rng);
}

Tensor CMambaModel::encode(const Tensor& z0, bool training, Rng* dropout_rng) const {
    const MambaBlockConfig block_cfg = cfg_.resolved_block();
    Tensor z = z0;
    for (const auto& block : blocks) {
        Tensor h = mamba_block_forward(z, block_cfg, block.mamba);
        Tensor mixed = cfg_.use_gdd ? gdd_mlp_forward(h, block.gdd) : h;
        z = add(mixed, z);
        z = maybe_dropout(std::move(z), cfg_.dropout, training, dropout_rng);
    }
    return z;
}

Tensor CMambaModel::head(const Tensor& zk) const {
    const Shape& s = zk.shape();
    Tensor flat = reshape(silu(zk), {s[0], s[1], s[2] * s[3]});  // (B,V,N*E)
    Tensor y = matmul(flat, w_head);                             // (B,V,T)
    return transpose(y, 1, 2);                                   // (B,T,V)
}

Tensor model_forward(const CMambaModel& model, const Tensor& x, bool training, Rng* dropout_rng) {
    const ModelConfig& cfg = model.config();
    const Shape& s = x.shape();
    if (s.size() != 3 || s[1] != cfg.look_back || s[2] != cfg.channels) {
        throw std::invalid_argument("model_forward: input " + shape_str(s) + " does not match (B," +
                                    std::to_string(cfg.look_back) + "," + std::to_string(cfg.channels) + ")");
    }
    auto [x_norm, stats] = instance_norm(x);
    Tensor patches = patching(x_norm, cfg.patch_len, cfg.stride);
    Tensor z0 = model.embed(patches, training, dropout_rng);
    Tensor zk = model.encode(z0, training, dropout_rng);
    Tensor y = model.head(zk);
    return denormalize(y, stats);
}

// ---------------------------------------------------------------------------
// FLOP accounting
// ---------------------------------------------------------------------------

namespace {

constexpr double kMac = 2.0;  // one multiply-accumulate
constexpr double kOp = 1.0;   // add/mul/compare/transcendental

double dense(double tokens, double in, double out) { return kMac * tokens * in * out; }

}  // namespace

FlopBreakdown estimate_flops(const ModelConfig& cfg, std::size_t batch) {
    cfg.validate();
    const double b = static_cast<double>(batch);
    const double v = static_cast<double>(cfg.channels);
    const double n = static_cast<double>(cfg.num_patches());
    const double e = static_cast<double>(cfg.embed_dim);
    const double p = static_cast<double>(cfg.patch_len);
    const double t = static_cast<double>(cfg.horizon);
    const double l = static_cast<double>(cfg.look_back);
    const MambaBlockConfig block = cfg.resolved_block();
    const double ei = static_cast<double>(block.d_inner());
    const double s = static_cast<double>(block.d_state);
    const double r = static_cast<double>(block.resolved_dt_rank());
    const double tokens = b * v * n;  // per-block token count

    FlopBreakdown fb;
    double total = 0.0;

    // instance norm + denorm
    total += b * v * (4.0 * l + 3.0) * kOp + b * v * t * 2.0 * kOp;
    // patch embedding and positional term
    total += dense(tokens, p, e) + tokens * e * kOp;

    double per_block = 0.0;
    per_block += dense(tokens, e, ei);                       // in_proj_x
    if (block.use_z_branch) {
        per_block += dense(tokens, e, ei);                   // in_proj_z
        per_block += tokens * ei * kOp;                      // silu(z)
        per_block += tokens * ei * kOp;                      // gate multiply
    }
    if (block.use_conv) {
        per_block += kMac * tokens * ei * static_cast<double>(block.conv_kernel);
    }
    per_block += tokens * ei * kOp;                          // silu(x)
    per_block += 2.0 * dense(tokens, ei, s);                 // B and C projections
    per_block += dense(tokens, ei, r) + dense(tokens, r, ei);  // step-size map
    per_block += tokens * ei * 2.0 * kOp;                    // bias + softplus
    // scan: per (token, e, s): discretize (1 MAC + exp + phi + 2 mul) and
    // recurrence (2 MAC) plus readout (1 MAC)
    per_block += tokens * ei * s * (kMac + 5.0 * kOp + 3.0 * kMac);
    if (block.d_mode == DMode::data_dependent) {
        per_block += dense(tokens, ei, ei);                  // skip projection
    }
    per_block += tokens * ei * 2.0 * kOp;                    // skip multiply + add
    per_block += dense(tokens, ei, e);                       // out_proj

    double gdd_networks = 0.0;
    double gdd_module = 0.0;
    if (cfg.use_gdd) {
        const double h = static_cast<double>(cfg.gdd_config().hidden());
        const double patches_bn = b * n;
        // four network applications per block: 2 networks x 2 descriptors
        gdd_networks = 4.0 * (dense(patches_bn, v, h) + dense(patches_bn, h, v));
        gdd_module = gdd_networks;
        gdd_module += 2.0 * tokens * e * kOp;        // mean + max pooling over E
        gdd_module += 4.0 * patches_bn * h * kOp;    // hidden bias + relu
        gdd_module += 4.0 * patches_bn * v * kOp;    // output bias
        gdd_module += 2.0 * patches_bn * v * kOp;    // descriptor sums
        gdd_module += 2.0 * patches_bn * v * kOp;    // sigmoids
        gdd_module += 2.0 * tokens * e * kOp;        // weight (.) h + bias
        per_block += gdd_module;
    }
    per_block += tokens * e * kOp;                           // residual add

    total += static_cast<double>(cfg.num_blocks) * per_block;
    // head: silu + flatten projection
    total += tokens * e * kOp + dense(b * v, n * e, t);

    fb.total = total;
    fb.gdd_module = static_cast<double>(cfg.num_blocks) * gdd_module;
    fb.gdd_networks = static_cast<double>(cfg.num_blocks) * gdd_networks;
    return fb;
}

}  // namespace cmamba
