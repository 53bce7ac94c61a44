#include "cmamba/trainer.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <iostream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace cmamba {

std::string to_string(LossKind k) { return k == LossKind::l1 ? "l1" : "l2"; }

LossKind loss_kind_from_string(const std::string& s) {
    if (s == "l1" || s == "L1" || s == "mae") return LossKind::l1;
    if (s == "l2" || s == "L2" || s == "mse") return LossKind::l2;
    throw std::invalid_argument("unknown loss kind '" + s + "'");
}

Tensor loss(LossKind kind, const Tensor& pred, const Tensor& target) {
    if (pred.shape() != target.shape()) {
        throw std::invalid_argument("loss: shapes differ, " + shape_str(pred.shape()) + " vs " +
                                    shape_str(target.shape()));
    }
    Tensor diff = sub(pred, target);
    return kind == LossKind::l1 ? mean_all(abs(diff)) : mean_all(mul(diff, diff));
}

std::pair<double, double> metrics(const std::vector<double>& pred, const std::vector<double>& truth) {
    if (pred.size() != truth.size() || pred.empty()) {
        throw std::invalid_argument("metrics: prediction/truth sizes must match and be non-empty");
    }
    double se = 0.0, ae = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - truth[i];
        se += d * d;
        ae += std::fabs(d);
    }
    const double n = static_cast<double>(pred.size());
    return {se / n, ae / n};
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

Adam::Adam(std::vector<std::pair<std::string, Tensor>> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& [name, p] : params_) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
    }
}

void Adam::step() {
    // global-norm clipping first
    double scale = 1.0;
    if (cfg_.clip_norm > 0.0) {
        double sq = 0.0;
        for (const auto& [name, p] : params_) {
            if (!p.has_grad()) continue;
            for (double g : p.grad()) sq += g * g;
        }
        const double norm = std::sqrt(sq);
        if (norm > cfg_.clip_norm) scale = cfg_.clip_norm / norm;
    }

    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i].second;
        if (!p.has_grad()) continue;
        auto& vals = p.values();
        const auto& grad = p.grad();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < vals.size(); ++j) {
            const double g = grad[j] * scale;
            if (!std::isfinite(g)) {
                throw std::runtime_error("adam: non-finite gradient in parameter '" + params_[i].first + "'");
            }
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            vals[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
        p.zero_grad();
    }
}

// ---------------------------------------------------------------------------
// Evaluation helpers
// ---------------------------------------------------------------------------

namespace {

template <typename Fn>
void for_each_eval_batch(const WindowSet& windows, std::size_t batch_size, Fn&& fn) {
    Batcher batcher(windows, batch_size, /*shuffle=*/false, /*seed=*/0);
    for (std::size_t k = 0; k < batcher.num_batches(); ++k) {
        Tensor x, y;
        batcher.get(k, x, y);
        fn(x, y);
    }
}

}  // namespace

double evaluate_loss(const CMambaModel& model, const WindowSet& windows, LossKind kind,
                     std::size_t batch_size) {
    double acc = 0.0;
    std::size_t count = 0;
    for_each_eval_batch(windows, batch_size, [&](const Tensor& x, const Tensor& y) {
        Tensor pred = model_forward(model, x, /*training=*/false);
        const auto& pv = pred.values();
        const auto& yv = y.values();
        for (std::size_t i = 0; i < pv.size(); ++i) {
            const double d = pv[i] - yv[i];
            acc += kind == LossKind::l1 ? std::fabs(d) : d * d;
        }
        count += pv.size();
    });
    if (count == 0) throw std::invalid_argument("evaluate_loss: empty window set");
    return acc / static_cast<double>(count);
}

std::pair<double, double> evaluate_metrics(const CMambaModel& model, const WindowSet& windows,
                                           std::size_t batch_size) {
    double se = 0.0, ae = 0.0;
    std::size_t count = 0;
    for_each_eval_batch(windows, batch_size, [&](const Tensor& x, const Tensor& y) {
        Tensor pred = model_forward(model, x, /*training=*/false);
        const auto& pv = pred.values();
        const auto& yv = y.values();
        for (std::size_t i = 0; i < pv.size(); ++i) {
            const double d = pv[i] - yv[i];
            se += d * d;
            ae += std::fabs(d);
        }
        count += pv.size();
    });
    if (count == 0) throw std::invalid_argument("evaluate_metrics: empty test set");
    const double n = static_cast<double>(count);
    return {se / n, ae / n};
}

std::vector<double> predict_all(const CMambaModel& model, const WindowSet& windows,
                                std::size_t batch_size) {
    std::vector<double> out;
    out.reserve(windows.count() * model.config().horizon * windows.channels());
    for_each_eval_batch(windows, batch_size, [&](const Tensor& x, const Tensor& y) {
        (void)y;
        Tensor pred = model_forward(model, x, /*training=*/false);
        out.insert(out.end(), pred.values().begin(), pred.values().end());
    });
    return out;
}

std::vector<std::vector<double>> snapshot_params(const std::vector<std::pair<std::string, Tensor>>& params) {
    std::vector<std::vector<double>> snap;
    snap.reserve(params.size());
    for (const auto& [name, p] : params) snap.push_back(p.values());
    return snap;
}

void restore_params(const std::vector<std::pair<std::string, Tensor>>& params,
                    const std::vector<std::vector<double>>& snapshot) {
    if (params.size() != snapshot.size()) throw std::invalid_argument("restore: snapshot size mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const_cast<Tensor&>(params[i].second).values() = snapshot[i];
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

std::string TrainReport::to_text() const {
    std::ostringstream os;
    os << std::setprecision(12);
    os << "seed: " << seed << "\n";
    os << "epochs_run: " << train_loss.size() << "\n";
    for (std::size_t i = 0; i < train_loss.size(); ++i) {
        os << "epoch " << (i + 1) << ": train_loss " << train_loss[i] << " val_loss " << val_loss[i] << "\n";
    }
    os << "best_epoch: " << best_epoch << "\n";
    os << "best_val_loss: " << best_val << "\n";
    os << "test_mse: " << test_mse << "\n";
    os << "test_mae: " << test_mae << "\n";
    return os.str();
}

TrainReport train(CMambaModel& model, const WindowSet& train_windows, const WindowSet& val_windows,
                  const WindowSet& test_windows, const TrainConfig& cfg, const MixupConfig& mixup) {
    if (train_windows.count() == 0 || val_windows.count() == 0 || test_windows.count() == 0) {
        throw std::invalid_argument("train: all splits must be non-empty");
    }
    const auto t_start = std::chrono::steady_clock::now();

    TrainReport report;
    report.seed = cfg.seed;

    Augmenter augmenter(mixup, cfg.seed);
    Batcher batches(train_windows, cfg.batch_size, /*shuffle=*/true, cfg.seed);
    Adam adam(model.parameters(), cfg.adam);
    Rng dropout_rng(cfg.seed, /*stream=*/3);

    double best_val = std::numeric_limits<double>::infinity();
    std::vector<std::vector<double>> best_params = snapshot_params(model.parameters());
    std::size_t best_epoch = 0;
    std::size_t stale = 0;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (cfg.lr_halving && epoch > 0) adam.set_lr(adam.lr() * 0.5);
        batches.begin_epoch();
        augmenter.set_training(true);

        double loss_sum = 0.0;
        const std::size_t nb = batches.num_batches();
        for (std::size_t k = 0; k < nb; ++k) {
            Tensor x, y;
            batches.get(k, x, y);
            augmenter.apply_batch(x, y);
            {
                Tape tape;
                Tensor pred = model_forward(model, x, /*training=*/true, &dropout_rng);
                Tensor l = loss(cfg.loss_kind, pred, y);
                const double lv = l.item();
                if (!std::isfinite(lv)) {
                    throw std::runtime_error("train: loss diverged at epoch " + std::to_string(epoch + 1) +
                                             ", step " + std::to_string(k + 1));
                }
                loss_sum += lv;
                backward(l);
            }
            adam.step();
        }
        report.train_loss.push_back(loss_sum / static_cast<double>(nb));

        augmenter.set_training(false);
        const double val = evaluate_loss(model, val_windows, cfg.loss_kind, cfg.batch_size);
        report.val_loss.push_back(val);
        if (cfg.verbose) {
            std::cout << "epoch " << (epoch + 1) << "/" << cfg.epochs
                      << " train_loss=" << report.train_loss.back() << " val_loss=" << val << std::endl;
        }

        if (val < best_val) {
            best_val = val;
            best_epoch = epoch + 1;
            best_params = snapshot_params(model.parameters());
            stale = 0;
        } else if (++stale >= cfg.patience) {
            break;
        }
    }

    restore_params(model.parameters(), best_params);
    report.best_epoch = best_epoch;
    report.best_val = best_val;
    const auto [mse, mae] = evaluate_metrics(model, test_windows, cfg.batch_size);
    report.test_mse = mse;
    report.test_mae = mae;
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return report;
}

}  // namespace cmamba
