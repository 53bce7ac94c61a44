#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cmamba/data.hpp"
#include "cmamba/mixup.hpp"
#include "cmamba/model.hpp"
#include "cmamba/tensor.hpp"

namespace cmamba {

enum class LossKind { l1, l2 };

std::string to_string(LossKind k);
LossKind loss_kind_from_string(const std::string& s);

// Mean absolute / mean squared error over all elements. L1 uses subgradient
// 0 at exact ties.
Tensor loss(LossKind kind, const Tensor& pred, const Tensor& target);

// One-pass element means over flat prediction/truth arrays -> (MSE, MAE).
std::pair<double, double> metrics(const std::vector<double>& pred, const std::vector<double>& truth);

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 5.0;  // <= 0 disables clipping
};

// Bias-corrected Adam over a fixed parameter list. step() consumes and then
// zeroes the gradients; a non-finite gradient aborts naming the parameter.
class Adam {
public:
    Adam(std::vector<std::pair<std::string, Tensor>> params, AdamConfig cfg);

    void step();
    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }
    std::size_t steps() const { return t_; }

private:
    std::vector<std::pair<std::string, Tensor>> params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t patience = 3;
    std::size_t batch_size = 64;
    LossKind loss_kind = LossKind::l1;
    AdamConfig adam;
    bool lr_halving = false;  // halve the rate each epoch when set
    std::uint64_t seed = 2020;
    bool verbose = false;
};

struct TrainReport {
    std::vector<double> train_loss;  // per epoch
    std::vector<double> val_loss;
    std::size_t best_epoch = 0;      // 1-based
    double best_val = 0.0;
    double test_mse = 0.0;
    double test_mae = 0.0;
    std::uint64_t seed = 0;
    double wall_seconds = 0.0;       // informational only, never serialized

    // Deterministic text form: identical runs serialize identically.
    std::string to_text() const;
};

// Full optimization loop: shuffled epochs with per-sample augmentation,
// validation-based selection, early stopping, and test metrics from the
// best-validation parameters (restored into the model on return).
TrainReport train(CMambaModel& model, const WindowSet& train_windows, const WindowSet& val_windows,
                  const WindowSet& test_windows, const TrainConfig& cfg, const MixupConfig& mixup);

// Evaluation helpers; original order, no augmentation, no recording.
double evaluate_loss(const CMambaModel& model, const WindowSet& windows, LossKind kind,
                     std::size_t batch_size);
std::pair<double, double> evaluate_metrics(const CMambaModel& model, const WindowSet& windows,
                                           std::size_t batch_size);
// Predictions for every window in chronological order, flattened (count*T*V).
std::vector<double> predict_all(const CMambaModel& model, const WindowSet& windows,
                                std::size_t batch_size);

// Deep copy / restore of parameter values, used for best-checkpoint keeping.
std::vector<std::vector<double>> snapshot_params(const std::vector<std::pair<std::string, Tensor>>& params);
void restore_params(const std::vector<std::pair<std::string, Tensor>>& params,
                    const std::vector<std::vector<double>>& snapshot);

}  // namespace cmamba
