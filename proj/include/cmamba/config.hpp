#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "cmamba/data.hpp"
#include "cmamba/mixup.hpp"
#include "cmamba/model.hpp"
#include "cmamba/trainer.hpp"

namespace cmamba {

// User/config mistakes, distinguished from runtime failures for exit codes.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Everything needed to reproduce a run. Flat `key = value` file format; the
// echo of a resolved config parses back to an identical object. Unknown keys
// are rejected.
struct ExperimentConfig {
    // data
    std::string data_path;
    std::string dataset_name = "dataset";
    bool has_timestamp = true;
    double train_ratio = -1.0;  // < 0: derived from dataset_name (6:2:2 for ETT*, else 7:1:2)
    double val_ratio = -1.0;
    double test_ratio = -1.0;

    // task
    std::size_t look_back = 96;
    std::size_t horizon = 96;

    // model
    std::size_t patch_len = 16;
    std::size_t stride = 8;
    std::size_t embed_dim = 128;
    std::size_t num_blocks = 2;
    std::size_t d_state = 16;
    std::size_t expansion = 1;
    std::size_t dt_rank = 0;  // 0 -> derived
    double dropout = 0.0;
    bool use_gdd = true;
    double gdd_expansion = 1.0;
    bool use_conv = false;
    std::size_t conv_kernel = 4;
    bool use_z = true;
    std::string a_mode = "feature_independent";
    std::string d_mode = "data_dependent";

    // augmentation
    double mixup_sigma = 1.0;
    std::string mixup_mode = "channel";

    // optimizer
    double lr = 1e-4;
    std::size_t epochs = 10;
    std::size_t patience = 3;
    std::size_t batch_size = 64;
    std::string loss = "l1";
    double clip_norm = 5.0;
    bool lr_halving = false;

    std::uint64_t seed = 2020;
    std::string out_dir;  // empty -> $CMAMBA_OUTPUT_ROOT/<dataset>_<seed> (default root "runs")

    static ExperimentConfig from_file(const std::string& path);
    static ExperimentConfig from_text(const std::string& text);

    void set(const std::string& key, const std::string& value);  // ConfigError on unknown key
    void apply_override(const std::string& key_eq_value);

    // Resolved key = value lines in fixed order. Checkpoints embed the form
    // without out_dir so runs that differ only in artifact location produce
    // byte-identical checkpoints.
    std::string echo(bool include_out_dir = true) const;
    std::string resolved_out_dir() const;

    void validate() const;
    SplitSpec split_spec() const;
    ModelConfig to_model_config(std::size_t channels) const;
    TrainConfig to_train_config() const;
    MixupConfig to_mixup_config() const;
};

}  // namespace cmamba
