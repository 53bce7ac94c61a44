#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cmamba/checkpoint.hpp"
#include "cmamba/config.hpp"
#include "cmamba/data.hpp"
#include "cmamba/model.hpp"
#include "cmamba/trainer.hpp"

namespace fs = std::filesystem;
using namespace cmamba;

namespace {

struct PreparedData {
    TimeSeriesTable table;  // globally z-scored in place
    ChannelStats stats;
    SplitViews views;
};

ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
    ExperimentConfig cfg = ExperimentConfig::from_file(path);
    for (const auto& o : overrides) cfg.apply_override(o);
    cfg.validate();
    return cfg;
}

PreparedData prepare(const ExperimentConfig& cfg) {
    if (!fs::exists(cfg.data_path)) throw ConfigError("dataset file not found: " + cfg.data_path);
    PreparedData d;
    d.table = load_csv(cfg.data_path, cfg.has_timestamp);
    d.views = make_splits(d.table.rows, cfg.split_spec(), cfg.look_back);
    if (d.views.train.length() == 0) throw ConfigError("train split is empty for " + cfg.data_path);
    d.stats = normalize_global(d.table, d.views.train.end);
    return d;
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write file: " + path);
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
}

// predictions in the original units of the source table
void write_predictions_csv(const std::string& path, const std::vector<double>& preds_z,
                           const WindowSet& windows, const ChannelStats& stats, std::size_t horizon) {
    std::ostringstream os;
    os << std::setprecision(10);
    os << "sample_index,channel,step,y_true,y_pred\n";
    const std::size_t v = windows.channels();
    for (std::size_t i = 0; i < windows.count(); ++i) {
        const auto sample = windows.sample(i);
        for (std::size_t c = 0; c < v; ++c) {
            for (std::size_t t = 0; t < horizon; ++t) {
                const double zt = sample.y.at({t, c});
                const double zp = preds_z[(i * horizon + t) * v + c];
                os << i << "," << c << "," << t << ","
                   << zt * stats.stddev[c] + stats.mean[c] << ","
                   << zp * stats.stddev[c] + stats.mean[c] << "\n";
            }
        }
    }
    write_text_file(path, os.str());
}

std::vector<std::pair<std::string, Tensor>> checkpoint_payload(const CMambaModel& model,
                                                               const ChannelStats& stats) {
    auto params = model.parameters();
    params.emplace_back("data.norm_mean", Tensor({stats.mean.size()}, stats.mean));
    params.emplace_back("data.norm_std", Tensor({stats.stddev.size()}, stats.stddev));
    return params;
}

struct RestoredModel {
    ExperimentConfig cfg;
    ChannelStats stats;
    CMambaModel model;
};

RestoredModel restore_model(const std::string& ckpt_path) {
    if (!fs::exists(ckpt_path)) throw ConfigError("checkpoint not found: " + ckpt_path);
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    ExperimentConfig cfg = ExperimentConfig::from_text(ckpt.config_echo);
    const Tensor* mean = ckpt.find("data.norm_mean");
    const Tensor* stddev = ckpt.find("data.norm_std");
    if (!mean || !stddev) throw std::runtime_error("checkpoint lacks normalization stats");
    ChannelStats stats{mean->values(), stddev->values()};
    CMambaModel model(cfg.to_model_config(stats.mean.size()), cfg.seed);
    for (auto& [name, tensor] : model.parameters()) {
        const Tensor* stored = ckpt.find(name);
        if (!stored) throw std::runtime_error("checkpoint missing parameter '" + name + "'");
        if (stored->shape() != tensor.shape()) {
            throw std::runtime_error("checkpoint parameter '" + name + "' has shape " +
                                     shape_str(stored->shape()) + ", expected " + shape_str(tensor.shape()));
        }
        const_cast<Tensor&>(tensor).values() = stored->values();
    }
    return RestoredModel{std::move(cfg), std::move(stats), std::move(model)};
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides, bool verbose) {
    ExperimentConfig cfg = load_config(config_path, overrides);
    PreparedData data = prepare(cfg);

    WindowSet train_w(data.table, data.views.train, cfg.look_back, cfg.horizon);
    WindowSet val_w(data.table, data.views.val, cfg.look_back, cfg.horizon);
    WindowSet test_w(data.table, data.views.test, cfg.look_back, cfg.horizon);

    CMambaModel model(cfg.to_model_config(data.table.channels), cfg.seed);
    TrainConfig tcfg = cfg.to_train_config();
    tcfg.verbose = verbose;
    TrainReport report = train(model, train_w, val_w, test_w, tcfg, cfg.to_mixup_config());

    const std::string out_dir = cfg.resolved_out_dir();
    fs::create_directories(out_dir);
    write_text_file(out_dir + "/resolved.cfg", cfg.echo());
    write_text_file(out_dir + "/report.txt", report.to_text());
    save_checkpoint(out_dir + "/model.ckpt", cfg.echo(/*include_out_dir=*/false),
                    checkpoint_payload(model, data.stats));
    const auto preds = predict_all(model, test_w, cfg.batch_size);
    write_predictions_csv(out_dir + "/predictions.csv", preds, test_w, data.stats, cfg.horizon);

    std::cout << std::setprecision(6) << "test MSE=" << report.test_mse << " MAE=" << report.test_mae
              << " (best epoch " << report.best_epoch << ", " << std::setprecision(3)
              << report.wall_seconds << "s)\n"
              << "artifacts: " << out_dir << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_path, std::size_t batch_size) {
    RestoredModel rm = restore_model(ckpt_path);
    if (!fs::exists(data_path)) throw ConfigError("dataset file not found: " + data_path);
    TimeSeriesTable table = load_csv(data_path, rm.cfg.has_timestamp);
    if (table.channels != rm.stats.mean.size()) {
        throw ConfigError("checkpoint expects " + std::to_string(rm.stats.mean.size()) +
                          " channels but '" + data_path + "' has " + std::to_string(table.channels));
    }
    for (std::size_t r = 0; r < table.rows; ++r) {
        for (std::size_t c = 0; c < table.channels; ++c) {
            table.values[r * table.channels + c] =
                (table.at(r, c) - rm.stats.mean[c]) / rm.stats.stddev[c];
        }
    }
    auto views = make_splits(table.rows, rm.cfg.split_spec(), rm.cfg.look_back);
    WindowSet test_w(table, views.test, rm.cfg.look_back, rm.cfg.horizon);
    const auto [mse, mae] = evaluate_metrics(rm.model, test_w, batch_size);
    std::cout << std::setprecision(6) << "test MSE=" << mse << " MAE=" << mae << "\n";
    return 0;
}

int cmd_predict(const std::string& ckpt_path, const std::string& input_path,
                const std::string& output_path) {
    RestoredModel rm = restore_model(ckpt_path);
    if (!fs::exists(input_path)) throw ConfigError("input file not found: " + input_path);
    TimeSeriesTable table = load_csv(input_path, rm.cfg.has_timestamp);
    const std::size_t v = rm.stats.mean.size();
    if (table.channels != v) {
        throw ConfigError("checkpoint expects " + std::to_string(v) + " channels but '" + input_path +
                          "' has " + std::to_string(table.channels));
    }
    const std::size_t l = rm.cfg.look_back;
    const std::size_t t = rm.cfg.horizon;
    if (table.rows < l) {
        throw ConfigError("input needs at least " + std::to_string(l) + " rows, got " +
                          std::to_string(table.rows));
    }

    std::ostringstream os;
    os << std::setprecision(10);
    os << "sample_index,channel,step,y_true,y_pred\n";
    std::size_t sample_index = 0;
    // rolling forecasts: consecutive non-overlapping horizons
    for (std::size_t start = 0; start + l <= table.rows; start += t, ++sample_index) {
        Tensor x({1, l, v});
        for (std::size_t r = 0; r < l; ++r) {
            for (std::size_t c = 0; c < v; ++c) {
                x.values()[r * v + c] =
                    (table.at(start + r, c) - rm.stats.mean[c]) / rm.stats.stddev[c];
            }
        }
        Tensor pred = model_forward(rm.model, x, false);
        for (std::size_t c = 0; c < v; ++c) {
            for (std::size_t step = 0; step < t; ++step) {
                os << sample_index << "," << c << "," << step << ",";
                const std::size_t truth_row = start + l + step;
                if (truth_row < table.rows) {
                    os << table.at(truth_row, c);
                } else {
                    os << "nan";
                }
                os << "," << pred.at({0, step, c}) * rm.stats.stddev[c] + rm.stats.mean[c] << "\n";
            }
        }
    }
    write_text_file(output_path, os.str());
    std::cout << "wrote " << sample_index << " forecasts to " << output_path << "\n";
    return 0;
}

int cmd_flops(const std::string& config_path, const std::vector<std::string>& overrides,
              std::size_t channels, std::size_t batch) {
    ExperimentConfig cfg = ExperimentConfig::from_file(config_path);
    for (const auto& o : overrides) cfg.apply_override(o);
    std::size_t v = channels;
    if (v == 0) {
        if (!fs::exists(cfg.data_path)) {
            throw ConfigError("pass --channels or point data_path at a readable csv");
        }
        v = load_csv(cfg.data_path, cfg.has_timestamp).channels;
    }
    const auto fb = estimate_flops(cfg.to_model_config(v), batch);
    std::cout << std::setprecision(6) << "total_flops=" << fb.total << " (" << fb.total / 1e9 << " G)\n"
              << "gdd_mlp_flops=" << fb.gdd_module << " (networks " << fb.gdd_networks << ")\n"
              << "gdd_increment=" << 100.0 * fb.increment_ratio() << "%\n";
    return 0;
}

struct AblationCase {
    std::string name;
    ExperimentConfig cfg;
};

std::vector<AblationCase> design_cases(const ExperimentConfig& base) {
    auto with = [&](const std::string& name, bool conv, bool z, const char* am, const char* dm) {
        ExperimentConfig c = base;
        c.use_conv = conv;
        c.use_z = z;
        c.a_mode = am;
        c.d_mode = dm;
        return AblationCase{name, c};
    };
    return {
        with("vanilla", true, true, "feature_specific", "free"),
        with("drop_conv", false, true, "feature_specific", "free"),
        with("drop_z", true, false, "feature_specific", "free"),
        with("drop_conv_z", false, false, "feature_specific", "free"),
        with("shared_a", true, true, "feature_independent", "free"),
        with("shared_a_dd_d", true, true, "feature_independent", "data_dependent"),
        with("cmamba", false, true, "feature_independent", "data_dependent"),
    };
}

std::vector<AblationCase> module_cases(const ExperimentConfig& base) {
    std::vector<AblationCase> cases;
    for (bool gdd : {false, true}) {
        for (bool mix : {false, true}) {
            ExperimentConfig c = base;
            c.use_gdd = gdd;
            c.mixup_mode = mix ? "channel" : "off";
            std::string name = std::string(gdd ? "gdd" : "nogdd") + "_" + (mix ? "mixup" : "nomixup");
            cases.push_back({name, c});
        }
    }
    return cases;
}

std::vector<AblationCase> axis_grid(const ExperimentConfig& base, const std::vector<std::string>& axes) {
    struct Axis {
        std::string key;
        std::vector<std::string> values;
    };
    std::vector<Axis> grid;
    for (const auto& a : axes) {
        if (a == "use_conv" || a == "use_z" || a == "gdd") {
            grid.push_back({a, {"false", "true"}});
        } else if (a == "a_mode") {
            grid.push_back({a, {"feature_specific", "feature_independent"}});
        } else if (a == "d_mode") {
            grid.push_back({a, {"free", "data_dependent"}});
        } else if (a == "mixup") {
            grid.push_back({a, {"off", "channel"}});
        } else {
            throw ConfigError("unknown ablation axis '" + a + "'");
        }
    }
    std::vector<AblationCase> cases{{"", base}};
    for (const auto& axis : grid) {
        std::vector<AblationCase> next;
        for (const auto& c : cases) {
            for (const auto& value : axis.values) {
                AblationCase nc = c;
                if (axis.key == "gdd") {
                    nc.cfg.use_gdd = value == "true";
                } else if (axis.key == "mixup") {
                    nc.cfg.mixup_mode = value;
                } else {
                    nc.cfg.set(axis.key, value);
                }
                nc.name = nc.name.empty() ? axis.key + "=" + value : nc.name + "," + axis.key + "=" + value;
                next.push_back(std::move(nc));
            }
        }
        cases = std::move(next);
    }
    return cases;
}

int cmd_ablate(const std::string& config_path, const std::vector<std::string>& overrides,
               const std::string& axes, bool verbose) {
    ExperimentConfig base = load_config(config_path, overrides);

    std::vector<AblationCase> cases;
    if (axes == "design") {
        cases = design_cases(base);
    } else if (axes == "modules") {
        cases = module_cases(base);
    } else {
        std::vector<std::string> names;
        std::istringstream is(axes);
        std::string tok;
        while (std::getline(is, tok, ',')) {
            if (!tok.empty()) names.push_back(tok);
        }
        if (names.empty()) throw ConfigError("--axes needs 'design', 'modules', or a comma list of flags");
        cases = axis_grid(base, names);
    }

    PreparedData data = prepare(base);
    WindowSet train_w(data.table, data.views.train, base.look_back, base.horizon);
    WindowSet val_w(data.table, data.views.val, base.look_back, base.horizon);
    WindowSet test_w(data.table, data.views.test, base.look_back, base.horizon);

    std::ostringstream csv;
    csv << std::setprecision(10);
    csv << "case,use_conv,use_z,a_mode,d_mode,gdd,mixup,mse,mae\n";
    for (const auto& c : cases) {
        c.cfg.validate();
        // every row reuses the base seed so differences come from the flags
        CMambaModel model(c.cfg.to_model_config(data.table.channels), c.cfg.seed);
        TrainConfig tcfg = c.cfg.to_train_config();
        tcfg.verbose = false;
        TrainReport report = train(model, train_w, val_w, test_w, tcfg, c.cfg.to_mixup_config());
        csv << c.name << "," << (c.cfg.use_conv ? 1 : 0) << "," << (c.cfg.use_z ? 1 : 0) << ","
            << c.cfg.a_mode << "," << c.cfg.d_mode << "," << (c.cfg.use_gdd ? 1 : 0) << ","
            << c.cfg.mixup_mode << "," << report.test_mse << "," << report.test_mae << "\n";
        if (verbose) {
            std::cout << c.name << ": mse=" << std::setprecision(6) << report.test_mse
                      << " mae=" << report.test_mae << std::endl;
        }
    }

    const std::string out_dir = base.resolved_out_dir();
    fs::create_directories(out_dir);
    write_text_file(out_dir + "/ablation.csv", csv.str());
    std::cout << csv.str();
    std::cout << "wrote " << out_dir << "/ablation.csv\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CMamba multivariate time-series forecasting toolkit"};
    app.require_subcommand(1);

    std::string config_path, ckpt_path, data_path, input_path, output_path;
    std::vector<std::string> overrides;
    std::string axes = "modules";
    std::size_t channels = 0, batch = 64, batch_size = 64;
    bool verbose = false;

    auto* train_cmd = app.add_subcommand("train", "train a model and write artifacts");
    train_cmd->add_option("--config", config_path, "experiment config file")->required();
    train_cmd->add_option("--override", overrides, "key=value override (repeatable)");
    train_cmd->add_flag("--verbose", verbose, "print per-epoch losses");

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset's test split");
    eval_cmd->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
    eval_cmd->add_option("--data", data_path, "csv dataset")->required();
    eval_cmd->add_option("--batch-size", batch_size, "evaluation batch size");

    auto* predict_cmd = app.add_subcommand("predict", "rolling forecasts over a csv");
    predict_cmd->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
    predict_cmd->add_option("--input", input_path, "input csv")->required();
    predict_cmd->add_option("--output", output_path, "output predictions csv")->required();

    auto* flops_cmd = app.add_subcommand("flops", "analytic operation counts for a config");
    flops_cmd->add_option("--config", config_path, "experiment config file")->required();
    flops_cmd->add_option("--override", overrides, "key=value override (repeatable)");
    flops_cmd->add_option("--channels", channels, "channel count (otherwise read from data_path)");
    flops_cmd->add_option("--batch", batch, "batch size for the count");

    auto* ablate_cmd = app.add_subcommand("ablate", "train a grid of flag combinations");
    ablate_cmd->add_option("--config", config_path, "experiment config file")->required();
    ablate_cmd->add_option("--override", overrides, "key=value override (repeatable)");
    ablate_cmd->add_option("--axes", axes, "'design', 'modules', or comma list of flags");
    ablate_cmd->add_flag("--verbose", verbose, "print each row as it finishes");

    try {
        app.parse(argc, argv);
        if (train_cmd->parsed()) return cmd_train(config_path, overrides, verbose);
        if (eval_cmd->parsed()) return cmd_eval(ckpt_path, data_path, batch_size);
        if (predict_cmd->parsed()) return cmd_predict(ckpt_path, input_path, output_path);
        if (flops_cmd->parsed()) return cmd_flops(config_path, overrides, channels, batch);
        if (ablate_cmd->parsed()) return cmd_ablate(config_path, overrides, axes, verbose);
        return 2;
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
