#include "cmamba/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace cmamba {

namespace {

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return "";
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("config: '" + key + "' expects a boolean, got '" + v + "'");
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
    }
}

std::size_t parse_size(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const long long d = std::stoll(v, &pos);
        if (pos != v.size() || d < 0) throw std::invalid_argument(v);
        return static_cast<std::size_t>(d);
    } catch (const std::exception&) {
        throw ConfigError("config: '" + key + "' expects a non-negative integer, got '" + v + "'");
    }
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const unsigned long long d = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return static_cast<std::uint64_t>(d);
    } catch (const std::exception&) {
        throw ConfigError("config: '" + key + "' expects an unsigned integer, got '" + v + "'");
    }
}

// shortest representation that round-trips exactly
std::string fmt_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

}  // namespace

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_text(ss.str());
}

ExperimentConfig ExperimentConfig::from_text(const std::string& text) {
    ExperimentConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value', got '" + t + "'");
        }
        cfg.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return cfg;
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
    if (key == "data_path") data_path = value;
    else if (key == "dataset_name") dataset_name = value;
    else if (key == "has_timestamp") has_timestamp = parse_bool(key, value);
    else if (key == "train_ratio") train_ratio = parse_double(key, value);
    else if (key == "val_ratio") val_ratio = parse_double(key, value);
    else if (key == "test_ratio") test_ratio = parse_double(key, value);
    else if (key == "look_back") look_back = parse_size(key, value);
    else if (key == "horizon") horizon = parse_size(key, value);
    else if (key == "patch_len") patch_len = parse_size(key, value);
    else if (key == "stride") stride = parse_size(key, value);
    else if (key == "embed_dim") embed_dim = parse_size(key, value);
    else if (key == "num_blocks") num_blocks = parse_size(key, value);
    else if (key == "d_state") d_state = parse_size(key, value);
    else if (key == "expansion") expansion = parse_size(key, value);
    else if (key == "dt_rank") dt_rank = parse_size(key, value);
    else if (key == "dropout") dropout = parse_double(key, value);
    else if (key == "use_gdd") use_gdd = parse_bool(key, value);
    else if (key == "gdd_expansion") gdd_expansion = parse_double(key, value);
    else if (key == "use_conv") use_conv = parse_bool(key, value);
    else if (key == "conv_kernel") conv_kernel = parse_size(key, value);
    else if (key == "use_z") use_z = parse_bool(key, value);
    else if (key == "a_mode") a_mode = value;
    else if (key == "d_mode") d_mode = value;
    else if (key == "mixup_sigma") mixup_sigma = parse_double(key, value);
    else if (key == "mixup_mode") mixup_mode = value;
    else if (key == "lr") lr = parse_double(key, value);
    else if (key == "epochs") epochs = parse_size(key, value);
    else if (key == "patience") patience = parse_size(key, value);
    else if (key == "batch_size") batch_size = parse_size(key, value);
    else if (key == "loss") loss = value;
    else if (key == "clip_norm") clip_norm = parse_double(key, value);
    else if (key == "lr_halving") lr_halving = parse_bool(key, value);
    else if (key == "seed") seed = parse_u64(key, value);
    else if (key == "out_dir") out_dir = value;
    else throw ConfigError("config: unknown key '" + key + "'");
}

void ExperimentConfig::apply_override(const std::string& key_eq_value) {
    const auto eq = key_eq_value.find('=');
    if (eq == std::string::npos) {
        throw ConfigError("override must look like key=value, got '" + key_eq_value + "'");
    }
    set(trim(key_eq_value.substr(0, eq)), trim(key_eq_value.substr(eq + 1)));
}

std::string ExperimentConfig::echo(bool include_out_dir) const {
    const SplitSpec sp = split_spec();
    std::ostringstream os;
    os << "data_path = " << data_path << "\n";
    os << "dataset_name = " << dataset_name << "\n";
    os << "has_timestamp = " << (has_timestamp ? "true" : "false") << "\n";
    os << "train_ratio = " << fmt_double(sp.train) << "\n";
    os << "val_ratio = " << fmt_double(sp.val) << "\n";
    os << "test_ratio = " << fmt_double(sp.test) << "\n";
    os << "look_back = " << look_back << "\n";
    os << "horizon = " << horizon << "\n";
    os << "patch_len = " << patch_len << "\n";
    os << "stride = " << stride << "\n";
    os << "embed_dim = " << embed_dim << "\n";
    os << "num_blocks = " << num_blocks << "\n";
    os << "d_state = " << d_state << "\n";
    os << "expansion = " << expansion << "\n";
    os << "dt_rank = " << dt_rank << "\n";
    os << "dropout = " << fmt_double(dropout) << "\n";
    os << "use_gdd = " << (use_gdd ? "true" : "false") << "\n";
    os << "gdd_expansion = " << fmt_double(gdd_expansion) << "\n";
    os << "use_conv = " << (use_conv ? "true" : "false") << "\n";
    os << "conv_kernel = " << conv_kernel << "\n";
    os << "use_z = " << (use_z ? "true" : "false") << "\n";
    os << "a_mode = " << a_mode << "\n";
    os << "d_mode = " << d_mode << "\n";
    os << "mixup_sigma = " << fmt_double(mixup_sigma) << "\n";
    os << "mixup_mode = " << mixup_mode << "\n";
    os << "lr = " << fmt_double(lr) << "\n";
    os << "epochs = " << epochs << "\n";
    os << "patience = " << patience << "\n";
    os << "batch_size = " << batch_size << "\n";
    os << "loss = " << loss << "\n";
    os << "clip_norm = " << fmt_double(clip_norm) << "\n";
    os << "lr_halving = " << (lr_halving ? "true" : "false") << "\n";
    os << "seed = " << seed << "\n";
    if (include_out_dir) os << "out_dir = " << resolved_out_dir() << "\n";
    return os.str();
}

std::string ExperimentConfig::resolved_out_dir() const {
    if (!out_dir.empty()) return out_dir;
    const char* root = std::getenv("CMAMBA_OUTPUT_ROOT");
    const std::string base = root && *root ? root : "runs";
    return base + "/" + dataset_name + "_" + std::to_string(seed);
}

void ExperimentConfig::validate() const {
    if (data_path.empty()) throw ConfigError("config: data_path must be set");
    try {
        to_model_config(1);
        to_mixup_config().validate();
        split_spec().validate();
        (void)loss_kind_from_string(loss);
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    if (epochs == 0) throw ConfigError("config: epochs must be >= 1");
    if (batch_size == 0) throw ConfigError("config: batch_size must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("config: lr must be positive");
}

SplitSpec ExperimentConfig::split_spec() const {
    if (train_ratio >= 0.0 || val_ratio >= 0.0 || test_ratio >= 0.0) {
        if (train_ratio < 0.0 || val_ratio < 0.0 || test_ratio < 0.0) {
            throw ConfigError("config: set all three split ratios or none");
        }
        return SplitSpec{train_ratio, val_ratio, test_ratio};
    }
    return SplitSpec::for_dataset(dataset_name);
}

ModelConfig ExperimentConfig::to_model_config(std::size_t channels) const {
    ModelConfig mc;
    mc.look_back = look_back;
    mc.horizon = horizon;
    mc.channels = channels;
    mc.patch_len = patch_len;
    mc.stride = stride;
    mc.embed_dim = embed_dim;
    mc.num_blocks = num_blocks;
    mc.dropout = dropout;
    mc.use_gdd = use_gdd;
    mc.gdd_expansion = gdd_expansion;
    mc.block.d_state = d_state;
    mc.block.expansion = expansion;
    mc.block.dt_rank = dt_rank;
    mc.block.use_conv = use_conv;
    mc.block.conv_kernel = conv_kernel;
    mc.block.use_z_branch = use_z;
    mc.block.a_mode = a_mode_from_string(a_mode);
    mc.block.d_mode = d_mode_from_string(d_mode);
    mc.validate();
    return mc;
}

TrainConfig ExperimentConfig::to_train_config() const {
    TrainConfig tc;
    tc.epochs = epochs;
    tc.patience = patience;
    tc.batch_size = batch_size;
    tc.loss_kind = loss_kind_from_string(loss);
    tc.adam.lr = lr;
    tc.adam.clip_norm = clip_norm;
    tc.lr_halving = lr_halving;
    tc.seed = seed;
    return tc;
}

MixupConfig ExperimentConfig::to_mixup_config() const {
    MixupConfig mc;
    mc.sigma = mixup_sigma;
    mc.mode = mixup_mode_from_string(mixup_mode);
    mc.enabled = mc.mode != MixupMode::off;
    return mc;
}

}  // namespace cmamba
