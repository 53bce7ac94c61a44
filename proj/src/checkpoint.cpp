#include "cmamba/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace cmamba {

namespace {

constexpr const char* kMagic = "CMAMBA-CKPT 1";

void put_le_double(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

double get_le_double(const char* p) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) {
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    }
    double v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const std::string& config_echo,
                     const std::vector<std::pair<std::string, Tensor>>& params) {
    std::ostringstream header;
    header << kMagic << "\n";
    std::size_t config_lines = 0;
    {
        std::istringstream cfg(config_echo);
        std::string line;
        while (std::getline(cfg, line)) ++config_lines;
    }
    header << "config " << config_lines << "\n" << config_echo;
    if (!config_echo.empty() && config_echo.back() != '\n') header << "\n";

    header << "params " << params.size() << "\n";
    std::size_t offset = 0;
    for (const auto& [name, p] : params) {
        header << name << " " << p.rank();
        for (std::size_t d : p.shape()) header << " " << d;
        const std::size_t nbytes = p.size() * 8;
        header << " " << offset << " " << nbytes << "\n";
        offset += nbytes;
    }
    header << "end\n";

    std::string blob;
    blob.reserve(offset);
    for (const auto& [name, p] : params) {
        for (double v : p.values()) put_le_double(blob, v);
    }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
    const std::string head = header.str();
    out.write(head.data(), static_cast<std::streamsize>(head.size()));
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

const Tensor* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, t] : params) {
        if (n == name) return &t;
    }
    return nullptr;
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);

    std::string line;
    if (!std::getline(in, line) || line != kMagic) {
        throw std::runtime_error("not a checkpoint file: " + path);
    }

    Checkpoint ckpt;
    std::size_t config_lines = 0;
    {
        if (!std::getline(in, line)) throw std::runtime_error("truncated checkpoint header");
        std::istringstream is(line);
        std::string word;
        is >> word >> config_lines;
        if (word != "config") throw std::runtime_error("malformed checkpoint header");
    }
    std::ostringstream cfg;
    for (std::size_t i = 0; i < config_lines; ++i) {
        if (!std::getline(in, line)) throw std::runtime_error("truncated checkpoint config");
        cfg << line << "\n";
    }
    ckpt.config_echo = cfg.str();

    std::size_t count = 0;
    {
        if (!std::getline(in, line)) throw std::runtime_error("truncated checkpoint header");
        std::istringstream is(line);
        std::string word;
        is >> word >> count;
        if (word != "params") throw std::runtime_error("malformed checkpoint header");
    }

    struct Entry {
        std::string name;
        Shape shape;
        std::size_t offset, nbytes;
    };
    std::vector<Entry> entries(count);
    for (auto& e : entries) {
        if (!std::getline(in, line)) throw std::runtime_error("truncated checkpoint manifest");
        std::istringstream is(line);
        std::size_t rank = 0;
        is >> e.name >> rank;
        e.shape.resize(rank);
        for (auto& d : e.shape) is >> d;
        is >> e.offset >> e.nbytes;
        if (!is) throw std::runtime_error("malformed manifest line: " + line);
    }
    if (!std::getline(in, line) || line != "end") throw std::runtime_error("missing checkpoint terminator");

    std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    for (const auto& e : entries) {
        if (e.offset + e.nbytes > blob.size()) throw std::runtime_error("checkpoint blob too short");
        const std::size_t n = e.nbytes / 8;
        if (n != numel(e.shape)) throw std::runtime_error("manifest shape/bytes mismatch for " + e.name);
        std::vector<double> vals(n);
        for (std::size_t i = 0; i < n; ++i) vals[i] = get_le_double(blob.data() + e.offset + 8 * i);
        ckpt.params.emplace_back(e.name, Tensor(e.shape, std::move(vals)));
    }
    return ckpt;
}

}  // namespace cmamba
