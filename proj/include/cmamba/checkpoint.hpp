#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cmamba/tensor.hpp"

namespace cmamba {

// Checkpoint file: text manifest (config echo plus one line per parameter
// with name/shape/offset/bytes) followed by little-endian IEEE-754 doubles
// in declaration order. Round-trips are bit-exact.
void save_checkpoint(const std::string& path, const std::string& config_echo,
                     const std::vector<std::pair<std::string, Tensor>>& params);

struct Checkpoint {
    std::string config_echo;
    std::vector<std::pair<std::string, Tensor>> params;

    const Tensor* find(const std::string& name) const;
};

Checkpoint load_checkpoint(const std::string& path);

}  // namespace cmamba
