#pragma once
// Binary checkpoint container.
//
// Layout: 8-byte magic "RMFATCK1", little-endian u64 header length, a UTF-8 JSON header,
// the tensor payload, and a trailing little-endian u32 CRC-32 over everything before it.
// The header lists every tensor as {name, section, dtype, shape, offset, nbytes}; offsets
// are relative to the start of the payload. Parameters come first, in module order,
// followed by the optimizer moments.

#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "rmfat/error.hpp"

namespace rmfat {

using NamedTensors = std::vector<std::pair<std::string, torch::Tensor>>;
using KeyValues = std::vector<std::pair<std::string, std::string>>;

struct OptimizerState {
    int64_t step = 0;
    NamedTensors first_moment;
    NamedTensors second_moment;
};

struct Checkpoint {
    NamedTensors parameters;
    KeyValues config;
    /// Completed epochs; a resumed run starts at this epoch.
    int64_t epoch = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    std::string rng_state;
    OptimizerState optimizer;
};

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& file);

/// Throws IoError on bad magic, truncation or checksum mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& file);

/// Detached, contiguous copies of every parameter, in registration order.
NamedTensors snapshot_parameters(const torch::nn::Module& module);

/// Copies tensors into the module's parameters. Missing, extra or mis-shaped tensors
/// raise ConfigError naming the tensor.
void apply_parameters(torch::nn::Module& module, const NamedTensors& tensors);

/// Looks up a key in a config snapshot.
const std::string* find_value(const KeyValues& values, const std::string& key);

}  // namespace rmfat
