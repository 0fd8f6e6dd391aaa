#pragma once
// Flat key-value configuration covering training, model, loss, turbulence and detector
// settings.
//
// File syntax: one `key = value` per line; `#` starts a comment; blank lines are ignored.
// Booleans are true/false, lists are comma separated (channels_per_scale = 32,64,128).

#include <filesystem>
#include <string>
#include <vector>

#include "rmfat/checkpoint.hpp"
#include "rmfat/training.hpp"
#include "rmfat/turbulence_synth.hpp"

namespace rmfat {

struct RunConfig {
    TrainConfig train;
    TurbulenceParams turbulence;
};

struct ConfigKey {
    std::string name;
    std::string help;
};

/// Every accepted key, in canonical order.
const std::vector<ConfigKey>& config_schema();

bool is_config_key(const std::string& key);

/// Sets one key. Throws ConfigError naming the key for unknown keys or bad values.
void set_config_value(RunConfig& config, const std::string& key, const std::string& value);
std::string get_config_value(const RunConfig& config, const std::string& key);

/// Parses a document over the defaults. Unknown keys, duplicates and malformed lines are
/// errors that cite the line number.
KeyValues parse_config_text(const std::string& text);
KeyValues read_config_file(const std::filesystem::path& file);

/// Applies entries in order over config, then validates the result.
void apply_config(RunConfig& config, const KeyValues& entries);

/// Every key with its effective value, in schema order.
KeyValues dump_config(const RunConfig& config);
std::string format_config(const KeyValues& entries);

/// Rebuilds a config from a checkpoint snapshot.
RunConfig config_from_snapshot(const KeyValues& snapshot);

}  // namespace rmfat
