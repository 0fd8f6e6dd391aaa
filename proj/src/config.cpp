#include "rmfat/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace rmfat {
namespace {

struct Entry {
    ConfigKey key;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
    throw ConfigError("config key '" + key + "': expected " + expected + ", got '" + value + "'");
}

int64_t to_int(const std::string& key, const std::string& v) {
    int64_t out = 0;
    const auto* end = v.data() + v.size();
    auto [p, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || p != end) bad_value(key, v, "an integer");
    return out;
}

uint64_t to_uint(const std::string& key, const std::string& v) {
    uint64_t out = 0;
    const auto* end = v.data() + v.size();
    auto [p, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || p != end) bad_value(key, v, "a non-negative integer");
    return out;
}

double to_real(const std::string& key, const std::string& v) {
    double out = 0;
    const auto* end = v.data() + v.size();
    auto [p, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || p != end || !std::isfinite(out)) bad_value(key, v, "a number");
    return out;
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    bad_value(key, v, "true or false");
}

std::string fmt(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, p);
}

std::string fmt(bool v) { return v ? "true" : "false"; }

template <class T>
Entry int_entry(std::string name, std::string help, T RunConfig::*outer, int64_t T::*field) {
    return {{name, std::move(help)},
            [=](RunConfig& c, const std::string& v) { (c.*outer).*field = to_int(name, v); },
            [=](const RunConfig& c) { return std::to_string((c.*outer).*field); }};
}

template <class T>
Entry uint_entry(std::string name, std::string help, T RunConfig::*outer, uint64_t T::*field) {
    return {{name, std::move(help)},
            [=](RunConfig& c, const std::string& v) { (c.*outer).*field = to_uint(name, v); },
            [=](const RunConfig& c) { return std::to_string((c.*outer).*field); }};
}

template <class T>
Entry real_entry(std::string name, std::string help, T RunConfig::*outer, double T::*field) {
    return {{name, std::move(help)},
            [=](RunConfig& c, const std::string& v) { (c.*outer).*field = to_real(name, v); },
            [=](const RunConfig& c) { return fmt((c.*outer).*field); }};
}

template <class T>
Entry bool_entry(std::string name, std::string help, T RunConfig::*outer, bool T::*field) {
    return {{name, std::move(help)},
            [=](RunConfig& c, const std::string& v) { (c.*outer).*field = to_bool(name, v); },
            [=](const RunConfig& c) { return fmt((c.*outer).*field); }};
}

template <class T>
Entry string_entry(std::string name, std::string help, T RunConfig::*outer, std::string T::*field) {
    return {{name, std::move(help)},
            [=](RunConfig& c, const std::string& v) { (c.*outer).*field = v; },
            [=](const RunConfig& c) { return (c.*outer).*field; }};
}

const std::vector<Entry>& entries() {
    static const std::vector<Entry> table = [] {
        using R = RunConfig;
        std::vector<Entry> t;
        // training
        t.push_back(int_entry("epochs", "training epochs", &R::train, &TrainConfig::epochs));
        t.push_back(int_entry("batch_size", "clips per optimizer step", &R::train, &TrainConfig::batch_size));
        t.push_back(int_entry("patch_size", "square training patch side (multiple of 4)", &R::train,
                              &TrainConfig::patch_size));
        t.push_back(real_entry("lr_initial", "initial Adam learning rate", &R::train, &TrainConfig::lr_initial));
        t.push_back(int_entry("lr_step_epochs", "epochs between learning-rate decays", &R::train,
                              &TrainConfig::lr_step_epochs));
        t.push_back(real_entry("lr_gamma", "learning-rate decay factor", &R::train, &TrainConfig::lr_gamma));
        t.push_back(uint_entry("seed", "training RNG seed", &R::train, &TrainConfig::seed));
        t.push_back(int_entry("clip_length", "frames per training clip", &R::train, &TrainConfig::clip_length));
        t.push_back(int_entry("bptt_window", "recurrent steps per backward pass", &R::train,
                              &TrainConfig::bptt_window));
        t.push_back(real_entry("grad_clip", "global gradient-norm clip (0 disables)", &R::train,
                               &TrainConfig::grad_clip));
        t.push_back(bool_entry("recurrent", "feed the previous restored frame (false: previous input)",
                               &R::train, &TrainConfig::recurrent));
        t.push_back(string_entry("detector", "detector for the detection loss, or none", &R::train,
                                 &TrainConfig::detector));
        // loss
        t.push_back({{"epsilon", "Charbonnier epsilon"},
                     [](R& c, const std::string& v) { c.train.loss.epsilon = to_real("epsilon", v); },
                     [](const R& c) { return fmt(c.train.loss.epsilon); }});
        t.push_back({{"lambda_dwt", "wavelet loss weight"},
                     [](R& c, const std::string& v) { c.train.loss.lambda_dwt = to_real("lambda_dwt", v); },
                     [](const R& c) { return fmt(c.train.loss.lambda_dwt); }});
        t.push_back({{"lambda_flow_max", "flow loss weight after the ramp"},
                     [](R& c, const std::string& v) { c.train.loss.lambda_flow_max = to_real("lambda_flow_max", v); },
                     [](const R& c) { return fmt(c.train.loss.lambda_flow_max); }});
        t.push_back({{"lambda_det_max", "detection loss weight after the ramp"},
                     [](R& c, const std::string& v) { c.train.loss.lambda_det_max = to_real("lambda_det_max", v); },
                     [](const R& c) { return fmt(c.train.loss.lambda_det_max); }});
        t.push_back({{"ramp_epochs", "epochs of linear ramp for flow and detection weights"},
                     [](R& c, const std::string& v) { c.train.loss.ramp_epochs = to_int("ramp_epochs", v); },
                     [](const R& c) { return std::to_string(c.train.loss.ramp_epochs); }});
        t.push_back({{"wavelet_family", "wavelet for the sub-band loss (haar)"},
                     [](R& c, const std::string& v) { c.train.loss.wavelet_family = v; },
                     [](const R& c) { return c.train.loss.wavelet_family; }});
        t.push_back({{"wavelet_levels", "wavelet decomposition levels"},
                     [](R& c, const std::string& v) { c.train.loss.wavelet_levels = to_int("wavelet_levels", v); },
                     [](const R& c) { return std::to_string(c.train.loss.wavelet_levels); }});
        t.push_back({{"history_k", "past outputs in the flow loss"},
                     [](R& c, const std::string& v) { c.train.loss.history_k = to_int("history_k", v); },
                     [](const R& c) { return std::to_string(c.train.loss.history_k); }});
        t.push_back({{"use_wavelet", "enable the wavelet loss"},
                     [](R& c, const std::string& v) { c.train.loss.use_wavelet = to_bool("use_wavelet", v); },
                     [](const R& c) { return fmt(c.train.loss.use_wavelet); }});
        t.push_back({{"use_detection", "enable the detection loss"},
                     [](R& c, const std::string& v) { c.train.loss.use_detection = to_bool("use_detection", v); },
                     [](const R& c) { return fmt(c.train.loss.use_detection); }});
        t.push_back({{"use_flow", "enable the flow-consistency loss"},
                     [](R& c, const std::string& v) { c.train.loss.use_flow = to_bool("use_flow", v); },
                     [](const R& c) { return fmt(c.train.loss.use_flow); }});
        // model
        t.push_back({{"channels_per_scale", "feature widths at the three scales"},
                     [](R& c, const std::string& v) {
                         std::array<int64_t, 3> ch{};
                         std::stringstream ss(v);
                         std::string item;
                         std::size_t n = 0;
                         while (std::getline(ss, item, ',')) {
                             if (n == 3) bad_value("channels_per_scale", v, "three comma-separated integers");
                             ch[n++] = to_int("channels_per_scale", trim(item));
                         }
                         if (n != 3) bad_value("channels_per_scale", v, "three comma-separated integers");
                         c.train.model.blocks.channels_per_scale = ch;
                     },
                     [](const R& c) {
                         const auto& ch = c.train.model.blocks.channels_per_scale;
                         return std::to_string(ch[0]) + "," + std::to_string(ch[1]) + "," + std::to_string(ch[2]);
                     }});
        t.push_back({{"attention_heads", "attention heads per block"},
                     [](R& c, const std::string& v) { c.train.model.blocks.attention_heads = to_int("attention_heads", v); },
                     [](const R& c) { return std::to_string(c.train.model.blocks.attention_heads); }});
        t.push_back({{"ffn_expansion", "feed-forward hidden width factor"},
                     [](R& c, const std::string& v) { c.train.model.blocks.ffn_expansion = to_real("ffn_expansion", v); },
                     [](const R& c) { return fmt(c.train.model.blocks.ffn_expansion); }});
        t.push_back({{"norm_epsilon", "layer-norm epsilon"},
                     [](R& c, const std::string& v) { c.train.model.blocks.norm_epsilon = to_real("norm_epsilon", v); },
                     [](const R& c) { return fmt(c.train.model.blocks.norm_epsilon); }});
        t.push_back({{"num_encoder_blocks_per_scale", "transformer blocks per encoder scale"},
                     [](R& c, const std::string& v) {
                         c.train.model.num_encoder_blocks_per_scale = to_int("num_encoder_blocks_per_scale", v);
                     },
                     [](const R& c) { return std::to_string(c.train.model.num_encoder_blocks_per_scale); }});
        t.push_back({{"num_decoder_blocks_per_scale", "transformer blocks per decoder scale"},
                     [](R& c, const std::string& v) {
                         c.train.model.num_decoder_blocks_per_scale = to_int("num_decoder_blocks_per_scale", v);
                     },
                     [](const R& c) { return std::to_string(c.train.model.num_decoder_blocks_per_scale); }});
        t.push_back({{"num_refinement_blocks", "transformer blocks before the output head"},
                     [](R& c, const std::string& v) {
                         c.train.model.num_refinement_blocks = to_int("num_refinement_blocks", v);
                     },
                     [](const R& c) { return std::to_string(c.train.model.num_refinement_blocks); }});
        t.push_back({{"decoder_warp", "flow-warp alignment in the decoder"},
                     [](R& c, const std::string& v) { c.train.model.decoder_warp = to_bool("decoder_warp", v); },
                     [](const R& c) { return fmt(c.train.model.decoder_warp); }});
        t.push_back({{"multiscale_warp", "warp at every decoder scale (false: coarsest only)"},
                     [](R& c, const std::string& v) { c.train.model.multiscale_warp = to_bool("multiscale_warp", v); },
                     [](const R& c) { return fmt(c.train.model.multiscale_warp); }});
        t.push_back({{"init_seed", "parameter initialization seed"},
                     [](R& c, const std::string& v) { c.train.model.init_seed = to_uint("init_seed", v); },
                     [](const R& c) { return std::to_string(c.train.model.init_seed); }});
        // turbulence
        t.push_back(real_entry("tilt_strength", "synthetic tilt RMS, px", &R::turbulence,
                               &TurbulenceParams::tilt_strength));
        t.push_back(real_entry("spatial_corr", "tilt smoothing sigma, px", &R::turbulence,
                               &TurbulenceParams::spatial_corr));
        t.push_back(real_entry("temporal_corr", "tilt AR(1) coefficient", &R::turbulence,
                               &TurbulenceParams::temporal_corr));
        t.push_back(real_entry("blur_sigma_min", "minimum blur sigma, px", &R::turbulence,
                               &TurbulenceParams::blur_sigma_min));
        t.push_back(real_entry("blur_sigma_max", "maximum blur sigma, px", &R::turbulence,
                               &TurbulenceParams::blur_sigma_max));
        t.push_back(uint_entry("turbulence_seed", "synthesis seed", &R::turbulence, &TurbulenceParams::seed));
        return t;
    }();
    return table;
}

const Entry& find_entry(const std::string& key) {
    for (const auto& e : entries()) {
        if (e.key.name == key) return e;
    }
    throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

const std::vector<ConfigKey>& config_schema() {
    static const std::vector<ConfigKey> keys = [] {
        std::vector<ConfigKey> out;
        for (const auto& e : entries()) out.push_back(e.key);
        return out;
    }();
    return keys;
}

bool is_config_key(const std::string& key) {
    for (const auto& e : entries()) {
        if (e.key.name == key) return true;
    }
    return false;
}

void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
    find_entry(key).set(config, trim(value));
}

std::string get_config_value(const RunConfig& config, const std::string& key) {
    return find_entry(key).get(config);
}

KeyValues parse_config_text(const std::string& text) {
    KeyValues out;
    std::set<std::string> seen;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
        }
        const auto key = trim(line.substr(0, eq));
        const auto value = trim(line.substr(eq + 1));
        if (!is_config_key(key)) {
            throw ConfigError("config line " + std::to_string(lineno) + ": unknown config key '" + key + "'");
        }
        if (!seen.insert(key).second) {
            throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
        }
        out.emplace_back(key, value);
    }
    return out;
}

KeyValues read_config_file(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot read config file " + file.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

void apply_config(RunConfig& config, const KeyValues& values) {
    for (const auto& [k, v] : values) set_config_value(config, k, v);
    config.train.validate();
    config.turbulence.validate();
}

KeyValues dump_config(const RunConfig& config) {
    KeyValues out;
    for (const auto& e : entries()) out.emplace_back(e.key.name, e.get(config));
    return out;
}

std::string format_config(const KeyValues& values) {
    std::string out;
    for (const auto& [k, v] : values) out += k + " = " + v + "\n";
    return out;
}

RunConfig config_from_snapshot(const KeyValues& snapshot) {
    RunConfig config;
    apply_config(config, snapshot);
    return config;
}

}  // namespace rmfat
