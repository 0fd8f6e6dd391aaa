#include "rmfat/turbulence_synth.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include "json.hpp"

namespace fs = std::filesystem;
namespace F = torch::nn::functional;

namespace rmfat {

void TurbulenceParams::validate() const {
    if (!(tilt_strength >= 0.0)) throw ConfigError("tilt_strength must be >= 0");
    if (!(spatial_corr >= 0.0)) throw ConfigError("spatial_corr must be >= 0");
    if (!(temporal_corr >= 0.0 && temporal_corr < 1.0)) {
        throw ConfigError("temporal_corr must lie in [0, 1)");
    }
    if (!(blur_sigma_min >= 0.0 && blur_sigma_max >= 0.0)) {
        throw ConfigError("blur sigmas must be >= 0");
    }
    if (blur_sigma_min > blur_sigma_max) throw ConfigError("blur_sigma_min exceeds blur_sigma_max");
}

TurbulenceParams severity_preset(const std::string& name, uint64_t seed) {
    TurbulenceParams p;
    p.seed = seed;
    if (name == "none") {
        p.tilt_strength = 0;
        p.blur_sigma_min = p.blur_sigma_max = 0;
    } else if (name == "light") {
        p.tilt_strength = 0.75;
        p.blur_sigma_min = 0.25;
        p.blur_sigma_max = 0.5;
    } else if (name == "moderate") {
        p.tilt_strength = 1.5;
        p.blur_sigma_min = 0.5;
        p.blur_sigma_max = 1.0;
    } else if (name == "severe") {
        p.tilt_strength = 3.0;
        p.spatial_corr = 6.0;
        p.blur_sigma_min = 1.0;
        p.blur_sigma_max = 2.0;
    } else {
        throw ConfigError("unknown severity preset '" + name + "'");
    }
    return p;
}

TurbulenceParams params_for_strength(double strength, uint64_t seed) {
    if (!(strength >= 0.0)) throw ConfigError("strength must be >= 0");
    TurbulenceParams p;
    p.tilt_strength = strength;
    p.blur_sigma_min = 0.25 * strength;
    p.blur_sigma_max = 0.5 * strength;
    p.seed = seed;
    return p;
}

torch::Tensor gaussian_blur(const torch::Tensor& image, double sigma) {
    if (image.dim() != 3) throw ShapeError("gaussian_blur: expected [C, H, W]");
    if (sigma <= 0.0) return image;
    const int64_t radius = static_cast<int64_t>(std::ceil(3.0 * sigma));
    const auto opts = torch::TensorOptions().dtype(image.scalar_type());
    auto taps = torch::arange(-radius, radius + 1, torch::TensorOptions().dtype(torch::kFloat64));
    auto kernel = torch::exp(-(taps * taps) / (2.0 * sigma * sigma));
    kernel = (kernel / kernel.sum()).to(opts.dtype());
    const int64_t c = image.size(0);
    auto x = image.unsqueeze(0);
    x = F::pad(x, F::PadFuncOptions({radius, radius, radius, radius}).mode(torch::kReplicate));
    auto kx = kernel.view({1, 1, 1, -1}).expand({c, 1, 1, 2 * radius + 1});
    auto ky = kernel.view({1, 1, -1, 1}).expand({c, 1, 2 * radius + 1, 1});
    x = F::conv2d(x, kx, F::Conv2dFuncOptions().groups(c));
    x = F::conv2d(x, ky, F::Conv2dFuncOptions().groups(c));
    return x.squeeze(0);
}

namespace {

torch::Tensor unit_rms_noise(std::mt19937_64& rng, int64_t h, int64_t w, double spatial_corr) {
    std::normal_distribution<double> normal(0.0, 1.0);
    auto noise = torch::empty({2, h, w}, torch::kFloat64);
    auto* data = noise.data_ptr<double>();
    for (int64_t i = 0; i < noise.numel(); ++i) data[i] = normal(rng);
    noise = gaussian_blur(noise, spatial_corr);
    const double rms = std::sqrt((noise * noise).sum(0).mean().item<double>());
    return rms > 0.0 ? noise / rms : noise;
}

}  // namespace

std::vector<FlowField> generate_tilt_series(const TurbulenceParams& params, int64_t frames,
                                            int64_t height, int64_t width) {
    params.validate();
    if (frames < 1) throw ConfigError("generate_tilt_series: frame count must be >= 1");
    if (height < 1 || width < 1) throw ShapeError("generate_tilt_series: empty raster");
    std::vector<FlowField> out;
    out.reserve(static_cast<std::size_t>(frames));
    if (params.tilt_strength == 0.0) {
        for (int64_t t = 0; t < frames; ++t) out.push_back(FlowField::zeros(height, width));
        return out;
    }
    std::mt19937_64 rng(params.seed);
    const double rho = params.temporal_corr;
    const double innovation = std::sqrt(1.0 - rho * rho);
    torch::Tensor state;
    for (int64_t t = 0; t < frames; ++t) {
        auto noise = unit_rms_noise(rng, height, width, params.spatial_corr);
        state = t == 0 ? noise : rho * state + innovation * noise;
        const double rms = std::sqrt((state * state).sum(0).mean().item<double>());
        auto tilt = rms > 0.0 ? state * (params.tilt_strength / rms) : torch::zeros_like(state);
        out.emplace_back(tilt, Scale::L1);
    }
    return out;
}

DegradedSequence degrade_sequence(const VideoSequence& clean, const TurbulenceParams& params) {
    params.validate();
    clean.validate();
    DegradedSequence out;
    out.tilts = generate_tilt_series(params, static_cast<int64_t>(clean.size()), clean.height(),
                                     clean.width());
    // separate stream so blur draws do not perturb the tilt noise
    std::mt19937_64 blur_rng(params.seed ^ 0x9e3779b97f4a7c15ULL);
    std::uniform_real_distribution<double> pick_sigma(params.blur_sigma_min, params.blur_sigma_max);
    out.degraded.role = SequenceRole::Degraded;
    out.degraded.frame_rate = clean.frame_rate;
    for (std::size_t t = 0; t < clean.size(); ++t) {
        const double sigma =
            params.blur_sigma_max > params.blur_sigma_min ? pick_sigma(blur_rng) : params.blur_sigma_min;
        out.blur_sigmas.push_back(sigma);
        const auto& src = clean.frames[t].pixels();
        auto warped = params.tilt_strength == 0.0 ? src : warp(src, out.tilts[t].field());
        out.degraded.frames.emplace_back(gaussian_blur(warped, sigma));
    }
    return out;
}

// -- manifests ------------------------------------------------------------------------

nlohmann::json to_json(const TurbulenceParams& p) {
    return {{"tilt_strength", p.tilt_strength},   {"spatial_corr", p.spatial_corr},
            {"temporal_corr", p.temporal_corr},   {"blur_sigma_min", p.blur_sigma_min},
            {"blur_sigma_max", p.blur_sigma_max}, {"seed", p.seed}};
}

TurbulenceParams params_from_json(const nlohmann::json& j) {
    TurbulenceParams p;
    p.tilt_strength = j.at("tilt_strength").get<double>();
    p.spatial_corr = j.at("spatial_corr").get<double>();
    p.temporal_corr = j.at("temporal_corr").get<double>();
    p.blur_sigma_min = j.at("blur_sigma_min").get<double>();
    p.blur_sigma_max = j.at("blur_sigma_max").get<double>();
    p.seed = j.at("seed").get<uint64_t>();
    p.validate();
    return p;
}

void write_manifest(const std::vector<ManifestRecord>& records, const fs::path& file) {
    if (file.has_parent_path()) fs::create_directories(file.parent_path());
    std::ofstream out(file);
    if (!out) throw IoError("cannot write manifest " + file.string());
    const fs::path base = file.has_parent_path() ? file.parent_path() : fs::path(".");
    auto rel = [&](const fs::path& p) {
        std::error_code ec;
        auto r = fs::relative(p, base, ec);
        return (ec || r.empty()) ? p.string() : r.string();
    };
    for (const auto& r : records) {
        nlohmann::json j = {{"clean_dir", rel(r.clean_dir)},
                            {"degraded_dir", rel(r.degraded_dir)},
                            {"seed", r.seed},
                            {"params", to_json(r.params)}};
        out << j.dump() << "\n";
    }
    if (!out) throw IoError("failed writing manifest " + file.string());
}

std::vector<ManifestRecord> read_manifest(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw IoError("cannot read manifest " + file.string());
    const fs::path base = file.has_parent_path() ? file.parent_path() : fs::path(".");
    std::vector<ManifestRecord> records;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            ManifestRecord r;
            auto resolve = [&](const std::string& p) {
                fs::path path(p);
                return path.is_absolute() ? path : base / path;
            };
            r.clean_dir = resolve(j.at("clean_dir").get<std::string>());
            r.degraded_dir = resolve(j.at("degraded_dir").get<std::string>());
            r.seed = j.at("seed").get<uint64_t>();
            r.params = j.contains("params") ? params_from_json(j.at("params")) : TurbulenceParams{};
            records.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw IoError("manifest " + file.string() + " line " + std::to_string(line_no) +
                          ": " + e.what());
        }
    }
    if (records.empty()) throw IoError("manifest " + file.string() + " has no records");
    return records;
}

}  // namespace rmfat
