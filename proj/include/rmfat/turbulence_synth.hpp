#pragma once
// Paired clean/degraded sequence synthesis: temporally correlated, zero-mean tilt fields
// followed by a per-frame Gaussian blur.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "rmfat/video_core.hpp"

namespace rmfat {

struct TurbulenceParams {
    double tilt_strength = 1.5;   ///< per-frame RMS displacement magnitude, px
    double spatial_corr = 4.0;    ///< Gaussian sigma smoothing the tilt noise, px
    double temporal_corr = 0.5;   ///< AR(1) coefficient in [0, 1)
    double blur_sigma_min = 0.5;  ///< px
    double blur_sigma_max = 1.0;  ///< px
    uint64_t seed = 0;

    void validate() const;
};

/// Artifact-defined severity presets: "none", "light", "moderate", "severe".
TurbulenceParams severity_preset(const std::string& name, uint64_t seed = 0);

/// Preset used by the synth command: tilt = strength px, blur sigma in
/// [0.25 strength, 0.5 strength]. strength 0 is the identity degradation.
TurbulenceParams params_for_strength(double strength, uint64_t seed = 0);

/// Separable Gaussian blur with border replication. sigma == 0 returns the input tensor.
/// Accepts [C, H, W] tensors.
torch::Tensor gaussian_blur(const torch::Tensor& image, double sigma);

/// AR(1) series d_t = rho d_{t-1} + sqrt(1 - rho^2) n_t of smoothed white noise,
/// each frame rescaled so its RMS displacement equals tilt_strength. Double precision.
std::vector<FlowField> generate_tilt_series(const TurbulenceParams& params, int64_t frames,
                                            int64_t height, int64_t width);

struct DegradedSequence {
    VideoSequence degraded;
    std::vector<FlowField> tilts;
    std::vector<double> blur_sigmas;
};

/// Warps every clean frame by its tilt field, then blurs it.
DegradedSequence degrade_sequence(const VideoSequence& clean, const TurbulenceParams& params);

// -- manifests ------------------------------------------------------------------------

struct ManifestRecord {
    std::filesystem::path clean_dir;
    std::filesystem::path degraded_dir;
    uint64_t seed = 0;
    TurbulenceParams params;
};

nlohmann::json to_json(const TurbulenceParams& params);
TurbulenceParams params_from_json(const nlohmann::json& j);

/// One JSON object per line. Paths are stored relative to the manifest's directory
/// when possible and resolved against it on read.
void write_manifest(const std::vector<ManifestRecord>& records,
                    const std::filesystem::path& file);
std::vector<ManifestRecord> read_manifest(const std::filesystem::path& file);

}  // namespace rmfat
