#pragma once
// Full-reference quality metrics, temporal consistency, and y-t slice diagnostics.

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "rmfat/video_core.hpp"

namespace rmfat {

inline constexpr double kPsnrCap = 100.0;

/// 10 log10(1 / MSE) on [0, 1] data; identical frames give kPsnrCap.
double psnr(const Frame& a, const Frame& b);

/// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), C1 = 0.01^2, C2 = 0.03^2,
/// valid window positions only, averaged over channels and positions.
double ssim(const Frame& a, const Frame& b);

/// Mean over t >= 1 of mean|frame_t - warp(frame_{t-1}, flows[t-1])|, where flows[t-1]
/// holds F_{t-1 -> t}. Zero for a single frame.
double temporal_consistency(const VideoSequence& seq, const std::vector<FlowField>& flows);

/// [3, H, t1 - t0] image whose column j is column x_column of frame t0 + j.
torch::Tensor yt_slice(const VideoSequence& seq, int64_t x_column, std::pair<int64_t, int64_t> frame_range);

/// Hook for learned perceptual metrics. None ships with the library.
class PerceptualMetric {
public:
    virtual ~PerceptualMetric() = default;
    virtual double distance(const Frame& a, const Frame& b) const = 0;
    virtual std::string name() const = 0;
};

struct FrameScore {
    double psnr = 0;
    double ssim = 0;
};

struct EvalReport {
    std::vector<FrameScore> per_frame;
    double psnr_mean = 0;
    double ssim_mean = 0;
    double temporal_consistency = 0;
    std::optional<double> lpips_mean;
    std::vector<std::string> sequence_ids;
    std::string config_hash;

    nlohmann::json to_json() const;
    static EvalReport from_json(const nlohmann::json& j);
};

/// Scores restored against reference frame by frame. flows (F_{t-1 -> t}, length n - 1)
/// drive the temporal-consistency term; zero flows are used when absent.
EvalReport evaluate(const VideoSequence& restored, const VideoSequence& reference,
                    const std::vector<FlowField>* flows = nullptr,
                    const PerceptualMetric* perceptual = nullptr);

/// Pools several per-sequence reports into one (means weighted by frame count).
EvalReport merge_reports(const std::vector<EvalReport>& reports);

/// FNV-1a 64-bit, hex encoded.
std::string fnv1a_hex(const std::string& text);

}  // namespace rmfat
