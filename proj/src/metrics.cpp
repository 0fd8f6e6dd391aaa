#include "rmfat/metrics.hpp"

#include <cmath>
#include <cstdio>

namespace F = torch::nn::functional;

namespace rmfat {
namespace {

void require_same_dims(const Frame& a, const Frame& b, const char* what) {
    if (!a.pixels().sizes().equals(b.pixels().sizes())) {
        throw ShapeError(std::string(what) + ": frame dimensions differ");
    }
}

torch::Tensor as_double(const Frame& f) { return f.pixels().detach().to(torch::kFloat64); }

torch::Tensor gaussian_window(int64_t size, double sigma) {
    auto taps = torch::arange(size, torch::kFloat64) - static_cast<double>(size - 1) / 2.0;
    auto g = torch::exp(-(taps * taps) / (2.0 * sigma * sigma));
    g = g / g.sum();
    return torch::outer(g, g);
}

}  // namespace

double psnr(const Frame& a, const Frame& b) {
    require_same_dims(a, b, "psnr");
    auto d = as_double(a) - as_double(b);
    const double mse = (d * d).mean().item<double>();
    if (mse <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim(const Frame& a, const Frame& b) {
    constexpr int64_t kWindow = 11;
    require_same_dims(a, b, "ssim");
    if (a.height() < kWindow || a.width() < kWindow) {
        throw ShapeError("ssim: frame " + std::to_string(a.height()) + "x" +
                         std::to_string(a.width()) + " is smaller than the 11x11 window");
    }
    const double c1 = 0.01 * 0.01;
    const double c2 = 0.03 * 0.03;
    auto x = as_double(a).unsqueeze(1);  // channels as batch: [3, 1, H, W]
    auto y = as_double(b).unsqueeze(1);
    auto win = gaussian_window(kWindow, 1.5).view({1, 1, kWindow, kWindow});
    auto filt = [&](const torch::Tensor& t) { return F::conv2d(t, win); };
    auto mu_x = filt(x);
    auto mu_y = filt(y);
    auto mu_xx = mu_x * mu_x;
    auto mu_yy = mu_y * mu_y;
    auto mu_xy = mu_x * mu_y;
    auto s_xx = filt(x * x) - mu_xx;
    auto s_yy = filt(y * y) - mu_yy;
    auto s_xy = filt(x * y) - mu_xy;
    auto num = (2.0 * mu_xy + c1) * (2.0 * s_xy + c2);
    auto den = (mu_xx + mu_yy + c1) * (s_xx + s_yy + c2);
    return (num / den).mean().item<double>();
}

double temporal_consistency(const VideoSequence& seq, const std::vector<FlowField>& flows) {
    seq.validate();
    if (flows.size() + 1 != seq.size()) {
        throw ShapeError("temporal_consistency: expected " + std::to_string(seq.size() - 1) +
                         " flows, got " + std::to_string(flows.size()));
    }
    if (seq.size() < 2) return 0.0;
    double total = 0.0;
    for (std::size_t t = 1; t < seq.size(); ++t) {
        auto prev = as_double(seq.frames[t - 1]);
        auto aligned = warp(prev, flows[t - 1].field().detach().to(torch::kFloat64));
        total += (as_double(seq.frames[t]) - aligned).abs().mean().item<double>();
    }
    return total / static_cast<double>(seq.size() - 1);
}

torch::Tensor yt_slice(const VideoSequence& seq, int64_t x_column,
                       std::pair<int64_t, int64_t> frame_range) {
    seq.validate();
    const auto [t0, t1] = frame_range;
    const auto n = static_cast<int64_t>(seq.size());
    if (x_column < 0 || x_column >= seq.width()) {
        throw ShapeError("yt_slice: column " + std::to_string(x_column) + " outside [0, " +
                         std::to_string(seq.width() - 1) + "]");
    }
    if (t0 < 0 || t1 > n || t0 >= t1) {
        throw ShapeError("yt_slice: frame range [" + std::to_string(t0) + ", " +
                         std::to_string(t1) + ") invalid; need 0 <= t0 < t1 <= " +
                         std::to_string(n));
    }
    std::vector<torch::Tensor> columns;
    columns.reserve(static_cast<std::size_t>(t1 - t0));
    for (int64_t t = t0; t < t1; ++t) {
        columns.push_back(seq.frames[static_cast<std::size_t>(t)].pixels().detach().select(2, x_column));
    }
    return torch::stack(columns, 2);
}

// -- reports --------------------------------------------------------------------------

nlohmann::json EvalReport::to_json() const {
    nlohmann::json frames = nlohmann::json::array();
    for (const auto& f : per_frame) frames.push_back({{"psnr", f.psnr}, {"ssim", f.ssim}});
    nlohmann::json lpips = lpips_mean ? nlohmann::json(*lpips_mean) : nlohmann::json(nullptr);
    return {{"per_frame", frames},
            {"aggregate",
             {{"psnr_mean", psnr_mean},
              {"ssim_mean", ssim_mean},
              {"temporal_consistency", temporal_consistency},
              {"lpips_mean", lpips}}},
            {"metadata", {{"sequence_ids", sequence_ids}, {"config_hash", config_hash}}}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
    EvalReport r;
    for (const auto& f : j.at("per_frame")) {
        r.per_frame.push_back({f.at("psnr").get<double>(), f.at("ssim").get<double>()});
    }
    const auto& agg = j.at("aggregate");
    r.psnr_mean = agg.at("psnr_mean").get<double>();
    r.ssim_mean = agg.at("ssim_mean").get<double>();
    r.temporal_consistency = agg.at("temporal_consistency").get<double>();
    if (!agg.at("lpips_mean").is_null()) r.lpips_mean = agg.at("lpips_mean").get<double>();
    const auto& meta = j.at("metadata");
    r.sequence_ids = meta.at("sequence_ids").get<std::vector<std::string>>();
    r.config_hash = meta.at("config_hash").get<std::string>();
    return r;
}

EvalReport evaluate(const VideoSequence& restored, const VideoSequence& reference,
                    const std::vector<FlowField>* flows, const PerceptualMetric* perceptual) {
    restored.validate();
    reference.validate();
    if (restored.size() != reference.size()) {
        throw ShapeError("evaluate: sequence lengths differ (" + std::to_string(restored.size()) +
                         " vs " + std::to_string(reference.size()) + ")");
    }
    EvalReport report;
    double psnr_sum = 0.0, ssim_sum = 0.0, lpips_sum = 0.0;
    for (std::size_t t = 0; t < restored.size(); ++t) {
        FrameScore s{psnr(restored.frames[t], reference.frames[t]),
                     ssim(restored.frames[t], reference.frames[t])};
        psnr_sum += s.psnr;
        ssim_sum += s.ssim;
        if (perceptual) lpips_sum += perceptual->distance(restored.frames[t], reference.frames[t]);
        report.per_frame.push_back(s);
    }
    const auto n = static_cast<double>(restored.size());
    report.psnr_mean = psnr_sum / n;
    report.ssim_mean = ssim_sum / n;
    if (perceptual) report.lpips_mean = lpips_sum / n;
    if (flows) {
        report.temporal_consistency = temporal_consistency(restored, *flows);
    } else {
        std::vector<FlowField> zero(restored.size() - 1,
                                    FlowField::zeros(restored.height(), restored.width()));
        report.temporal_consistency = temporal_consistency(restored, zero);
    }
    return report;
}

EvalReport merge_reports(const std::vector<EvalReport>& reports) {
    EvalReport out;
    double psnr_sum = 0, ssim_sum = 0, tc_sum = 0, lpips_sum = 0;
    bool all_lpips = !reports.empty();
    for (const auto& r : reports) {
        const auto n = static_cast<double>(r.per_frame.size());
        out.per_frame.insert(out.per_frame.end(), r.per_frame.begin(), r.per_frame.end());
        psnr_sum += r.psnr_mean * n;
        ssim_sum += r.ssim_mean * n;
        tc_sum += r.temporal_consistency * n;
        if (r.lpips_mean) lpips_sum += *r.lpips_mean * n; else all_lpips = false;
        out.sequence_ids.insert(out.sequence_ids.end(), r.sequence_ids.begin(), r.sequence_ids.end());
    }
    const auto total = static_cast<double>(out.per_frame.size());
    if (total > 0) {
        out.psnr_mean = psnr_sum / total;
        out.ssim_mean = ssim_sum / total;
        out.temporal_consistency = tc_sum / total;
        if (all_lpips) out.lpips_mean = lpips_sum / total;
    }
    if (!reports.empty()) out.config_hash = reports.front().config_hash;
    return out;
}

std::string fnv1a_hex(const std::string& text) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace rmfat
