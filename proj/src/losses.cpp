#include "rmfat/losses.hpp"

#include <algorithm>
#include <cmath>

namespace rmfat {

void LossConfig::validate() const {
    if (!(epsilon > 0.0)) throw ConfigError("epsilon must be > 0");
    if (!(lambda_dwt >= 0.0 && lambda_flow_max >= 0.0 && lambda_det_max >= 0.0)) {
        throw ConfigError("loss weights must be >= 0");
    }
    if (ramp_epochs < 0) throw ConfigError("ramp_epochs must be >= 0");
    if (wavelet_family != "haar") {
        throw ConfigError("unsupported wavelet_family '" + wavelet_family + "' (only haar)");
    }
    if (wavelet_levels < 1) throw ConfigError("wavelet_levels must be >= 1");
    if (history_k < 0) throw ConfigError("history_k must be >= 0");
}

namespace {

double ramp(double max_weight, int64_t epoch, int64_t ramp_epochs) {
    if (ramp_epochs <= 0) return max_weight;
    const double frac = std::min(1.0, static_cast<double>(std::max<int64_t>(epoch, 0)) /
                                          static_cast<double>(ramp_epochs));
    return max_weight * frac;
}

}  // namespace

double LossConfig::flow_weight(int64_t epoch) const { return ramp(lambda_flow_max, epoch, ramp_epochs); }

double LossConfig::detection_weight(int64_t epoch) const {
    return ramp(lambda_det_max, epoch, ramp_epochs);
}

torch::Tensor charbonnier(const torch::Tensor& pred, const torch::Tensor& target, double epsilon) {
    if (!pred.sizes().equals(target.sizes())) throw ShapeError("charbonnier: shape mismatch");
    auto d = pred - target;
    return torch::sqrt(d * d + epsilon * epsilon).mean();
}

HaarBands haar_dwt(const torch::Tensor& x) {
    const int64_t h = x.size(-2), w = x.size(-1);
    if (h % 2 != 0 || w % 2 != 0) {
        throw ShapeError("haar_dwt: dims " + std::to_string(h) + "x" + std::to_string(w) +
                         " are not divisible by 2");
    }
    using torch::indexing::Slice;
    using torch::indexing::Ellipsis;
    using torch::indexing::None;
    auto a = x.index({Ellipsis, Slice(0, None, 2), Slice(0, None, 2)});
    auto b = x.index({Ellipsis, Slice(0, None, 2), Slice(1, None, 2)});
    auto c = x.index({Ellipsis, Slice(1, None, 2), Slice(0, None, 2)});
    auto d = x.index({Ellipsis, Slice(1, None, 2), Slice(1, None, 2)});
    return {(a + b + c + d) * 0.5, (a + b - c - d) * 0.5, (a - b + c - d) * 0.5,
            (a - b - c + d) * 0.5};
}

std::vector<torch::Tensor> wavelet_subbands(const torch::Tensor& x, int64_t levels) {
    if (levels < 1) throw ConfigError("wavelet levels must be >= 1");
    const int64_t div = int64_t{1} << levels;
    if (x.size(-2) % div != 0 || x.size(-1) % div != 0) {
        throw ShapeError("wavelet_loss: frame dims must be divisible by 2^levels = " +
                         std::to_string(div));
    }
    std::vector<torch::Tensor> bands;
    auto approx = x;
    for (int64_t l = 0; l < levels; ++l) {
        auto hb = haar_dwt(approx);
        bands.push_back(hb.lh);
        bands.push_back(hb.hl);
        bands.push_back(hb.hh);
        approx = hb.ll;
    }
    bands.push_back(approx);
    return bands;
}

torch::Tensor wavelet_loss(const torch::Tensor& pred, const torch::Tensor& target,
                           const LossConfig& config) {
    if (!pred.sizes().equals(target.sizes())) throw ShapeError("wavelet_loss: shape mismatch");
    const auto pb = wavelet_subbands(pred, config.wavelet_levels);
    const auto tb = wavelet_subbands(target, config.wavelet_levels);
    auto total = charbonnier(pb[0], tb[0], config.epsilon);
    for (std::size_t i = 1; i < pb.size(); ++i) total = total + charbonnier(pb[i], tb[i], config.epsilon);
    return total;
}

double history_weight(std::size_t k) { return std::ldexp(1.0, -static_cast<int>(k)); }

torch::Tensor flow_consistency_loss(const torch::Tensor& current, const WarpedHistory& history) {
    auto total = torch::zeros({}, current.options());
    for (std::size_t i = 0; i < history.warped.size(); ++i) {
        const auto& w = history.warped[i].pixels();
        if (!w.sizes().equals(current.sizes())) {
            throw ShapeError("flow_consistency_loss: history frame dims differ from current");
        }
        total = total + history_weight(i + 1) * (current - w).abs().mean();
    }
    return total;
}

LossTerms total_loss(const torch::Tensor& pred, const torch::Tensor& target,
                     const WarpedHistory& history, const DetectionInputs* detection,
                     int64_t epoch, const LossConfig& config) {
    if (epoch < 0) throw ConfigError("epoch must be >= 0");
    LossTerms terms;
    auto charb = charbonnier(pred, target, config.epsilon);
    terms.charb = charb.item<double>();
    auto total = charb;
    if (config.use_wavelet) {
        auto dwt = wavelet_loss(pred, target, config);
        terms.dwt = dwt.item<double>();
        total = total + config.lambda_dwt * dwt;
    }
    if (config.use_flow) {
        terms.flow_weight = config.flow_weight(epoch);
        auto flow = flow_consistency_loss(pred, history);
        terms.flow = flow.item<double>();
        total = total + terms.flow_weight * flow;
    }
    if (config.use_detection && detection != nullptr) {
        if (detection->detector == nullptr) throw DetectorError("detection loss enabled without a detector");
        terms.det_weight = config.detection_weight(epoch);
        auto det = detection_loss(Frame(pred), detection->gt_boxes, *detection->detector);
        terms.det = det.total.item<double>();
        total = total + terms.det_weight * det.total.to(total.scalar_type());
    }
    terms.total = total;
    return terms;
}

}  // namespace rmfat
