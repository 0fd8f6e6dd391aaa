#pragma once
// Training objective: Charbonnier, Haar wavelet sub-band, flow-consistency and detection
// terms, weighted with a linear ramp on the temporal and detection terms.

#include <string>
#include <vector>

#include <torch/torch.h>

#include "rmfat/detection.hpp"
#include "rmfat/recurrent_engine.hpp"

namespace rmfat {

struct LossConfig {
    double epsilon = 1e-3;
    double lambda_dwt = 0.1;
    double lambda_flow_max = 0.1;
    double lambda_det_max = 0.05;
    int64_t ramp_epochs = 50;
    std::string wavelet_family = "haar";
    int64_t wavelet_levels = 1;
    int64_t history_k = 4;
    bool use_wavelet = true;
    bool use_detection = true;
    bool use_flow = true;

    void validate() const;
    double flow_weight(int64_t epoch) const;
    double detection_weight(int64_t epoch) const;
};

/// mean(sqrt(d^2 + eps^2)) over all elements.
torch::Tensor charbonnier(const torch::Tensor& pred, const torch::Tensor& target, double epsilon);

struct HaarBands {
    torch::Tensor ll, lh, hl, hh;  ///< each [..., H/2, W/2]
};

/// One orthonormal 2x2 Haar analysis step over the last two dims.
HaarBands haar_dwt(const torch::Tensor& x);

/// All sub-bands of a multi-level decomposition: detail bands of every level followed by
/// the final approximation band (3 * levels + 1 tensors).
std::vector<torch::Tensor> wavelet_subbands(const torch::Tensor& x, int64_t levels);

/// Sum over sub-bands of charbonnier(W_i(pred), W_i(target)).
torch::Tensor wavelet_loss(const torch::Tensor& pred, const torch::Tensor& target,
                           const LossConfig& config);

/// lambda_k = 0.5^k.
double history_weight(std::size_t k);

/// sum_k 0.5^k * mean|current - warped_k|; zero for an empty history.
torch::Tensor flow_consistency_loss(const torch::Tensor& current, const WarpedHistory& history);

struct DetectionInputs {
    const Detector* detector = nullptr;
    std::vector<BoundingBox> gt_boxes;
};

struct LossTerms {
    torch::Tensor total;
    double charb = 0;
    double dwt = 0;   ///< unweighted term values; 0 when the term is disabled
    double flow = 0;
    double det = 0;
    double flow_weight = 0;
    double det_weight = 0;
};

/// L = L_charb + lambda_dwt L_dwt + lambda_flow(e) L_flow + lambda_det(e) L_det.
/// Disabled terms are skipped entirely. detection may be null (no detection this step).
LossTerms total_loss(const torch::Tensor& pred, const torch::Tensor& target,
                     const WarpedHistory& history, const DetectionInputs* detection,
                     int64_t epoch, const LossConfig& config);

}  // namespace rmfat
