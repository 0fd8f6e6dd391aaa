#pragma once
// Detector interface, a deterministic luminance-blob stub, and the detection-guided loss
// (IoU regression on matched boxes plus objectness cross-entropy).

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "rmfat/video_core.hpp"

namespace rmfat {

struct DetectionResult {
    std::vector<BoundingBox> boxes;
    /// [N] confidences aligned with boxes. May carry autograd history back to the frame.
    torch::Tensor confidences;
    std::string source;

    void validate() const;
};

class Detector {
public:
    virtual ~Detector() = default;
    virtual DetectionResult detect(const Frame& frame) const = 0;
    virtual std::string name() const = 0;
};

/// Connected regions (4-neighbourhood) of luminance above a threshold become "person"
/// boxes. Confidence = clamp(2 * (mean region luminance - mean background luminance), 0, 1),
/// differentiable in the pixels wherever it does not saturate.
class LuminanceBlobDetector : public Detector {
public:
    explicit LuminanceBlobDetector(double threshold = 0.5, int64_t min_area = 4,
                                   std::size_t max_boxes = 32);
    DetectionResult detect(const Frame& frame) const override;
    std::string name() const override { return "luminance_blob"; }

private:
    double threshold_;
    int64_t min_area_;
    std::size_t max_boxes_;
};

using DetectorFactory = std::function<std::unique_ptr<Detector>()>;

/// Registry keyed by the name used in config files. "luminance_blob" is built in;
/// adapters for external detectors register themselves here.
void register_detector(const std::string& name, DetectorFactory factory);
std::unique_ptr<Detector> make_detector(const std::string& name);
std::vector<std::string> registered_detectors();

double iou(const BoundingBox& a, const BoundingBox& b);

/// Greedy matching in descending IoU order; each box used at most once, IoU > 0 only.
/// Returns (prediction index, ground-truth index) pairs.
std::vector<std::pair<std::size_t, std::size_t>> match_boxes(
    const std::vector<BoundingBox>& predictions, const std::vector<BoundingBox>& ground_truth);

struct DetectionLoss {
    torch::Tensor total;  ///< iou_term + conf_term, differentiable through confidences
    double iou_term = 0;
    double conf_term = 0;
};

/// Ground truth is filtered to class "person". IoU term: mean over ground-truth boxes of
/// (1 - IoU of its match), unmatched boxes contribute 1. Confidence term: mean BCE over
/// predictions with target 1 iff a person is present.
DetectionLoss detection_loss(const DetectionResult& predictions,
                             const std::vector<BoundingBox>& gt_boxes);

DetectionLoss detection_loss(const Frame& restored_last, const std::vector<BoundingBox>& gt_boxes,
                             const Detector& detector);

}  // namespace rmfat
