#include "rmfat/detection.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>

namespace rmfat {

void DetectionResult::validate() const {
    for (const auto& b : boxes) b.validate();
    if (confidences.defined() && confidences.numel() != static_cast<int64_t>(boxes.size())) {
        throw DetectorError("detector '" + source + "' returned mismatched confidence count");
    }
}

// -- stub detector --------------------------------------------------------------------

LuminanceBlobDetector::LuminanceBlobDetector(double threshold, int64_t min_area,
                                             std::size_t max_boxes)
    : threshold_(threshold), min_area_(min_area), max_boxes_(max_boxes) {}

DetectionResult LuminanceBlobDetector::detect(const Frame& frame) const {
    if (!frame.defined()) throw DetectorError("luminance_blob: undefined frame");
    const auto luma = frame.pixels().mean(0);  // [H, W], keeps autograd history
    const auto mask_t = (luma.detach() > threshold_).to(torch::kUInt8).contiguous();
    const int64_t h = luma.size(0), w = luma.size(1);
    const uint8_t* mask = mask_t.data_ptr<uint8_t>();

    struct Region {
        int64_t x_min, y_min, x_max, y_max, area;
        std::vector<int64_t> pixels;
    };
    std::vector<int32_t> label(static_cast<std::size_t>(h * w), -1);
    std::vector<Region> regions;
    std::vector<int64_t> stack;
    for (int64_t start = 0; start < h * w; ++start) {
        if (!mask[start] || label[start] >= 0) continue;
        Region r{w, h, -1, -1, 0, {}};
        const auto id = static_cast<int32_t>(regions.size());
        stack.assign(1, start);
        label[start] = id;
        while (!stack.empty()) {
            const int64_t p = stack.back();
            stack.pop_back();
            const int64_t y = p / w, x = p % w;
            r.x_min = std::min(r.x_min, x);
            r.x_max = std::max(r.x_max, x);
            r.y_min = std::min(r.y_min, y);
            r.y_max = std::max(r.y_max, y);
            r.pixels.push_back(p);
            const int64_t nbrs[4] = {x > 0 ? p - 1 : -1, x + 1 < w ? p + 1 : -1,
                                     y > 0 ? p - w : -1, y + 1 < h ? p + w : -1};
            for (const int64_t q : nbrs) {
                if (q >= 0 && mask[q] && label[q] < 0) {
                    label[q] = id;
                    stack.push_back(q);
                }
            }
        }
        r.area = static_cast<int64_t>(r.pixels.size());
        regions.push_back(std::move(r));
    }

    std::vector<const Region*> kept;
    for (const auto& r : regions) {
        if (r.area >= min_area_) kept.push_back(&r);
    }
    std::stable_sort(kept.begin(), kept.end(),
                     [](const Region* a, const Region* b) { return a->area > b->area; });
    if (kept.size() > max_boxes_) kept.resize(max_boxes_);

    DetectionResult result;
    result.source = name();
    const auto flat = luma.reshape({-1});
    const auto background = (1 - mask_t.reshape({-1})).to(luma.scalar_type());
    const auto bg_count = background.sum();
    const auto bg_mean = bg_count.item<double>() > 0 ? (flat * background).sum() / bg_count
                                                     : torch::zeros({}, luma.options());
    std::vector<torch::Tensor> confs;
    for (const Region* r : kept) {
        BoundingBox b;
        b.x_min = static_cast<double>(r->x_min);
        b.y_min = static_cast<double>(r->y_min);
        b.x_max = static_cast<double>(r->x_max + 1);
        b.y_max = static_cast<double>(r->y_max + 1);
        b.class_label = "person";
        auto idx = torch::tensor(r->pixels, torch::kLong);
        auto conf = (2.0 * (flat.index_select(0, idx).mean() - bg_mean)).clamp(0.0, 1.0);
        b.confidence = conf.item<double>();
        confs.push_back(conf);
        result.boxes.push_back(b);
    }
    result.confidences =
        confs.empty() ? torch::zeros({0}, luma.options()) : torch::stack(confs);
    return result;
}

// -- registry -------------------------------------------------------------------------

namespace {

std::mutex& registry_mutex() {
    static std::mutex m;
    return m;
}

std::map<std::string, DetectorFactory>& registry() {
    static std::map<std::string, DetectorFactory> r{
        {"luminance_blob", [] { return std::make_unique<LuminanceBlobDetector>(); }}};
    return r;
}

}  // namespace

void register_detector(const std::string& name, DetectorFactory factory) {
    std::lock_guard lock(registry_mutex());
    registry()[name] = std::move(factory);
}

std::unique_ptr<Detector> make_detector(const std::string& name) {
    std::lock_guard lock(registry_mutex());
    auto it = registry().find(name);
    if (it == registry().end()) throw ConfigError("unknown detector '" + name + "'");
    return it->second();
}

std::vector<std::string> registered_detectors() {
    std::lock_guard lock(registry_mutex());
    std::vector<std::string> names;
    for (const auto& [name, f] : registry()) names.push_back(name);
    return names;
}

// -- loss -----------------------------------------------------------------------------

double iou(const BoundingBox& a, const BoundingBox& b) {
    const double ix = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
    const double iy = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
    const double inter = ix * iy;
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

std::vector<std::pair<std::size_t, std::size_t>> match_boxes(
    const std::vector<BoundingBox>& predictions, const std::vector<BoundingBox>& ground_truth) {
    struct Candidate {
        double iou;
        std::size_t pred, gt;
    };
    std::vector<Candidate> candidates;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        for (std::size_t j = 0; j < ground_truth.size(); ++j) {
            const double v = iou(predictions[i], ground_truth[j]);
            if (v > 0.0) candidates.push_back({v, i, j});
        }
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Candidate& a, const Candidate& b) { return a.iou > b.iou; });
    std::vector<bool> pred_used(predictions.size(), false), gt_used(ground_truth.size(), false);
    std::vector<std::pair<std::size_t, std::size_t>> matches;
    for (const auto& c : candidates) {
        if (pred_used[c.pred] || gt_used[c.gt]) continue;
        pred_used[c.pred] = gt_used[c.gt] = true;
        matches.emplace_back(c.pred, c.gt);
    }
    return matches;
}

DetectionLoss detection_loss(const DetectionResult& predictions,
                             const std::vector<BoundingBox>& gt_boxes) {
    predictions.validate();
    std::vector<BoundingBox> persons;
    for (const auto& g : gt_boxes) {
        if (g.class_label == "person") persons.push_back(g);
    }
    std::vector<BoundingBox> pred_persons;
    std::vector<int64_t> pred_index;
    for (std::size_t i = 0; i < predictions.boxes.size(); ++i) {
        if (predictions.boxes[i].class_label == "person") {
            pred_persons.push_back(predictions.boxes[i]);
            pred_index.push_back(static_cast<int64_t>(i));
        }
    }

    DetectionLoss out;
    if (!persons.empty()) {
        std::vector<double> per_gt(persons.size(), 1.0);
        for (const auto& [p, g] : match_boxes(pred_persons, persons)) {
            per_gt[g] = 1.0 - iou(pred_persons[p], persons[g]);
        }
        double sum = 0.0;
        for (double v : per_gt) sum += v;
        out.iou_term = sum / static_cast<double>(per_gt.size());
    }

    torch::Tensor conf_term = torch::zeros({}, torch::kFloat64);
    if (!pred_index.empty()) {
        torch::Tensor c = predictions.confidences.defined()
                              ? predictions.confidences.index_select(
                                    0, torch::tensor(pred_index, torch::kLong))
                              : torch::tensor([&] {
                                    std::vector<double> v;
                                    for (const auto& b : pred_persons) v.push_back(b.confidence);
                                    return v;
                                }());
        // clamp only the argument that enters the log, so exact 0/1 confidences on the
        // correct side give an exact zero loss
        const double kMin = 1e-7;
        conf_term = persons.empty() ? -torch::log((1.0 - c).clamp_min(kMin)).mean()
                                    : -torch::log(c.clamp_min(kMin)).mean();
    }
    out.conf_term = conf_term.item<double>();
    out.total = conf_term + out.iou_term;
    return out;
}

DetectionLoss detection_loss(const Frame& restored_last, const std::vector<BoundingBox>& gt_boxes,
                             const Detector& detector) {
    DetectionResult result;
    try {
        result = detector.detect(restored_last);
    } catch (const DetectorError&) {
        throw;
    } catch (const std::exception& e) {
        throw DetectorError("detector '" + detector.name() + "' failed: " + e.what());
    }
    return detection_loss(result, gt_boxes);
}

}  // namespace rmfat
