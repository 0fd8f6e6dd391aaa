#include "rmfat/video_core.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <regex>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace fs = std::filesystem;

namespace rmfat {

std::string to_string(Scale scale) {
    switch (scale) {
        case Scale::L1: return "L1";
        case Scale::L2: return "L2";
        case Scale::L3: return "L3";
    }
    return "?";
}

std::string to_string(SequenceRole role) {
    switch (role) {
        case SequenceRole::Degraded: return "degraded";
        case SequenceRole::Clean: return "clean";
        case SequenceRole::Restored: return "restored";
    }
    return "?";
}

Frame::Frame(torch::Tensor pixels) : pixels_(std::move(pixels)) {
    if (pixels_.dim() != 3 || pixels_.size(0) != 3) {
        throw ShapeError("Frame: expected a [3, H, W] tensor, got " +
                         std::to_string(pixels_.dim()) + " dims");
    }
    if (pixels_.size(1) < 1 || pixels_.size(2) < 1) throw ShapeError("Frame: empty raster");
}

Frame Frame::constant(int64_t height, int64_t width, double value, torch::Dtype dtype) {
    return Frame(torch::full({3, height, width}, value, torch::TensorOptions().dtype(dtype)));
}

void check_frame(const Frame& frame, const std::string& what) {
    if (!frame.defined()) throw ShapeError(what + ": undefined frame");
    if (frame.height() < kMinFrameSide || frame.width() < kMinFrameSide) {
        throw ShapeError(what + ": frame must be at least 8x8, got " +
                         std::to_string(frame.height()) + "x" + std::to_string(frame.width()));
    }
    const auto& p = frame.pixels();
    if (!torch::isfinite(p).all().item<bool>()) throw ShapeError(what + ": non-finite pixels");
    if (p.min().item<double>() < 0.0 || p.max().item<double>() > 1.0) {
        throw ShapeError(what + ": pixel values outside [0, 1]");
    }
}

void VideoSequence::validate() const {
    if (frames.empty()) throw ShapeError("sequence is empty");
    const auto h = frames.front().height();
    const auto w = frames.front().width();
    for (std::size_t i = 1; i < frames.size(); ++i) {
        if (frames[i].height() != h || frames[i].width() != w) {
            throw ShapeError("inconsistent frame dimensions at index " + std::to_string(i));
        }
    }
}

FlowField::FlowField(torch::Tensor field, Scale scale) : field_(std::move(field)), scale_(scale) {
    if (field_.dim() != 3 || field_.size(0) != 2) {
        throw ShapeError("FlowField: expected a [2, H, W] tensor");
    }
}

FlowField FlowField::zeros(int64_t height, int64_t width, Scale scale, torch::Dtype dtype) {
    return {torch::zeros({2, height, width}, torch::TensorOptions().dtype(dtype)), scale};
}

FlowField FlowField::constant(int64_t height, int64_t width, double dx, double dy, Scale scale,
                              torch::Dtype dtype) {
    auto f = torch::empty({2, height, width}, torch::TensorOptions().dtype(dtype));
    f[0].fill_(dx);
    f[1].fill_(dy);
    return {f, scale};
}

void BoundingBox::validate() const {
    if (!(x_min < x_max) || !(y_min < y_max)) {
        throw ConfigError("bounding box must satisfy x_min < x_max and y_min < y_max");
    }
    if (!(confidence >= 0.0 && confidence <= 1.0)) {
        throw ConfigError("bounding box confidence outside [0, 1]");
    }
}

BoundingBox BoundingBox::clamped(double width, double height) const {
    BoundingBox b = *this;
    b.x_min = std::clamp(b.x_min, 0.0, width);
    b.x_max = std::clamp(b.x_max, 0.0, width);
    b.y_min = std::clamp(b.y_min, 0.0, height);
    b.y_max = std::clamp(b.y_max, 0.0, height);
    return b;
}

// -- I/O ------------------------------------------------------------------------------

std::string frame_filename(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "frame_%05zu.png", index);
    return buf;
}

Frame load_frame(const fs::path& file) {
    cv::Mat bgr = cv::imread(file.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) throw IoError("unreadable image file: " + file.string());
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    auto hwc = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8).clone();
    return Frame(hwc.permute({2, 0, 1}).to(torch::kFloat32).div_(255.0).contiguous());
}

namespace {

cv::Mat to_u8_mat(const torch::Tensor& image) {
    auto t = image.detach().to(torch::kFloat64).clamp(0.0, 1.0).mul(255.0).round().to(torch::kUInt8);
    if (t.dim() == 2) {
        t = t.contiguous();
        return cv::Mat(static_cast<int>(t.size(0)), static_cast<int>(t.size(1)), CV_8UC1,
                       t.data_ptr<uint8_t>())
            .clone();
    }
    auto hwc = t.permute({1, 2, 0}).contiguous();
    cv::Mat rgb(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)), CV_8UC3,
                hwc.data_ptr<uint8_t>());
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    return bgr;
}

void ensure_directory(const fs::path& directory) {
    std::error_code ec;
    fs::create_directories(directory, ec);
    if (ec || !fs::is_directory(directory)) {
        throw IoError("cannot create directory " + directory.string() + ": " + ec.message());
    }
}

}  // namespace

void save_image(const torch::Tensor& image, const fs::path& file) {
    if (!(image.dim() == 2 || (image.dim() == 3 && image.size(0) == 3))) {
        throw ShapeError("save_image: expected [H, W] or [3, H, W]");
    }
    if (file.has_parent_path()) ensure_directory(file.parent_path());
    const cv::Mat mat = to_u8_mat(image);
    bool ok = false;
    try {
        ok = cv::imwrite(file.string(), mat);
    } catch (const cv::Exception& e) {
        throw IoError("cannot write " + file.string() + ": " + e.what());
    }
    if (!ok) throw IoError("cannot write " + file.string());
}

void save_frame(const Frame& frame, const fs::path& file) { save_image(frame.pixels(), file); }

VideoSequence load_sequence(const fs::path& directory, SequenceRole role) {
    if (!fs::is_directory(directory)) {
        throw IoError("missing sequence directory: " + directory.string());
    }
    static const std::regex pattern(R"(frame_(\d{5,})\.png)");
    std::map<std::size_t, fs::path> indexed;
    for (const auto& entry : fs::directory_iterator(directory)) {
        if (!entry.is_regular_file()) continue;
        const auto name = entry.path().filename().string();
        std::smatch m;
        if (!std::regex_match(name, m, pattern)) {
            std::clog << "[warn] ignoring non-frame file " << entry.path().string() << "\n";
            continue;
        }
        indexed.emplace(std::stoul(m[1].str()), entry.path());
    }
    if (indexed.empty()) throw IoError("no frame files in " + directory.string());
    std::size_t expected = 0;
    for (const auto& [index, path] : indexed) {
        if (index != expected) {
            throw IoError("non-contiguous frame indices in " + directory.string() +
                          ": expected " + std::to_string(expected) + ", found " +
                          std::to_string(index));
        }
        ++expected;
    }
    VideoSequence seq;
    seq.role = role;
    seq.frames.reserve(indexed.size());
    for (const auto& [index, path] : indexed) seq.frames.push_back(load_frame(path));
    seq.validate();
    return seq;
}

void save_sequence(const VideoSequence& seq, const fs::path& directory) {
    if (seq.empty()) throw ShapeError("save_sequence: sequence is empty");
    ensure_directory(directory);
    for (std::size_t i = 0; i < seq.frames.size(); ++i) {
        save_frame(seq.frames[i], directory / frame_filename(i));
    }
}

// -- flow sidecars --------------------------------------------------------------------

namespace {
constexpr char kFlowMagic[4] = {'R', 'F', 'L', 'W'};
}

void write_flow_sidecar(const FlowField& flow, const fs::path& file) {
    if (file.has_parent_path()) ensure_directory(file.parent_path());
    std::ofstream out(file, std::ios::binary);
    if (!out) throw IoError("cannot write flow sidecar " + file.string());
    const auto h = static_cast<int32_t>(flow.height());
    const auto w = static_cast<int32_t>(flow.width());
    auto data = flow.field().detach().to(torch::kFloat32).contiguous();
    out.write(kFlowMagic, 4);
    out.write(reinterpret_cast<const char*>(&h), sizeof(h));
    out.write(reinterpret_cast<const char*>(&w), sizeof(w));
    out.write(reinterpret_cast<const char*>(data.data_ptr<float>()),
              static_cast<std::streamsize>(data.numel() * sizeof(float)));
    if (!out) throw IoError("failed writing flow sidecar " + file.string());
}

FlowField read_flow_sidecar(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IoError("cannot read flow sidecar " + file.string());
    char magic[4];
    int32_t h = 0, w = 0;
    in.read(magic, 4);
    in.read(reinterpret_cast<char*>(&h), sizeof(h));
    in.read(reinterpret_cast<char*>(&w), sizeof(w));
    if (!in || std::memcmp(magic, kFlowMagic, 4) != 0 || h <= 0 || w <= 0) {
        throw IoError("malformed flow sidecar " + file.string());
    }
    auto data = torch::empty({2, h, w}, torch::kFloat32);
    in.read(reinterpret_cast<char*>(data.data_ptr<float>()),
            static_cast<std::streamsize>(data.numel() * sizeof(float)));
    if (!in) throw IoError("truncated flow sidecar " + file.string());
    return {data, Scale::L1};
}

// -- patches --------------------------------------------------------------------------

PatchPair crop_patch_pair(const VideoSequence& degraded, const VideoSequence& clean,
                          int64_t size, uint64_t rng_seed) {
    degraded.validate();
    clean.validate();
    if (degraded.size() != clean.size()) {
        throw ShapeError("crop_patch_pair: sequence length mismatch (" +
                         std::to_string(degraded.size()) + " vs " +
                         std::to_string(clean.size()) + ")");
    }
    if (degraded.height() != clean.height() || degraded.width() != clean.width()) {
        throw ShapeError("crop_patch_pair: frame dimension mismatch");
    }
    const int64_t h = degraded.height();
    const int64_t w = degraded.width();
    if (size <= 0 || size > std::min(h, w)) {
        throw ShapeError("crop_patch_pair: patch size " + std::to_string(size) +
                         " exceeds frame dims " + std::to_string(h) + "x" + std::to_string(w));
    }
    std::mt19937_64 rng(rng_seed);
    std::uniform_int_distribution<int64_t> pick_top(0, h - size);
    std::uniform_int_distribution<int64_t> pick_left(0, w - size);
    PatchPair out;
    out.top = pick_top(rng);
    out.left = pick_left(rng);
    auto crop = [&](const VideoSequence& in) {
        VideoSequence res;
        res.role = in.role;
        res.frame_rate = in.frame_rate;
        for (const auto& f : in.frames) {
            res.frames.emplace_back(f.pixels()
                                        .narrow(1, out.top, size)
                                        .narrow(2, out.left, size)
                                        .contiguous());
        }
        return res;
    };
    out.degraded = crop(degraded);
    out.clean = crop(clean);
    return out;
}

}  // namespace rmfat
