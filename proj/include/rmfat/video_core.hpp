#pragma once
// Frames, sequences, flow fields and the bilinear warp shared by the whole pipeline.
//
// Pixel tensors are channel-first [3, H, W] with values in [0, 1]. Flow fields are
// [2, H, W] tensors holding absolute pixel displacements: plane 0 is dx (columns),
// plane 1 is dy (rows). Warping samples src at p + flow(p).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "rmfat/error.hpp"

namespace rmfat {

enum class Scale { L1 = 0, L2 = 1, L3 = 2 };

std::string to_string(Scale scale);

/// Spatial downsampling factor of a scale relative to full resolution.
constexpr int scale_factor(Scale scale) { return 1 << static_cast<int>(scale); }

inline constexpr int64_t kMinFrameSide = 8;

/// One RGB raster, [3, H, W]. Range is not enforced here because restored frames
/// are unclamped during training; see check_frame().
class Frame {
public:
    Frame() = default;
    explicit Frame(torch::Tensor pixels);

    static Frame constant(int64_t height, int64_t width, double value,
                          torch::Dtype dtype = torch::kFloat32);

    const torch::Tensor& pixels() const { return pixels_; }
    int64_t height() const { return pixels_.size(1); }
    int64_t width() const { return pixels_.size(2); }
    bool defined() const { return pixels_.defined(); }

private:
    torch::Tensor pixels_;
};

/// Throws unless the frame is at least 8x8, finite, and within [0, 1].
void check_frame(const Frame& frame, const std::string& what = "frame");

enum class SequenceRole { Degraded, Clean, Restored };

std::string to_string(SequenceRole role);

struct VideoSequence {
    std::vector<Frame> frames;
    SequenceRole role = SequenceRole::Degraded;
    std::optional<double> frame_rate;

    std::size_t size() const { return frames.size(); }
    bool empty() const { return frames.empty(); }
    int64_t height() const { return frames.front().height(); }
    int64_t width() const { return frames.front().width(); }

    /// Nonempty and every frame has identical dims.
    void validate() const;
};

class FlowField {
public:
    FlowField() = default;
    FlowField(torch::Tensor field, Scale scale);

    static FlowField zeros(int64_t height, int64_t width, Scale scale = Scale::L1,
                           torch::Dtype dtype = torch::kFloat64);
    static FlowField constant(int64_t height, int64_t width, double dx, double dy,
                              Scale scale = Scale::L1, torch::Dtype dtype = torch::kFloat64);

    const torch::Tensor& field() const { return field_; }
    torch::Tensor dx() const { return field_[0]; }
    torch::Tensor dy() const { return field_[1]; }
    Scale scale() const { return scale_; }
    int64_t height() const { return field_.size(1); }
    int64_t width() const { return field_.size(2); }
    bool defined() const { return field_.defined(); }

    FlowField detached() const { return {field_.detach(), scale_}; }

private:
    torch::Tensor field_;
    Scale scale_ = Scale::L1;
};

struct BoundingBox {
    double x_min = 0;
    double y_min = 0;
    double x_max = 0;
    double y_max = 0;
    std::string class_label = "person";
    double confidence = 1.0;

    double area() const { return (x_max - x_min) * (y_max - y_min); }
    /// Throws when x_min >= x_max or y_min >= y_max.
    void validate() const;
    BoundingBox clamped(double width, double height) const;
};

// -- warping ----------------------------------------------------------------------

/// Differentiable bilinear warp with border replication.
///
/// src is [C, H, W] or [N, C, H, W]; flow is [2, H, W] or [N, 2, H, W] with matching
/// batch and spatial dims. output(p) = bilinear(src, clamp(p + flow(p))). Gradients
/// flow to both src and flow. A zero flow reproduces src bit-exactly.
torch::Tensor warp(const torch::Tensor& src, const torch::Tensor& flow);

Frame warp_frame(const Frame& src, const FlowField& flow);

/// result(p) = f_bc(p) + bilinear(f_ab, p + f_bc(p)); warping by the result equals
/// warping by f_ab then by f_bc.
FlowField compose_flows(const FlowField& f_ab, const FlowField& f_bc);

// -- sequence I/O -------------------------------------------------------------------

std::string frame_filename(std::size_t index);

VideoSequence load_sequence(const std::filesystem::path& directory, SequenceRole role);

/// Writes frame_%05d.png files (8-bit RGB). Values are clamped to [0, 1] and rounded.
void save_sequence(const VideoSequence& seq, const std::filesystem::path& directory);

Frame load_frame(const std::filesystem::path& file);
void save_frame(const Frame& frame, const std::filesystem::path& file);

/// Writes a single-channel or RGB tensor image ([H, W] or [3, H, W], values in [0, 1]).
void save_image(const torch::Tensor& image, const std::filesystem::path& file);

/// Raw flow sidecar: 4-byte magic "RFLW", int32 H, int32 W (little-endian), then H*W
/// float32 dx values row-major, then H*W float32 dy values.
void write_flow_sidecar(const FlowField& flow, const std::filesystem::path& file);
FlowField read_flow_sidecar(const std::filesystem::path& file);

// -- patches ------------------------------------------------------------------------

struct PatchPair {
    VideoSequence degraded;
    VideoSequence clean;
    int64_t top = 0;
    int64_t left = 0;
};

/// Crops one shared size x size window, drawn uniformly from the valid offsets with a
/// seeded generator, from every frame of both sequences.
PatchPair crop_patch_pair(const VideoSequence& degraded, const VideoSequence& clean,
                          int64_t size, uint64_t rng_seed);

}  // namespace rmfat
