#pragma once
// The two-frame recurrent restoration network: 3-scale encoder, flow-aligned decoder,
// transformer refinement and a residual output head.

#include <array>
#include <cstdint>
#include <map>
#include <optional>

#include <torch/torch.h>

#include "rmfat/model_blocks.hpp"
#include "rmfat/video_core.hpp"

namespace rmfat {

struct ModelConfig {
    BlockConfig blocks;
    int64_t num_encoder_blocks_per_scale = 3;
    int64_t num_decoder_blocks_per_scale = 3;
    int64_t num_refinement_blocks = 2;
    bool decoder_warp = true;
    bool multiscale_warp = true;
    uint64_t init_seed = 0;

    void validate() const;
    /// Reference widths and depths (about 2.7M parameters).
    static ModelConfig reference();
    bool warp_enabled(Scale s) const { return decoder_warp && (multiscale_warp || s == Scale::L3); }
};

/// X_t: previous restored frame at temporal index 0, current degraded frame at index 1.
class RecurrentInput {
public:
    RecurrentInput(Frame current, Frame previous);

    const Frame& current() const { return current_; }
    const Frame& previous() const { return previous_; }
    /// [1, 3, 2, H, W]
    torch::Tensor packed() const;

private:
    Frame current_;
    Frame previous_;
};

struct StepOutput {
    Frame restored;
    /// Per-scale flows at their own (padded) resolution; empty when decoder warping is off.
    std::map<Scale, FlowField> flows;
    /// Finest flow resampled to full frame resolution: F_{t-1 -> t}.
    std::optional<FlowField> step_flow;
};

struct PackedOutput {
    torch::Tensor restored;                   ///< [B, 3, H, W]
    std::map<Scale, torch::Tensor> flows;     ///< [B, 2, h, w] per scale
    torch::Tensor full_flow;                  ///< [B, 2, H, W] or undefined
};

struct DecodeResult {
    torch::Tensor features;  ///< [B, C1, 2, H, W]
    std::map<Scale, torch::Tensor> flows;
};

class RmfatNetImpl : public torch::nn::Module {
public:
    explicit RmfatNetImpl(const ModelConfig& config);

    const ModelConfig& config() const { return config_; }
    /// Changes ablation flags only; widths and depths are fixed at construction.
    void set_warp_flags(bool decoder_warp, bool multiscale_warp);

    /// packed: [B, 3, 2, H, W] with H, W divisible by 4.
    std::array<torch::Tensor, 3> encode(const torch::Tensor& packed);
    DecodeResult decode(const std::array<torch::Tensor, 3>& features);
    /// Pads to a multiple of 4, runs the network, adds the residual, crops back.
    /// clamp_output applies the inference-time [0, 1] clamp.
    PackedOutput forward(const torch::Tensor& packed, bool clamp_output);

    StepOutput restore_step(const RecurrentInput& input, bool inference);

    torch::nn::Conv3d embed{nullptr};
    std::array<torch::nn::Sequential, 3> encoder_blocks;
    ConvDown down1{nullptr}, down2{nullptr};
    std::array<FlowWarp, 3> flow_warps{FlowWarp{nullptr}, FlowWarp{nullptr}, FlowWarp{nullptr}};
    std::array<torch::nn::Sequential, 3> decoder_blocks;
    ConvUp up3{nullptr}, up2{nullptr};
    torch::nn::Conv3d fuse2{nullptr}, fuse1{nullptr};
    torch::nn::Sequential refinement{nullptr};
    torch::nn::Conv2d head{nullptr};

private:
    ModelConfig config_;
};
TORCH_MODULE(RmfatNet);

/// Builds and initializes a network (float32 unless dtype says otherwise).
RmfatNet make_network(const ModelConfig& config, const InitPolicy& policy = {},
                      torch::Dtype dtype = torch::kFloat32);

int64_t parameter_count(const ModelConfig& config);

/// Resamples a flow to a new resolution, scaling displacements by the size ratio.
torch::Tensor resize_flow(const torch::Tensor& flow, int64_t height, int64_t width);

}  // namespace rmfat
