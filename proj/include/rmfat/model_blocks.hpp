#pragma once
// Neural building blocks over 5-D feature volumes [B, C, T=2, H, W].

#include <array>
#include <cstdint>
#include <string>
#include <utility>

#include <torch/torch.h>

#include "rmfat/video_core.hpp"

namespace rmfat {

struct BlockConfig {
    std::array<int64_t, 3> channels_per_scale{32, 64, 128};
    int64_t attention_heads = 4;
    double ffn_expansion = 2.66;
    double norm_epsilon = 1e-5;

    int64_t channels(Scale s) const { return channels_per_scale[static_cast<std::size_t>(s)]; }
    void validate() const;
};

/// Throws unless x is a finite-shaped [B, C, 2, H, W] volume.
void check_feature_volume(const torch::Tensor& x, const char* what);

/// Channel-wise normalization at every (t, h, w) location, then per-channel affine.
class LayerNorm3dImpl : public torch::nn::Module {
public:
    LayerNorm3dImpl(int64_t channels, double epsilon);
    torch::Tensor forward(const torch::Tensor& x);

    torch::Tensor weight, bias;

private:
    double epsilon_;
};
TORCH_MODULE(LayerNorm3d);

/// Channel-transposed multi-head attention. Queries, keys and values are pointwise
/// projections; each head attends over its C/heads channel descriptors using the
/// flattened 2*H*W token axis, so the attention matrix is heads x d x d.
class AttentionCTSFImpl : public torch::nn::Module {
public:
    AttentionCTSFImpl(int64_t channels, int64_t heads);

    torch::Tensor forward(const torch::Tensor& x);
    /// Softmax attention weights, [B, heads, C/heads, C/heads].
    torch::Tensor attention_map(const torch::Tensor& x);

    int64_t heads() const { return heads_; }

    torch::nn::Conv3d qkv{nullptr};
    torch::nn::Conv3d proj_out{nullptr};
    torch::Tensor temperature;

private:
    std::pair<torch::Tensor, torch::Tensor> attend(const torch::Tensor& x);

    int64_t channels_;
    int64_t heads_;
};
TORCH_MODULE(AttentionCTSF);

/// Gated feed-forward: pointwise expansion, depthwise 3x3x3 conv, GELU gate, projection.
class FeedForwardImpl : public torch::nn::Module {
public:
    FeedForwardImpl(int64_t channels, double expansion);
    torch::Tensor forward(const torch::Tensor& x);

    torch::nn::Conv3d project_in{nullptr};
    torch::nn::Conv3d depthwise{nullptr};
    torch::nn::Conv3d project_out{nullptr};
};
TORCH_MODULE(FeedForward);

/// Pre-norm residual block: y = x + attn(ln(x)); out = y + ffn(ln(y)).
class TransformerBlockImpl : public torch::nn::Module {
public:
    TransformerBlockImpl(int64_t channels, const BlockConfig& cfg);
    torch::Tensor forward(const torch::Tensor& x);

    LayerNorm3d norm1{nullptr};
    AttentionCTSF attention{nullptr};
    LayerNorm3d norm2{nullptr};
    FeedForward ffn{nullptr};
};
TORCH_MODULE(TransformerBlock);

/// 3x3x3 convolution, spatial stride 2, temporal extent preserved.
class ConvDownImpl : public torch::nn::Module {
public:
    ConvDownImpl(int64_t in_channels, int64_t out_channels);
    torch::Tensor forward(const torch::Tensor& x);

    torch::nn::Conv3d conv{nullptr};
};
TORCH_MODULE(ConvDown);

/// Transposed convolution doubling H and W; temporal extent preserved.
class ConvUpImpl : public torch::nn::Module {
public:
    ConvUpImpl(int64_t in_channels, int64_t out_channels);
    torch::Tensor forward(const torch::Tensor& x);

    torch::nn::ConvTranspose3d conv{nullptr};
};
TORCH_MODULE(ConvUp);

struct AlignedFeatures {
    torch::Tensor aligned;  ///< [B, C, H, W], f_src resampled onto f_ref's geometry
    torch::Tensor flow;     ///< [B, 2, H, W], pixels at this scale
};

/// Predicts a displacement field from concat(f_ref, f_src) and warps f_src by it.
class FlowWarpImpl : public torch::nn::Module {
public:
    explicit FlowWarpImpl(int64_t channels);
    AlignedFeatures forward(const torch::Tensor& f_ref, const torch::Tensor& f_src);
    torch::Tensor predict_flow(const torch::Tensor& f_ref, const torch::Tensor& f_src);

    torch::nn::Conv2d conv1{nullptr};
    torch::nn::Conv2d conv2{nullptr};
    torch::nn::Conv2d flow_head{nullptr};
};
TORCH_MODULE(FlowWarp);

// -- initialization ------------------------------------------------------------------

struct InitPolicy {
    bool zero_flow_heads = true;
    bool zero_residual_projections = true;
    bool zero_output_head = true;
    /// Small random values instead of zeros everywhere (biases and zero-init tensors
    /// included). Used by gradient checks, which need generic, kink-free operating points.
    bool randomize_all = false;
};

/// Deterministic initialization. Each parameter draws from its own generator seeded by
/// (seed, parameter name), so values do not depend on construction order.
void initialize_parameters(torch::nn::Module& module, uint64_t seed,
                           const InitPolicy& policy = {});

int64_t count_parameters(const torch::nn::Module& module);

}  // namespace rmfat
