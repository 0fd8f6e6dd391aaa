#include "rmfat/model_blocks.hpp"

#include <cmath>
#include <functional>

namespace F = torch::nn::functional;
namespace nn = torch::nn;

namespace rmfat {

void BlockConfig::validate() const {
    for (std::size_t i = 0; i < 3; ++i) {
        if (channels_per_scale[i] < 1) throw ConfigError("channel counts must be positive");
        if (i > 0 && channels_per_scale[i - 1] > channels_per_scale[i]) {
            throw ConfigError("channels_per_scale must be non-decreasing");
        }
        if (attention_heads < 1 || channels_per_scale[i] % attention_heads != 0) {
            throw ConfigError("attention_heads (" + std::to_string(attention_heads) +
                              ") must divide every channel count");
        }
    }
    if (!(ffn_expansion >= 1.0)) throw ConfigError("ffn_expansion must be >= 1");
    if (!(norm_epsilon > 0.0)) throw ConfigError("norm_epsilon must be > 0");
}

void check_feature_volume(const torch::Tensor& x, const char* what) {
    if (x.dim() != 5 || x.size(2) != 2) {
        throw ShapeError(std::string(what) + ": expected a [B, C, 2, H, W] feature volume");
    }
}

// -- LayerNorm3d ----------------------------------------------------------------------

LayerNorm3dImpl::LayerNorm3dImpl(int64_t channels, double epsilon) : epsilon_(epsilon) {
    weight = register_parameter("weight", torch::ones({channels}));
    bias = register_parameter("bias", torch::zeros({channels}));
}

torch::Tensor LayerNorm3dImpl::forward(const torch::Tensor& x) {
    check_feature_volume(x, "layer_norm_3d");
    auto mean = x.mean(1, true);
    auto centered = x - mean;
    auto var = (centered * centered).mean(1, true);
    auto normed = centered * torch::rsqrt(var + epsilon_);
    return normed * weight.view({1, -1, 1, 1, 1}) + bias.view({1, -1, 1, 1, 1});
}

// -- AttentionCTSF --------------------------------------------------------------------

AttentionCTSFImpl::AttentionCTSFImpl(int64_t channels, int64_t heads)
    : channels_(channels), heads_(heads) {
    if (heads < 1 || channels % heads != 0) {
        throw ConfigError("attention: " + std::to_string(channels) +
                          " channels are not divisible by " + std::to_string(heads) + " heads");
    }
    qkv = register_module("qkv", nn::Conv3d(nn::Conv3dOptions(channels, 3 * channels, 1)));
    proj_out = register_module("proj_out", nn::Conv3d(nn::Conv3dOptions(channels, channels, 1)));
    temperature = register_parameter("temperature", torch::ones({heads}));
}

std::pair<torch::Tensor, torch::Tensor> AttentionCTSFImpl::attend(const torch::Tensor& x) {
    check_feature_volume(x, "attention_ctsf");
    if (x.size(1) != channels_) throw ShapeError("attention_ctsf: channel count mismatch");
    const int64_t b = x.size(0);
    const int64_t d = channels_ / heads_;
    auto chunks = qkv(x).reshape({b, 3, heads_, d, -1}).unbind(1);
    auto q = F::normalize(chunks[0], F::NormalizeFuncOptions().dim(-1));
    auto k = F::normalize(chunks[1], F::NormalizeFuncOptions().dim(-1));
    auto logits = torch::matmul(q, k.transpose(-2, -1)) * temperature.view({1, -1, 1, 1});
    auto attn = torch::softmax(logits, -1);
    return {attn, chunks[2]};
}

torch::Tensor AttentionCTSFImpl::attention_map(const torch::Tensor& x) { return attend(x).first; }

torch::Tensor AttentionCTSFImpl::forward(const torch::Tensor& x) {
    auto [attn, v] = attend(x);
    auto out = torch::matmul(attn, v).reshape(x.sizes());
    return proj_out(out);
}

// -- FeedForward ----------------------------------------------------------------------

FeedForwardImpl::FeedForwardImpl(int64_t channels, double expansion) {
    const auto hidden = static_cast<int64_t>(std::llround(channels * expansion));
    project_in = register_module(
        "project_in", nn::Conv3d(nn::Conv3dOptions(channels, 2 * hidden, 1)));
    depthwise = register_module(
        "depthwise",
        nn::Conv3d(nn::Conv3dOptions(2 * hidden, 2 * hidden, 3).padding(1).groups(2 * hidden)));
    project_out = register_module("project_out",
                                  nn::Conv3d(nn::Conv3dOptions(hidden, channels, 1)));
}

torch::Tensor FeedForwardImpl::forward(const torch::Tensor& x) {
    auto halves = depthwise(project_in(x)).chunk(2, 1);
    return project_out(F::gelu(halves[0]) * halves[1]);
}

// -- TransformerBlock -----------------------------------------------------------------

TransformerBlockImpl::TransformerBlockImpl(int64_t channels, const BlockConfig& cfg) {
    norm1 = register_module("norm1", LayerNorm3d(channels, cfg.norm_epsilon));
    attention = register_module("attention", AttentionCTSF(channels, cfg.attention_heads));
    norm2 = register_module("norm2", LayerNorm3d(channels, cfg.norm_epsilon));
    ffn = register_module("ffn", FeedForward(channels, cfg.ffn_expansion));
}

torch::Tensor TransformerBlockImpl::forward(const torch::Tensor& x) {
    auto y = x + attention(norm1(x));
    return y + ffn(norm2(y));
}

// -- ConvDown / ConvUp ----------------------------------------------------------------

ConvDownImpl::ConvDownImpl(int64_t in_channels, int64_t out_channels) {
    conv = register_module(
        "conv", nn::Conv3d(nn::Conv3dOptions(in_channels, out_channels, 3)
                               .stride({1, 2, 2})
                               .padding(1)));
}

torch::Tensor ConvDownImpl::forward(const torch::Tensor& x) {
    check_feature_volume(x, "conv3d_down");
    if (x.size(3) % 2 != 0 || x.size(4) % 2 != 0) {
        throw ShapeError("conv3d_down: spatial dims must be even, got " +
                         std::to_string(x.size(3)) + "x" + std::to_string(x.size(4)));
    }
    return conv(x);
}

ConvUpImpl::ConvUpImpl(int64_t in_channels, int64_t out_channels) {
    conv = register_module(
        "conv", nn::ConvTranspose3d(nn::ConvTranspose3dOptions(in_channels, out_channels,
                                                               {1, 2, 2})
                                        .stride({1, 2, 2})));
}

torch::Tensor ConvUpImpl::forward(const torch::Tensor& x) {
    check_feature_volume(x, "conv3d_up");
    return conv(x);
}

// -- FlowWarp -------------------------------------------------------------------------

FlowWarpImpl::FlowWarpImpl(int64_t channels) {
    conv1 = register_module(
        "conv1", nn::Conv2d(nn::Conv2dOptions(2 * channels, channels, 3).padding(1)));
    conv2 = register_module("conv2",
                            nn::Conv2d(nn::Conv2dOptions(channels, channels, 3).padding(1)));
    flow_head = register_module("flow_head",
                                nn::Conv2d(nn::Conv2dOptions(channels, 2, 3).padding(1)));
}

torch::Tensor FlowWarpImpl::predict_flow(const torch::Tensor& f_ref, const torch::Tensor& f_src) {
    if (f_ref.dim() != 4 || !f_ref.sizes().equals(f_src.sizes())) {
        throw ShapeError("flow_warp: reference and source slices must share a [B, C, H, W] shape");
    }
    auto h = F::gelu(conv1(torch::cat({f_ref, f_src}, 1)));
    h = F::gelu(conv2(h));
    return flow_head(h);
}

AlignedFeatures FlowWarpImpl::forward(const torch::Tensor& f_ref, const torch::Tensor& f_src) {
    auto flow = predict_flow(f_ref, f_src);
    return {warp(f_src, flow), flow};
}

// -- init -----------------------------------------------------------------------------

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool contains(const std::string& s, const std::string& part) { return s.find(part) != std::string::npos; }

enum class InitKind { Zero, One, FanIn };

InitKind default_kind(const std::string& name, const InitPolicy& policy) {
    if (ends_with(name, "temperature")) return InitKind::One;
    if (contains(name, "norm") && ends_with(name, "weight")) return InitKind::One;
    if (ends_with(name, "bias")) return InitKind::Zero;
    if (policy.zero_flow_heads && contains(name, "flow_head")) return InitKind::Zero;
    if (policy.zero_residual_projections &&
        (contains(name, "proj_out") || contains(name, "project_out"))) {
        return InitKind::Zero;
    }
    if (policy.zero_output_head && name.rfind("head.", 0) == 0) return InitKind::Zero;
    return InitKind::FanIn;
}

}  // namespace

void initialize_parameters(torch::nn::Module& module, uint64_t seed, const InitPolicy& policy) {
    torch::NoGradGuard no_grad;
    for (auto& item : module.named_parameters(true)) {
        const std::string& name = item.key();
        auto& p = item.value();
        const uint64_t name_hash = std::hash<std::string>{}(name);
        auto gen = at::make_generator<at::CPUGeneratorImpl>(seed * 0x9e3779b97f4a7c15ULL ^ name_hash);
        const int64_t fan_in = p.dim() > 1 ? p.numel() / p.size(0) : 1;
        const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<int64_t>(fan_in, 1)));
        auto uniform = [&](double lo, double hi) {
            auto u = torch::rand(p.sizes(), gen, torch::TensorOptions().dtype(torch::kFloat64));
            p.copy_(u * (hi - lo) + lo);
        };
        const InitKind kind = default_kind(name, policy);
        if (policy.randomize_all) {
            switch (kind) {
                case InitKind::One: uniform(0.8, 1.2); break;
                case InitKind::Zero: uniform(-0.5 * bound, 0.5 * bound); break;
                case InitKind::FanIn: uniform(-bound, bound); break;
            }
            continue;
        }
        switch (kind) {
            case InitKind::One: p.fill_(1.0); break;
            case InitKind::Zero: p.zero_(); break;
            case InitKind::FanIn: uniform(-bound, bound); break;
        }
    }
}

int64_t count_parameters(const torch::nn::Module& module) {
    int64_t n = 0;
    for (const auto& p : module.parameters(true)) n += p.numel();
    return n;
}

}  // namespace rmfat
