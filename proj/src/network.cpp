#include "rmfat/network.hpp"

namespace F = torch::nn::functional;
namespace nn = torch::nn;

namespace rmfat {

void ModelConfig::validate() const {
    blocks.validate();
    if (num_encoder_blocks_per_scale < 0 || num_decoder_blocks_per_scale < 0) {
        throw ConfigError("block counts must be >= 0");
    }
    if (num_refinement_blocks < 0) throw ConfigError("num_refinement_blocks must be >= 0");
}

ModelConfig ModelConfig::reference() { return ModelConfig{}; }

RecurrentInput::RecurrentInput(Frame current, Frame previous)
    : current_(std::move(current)), previous_(std::move(previous)) {
    if (current_.height() != previous_.height() || current_.width() != previous_.width()) {
        throw ShapeError("recurrent input: current and previous frames differ in size");
    }
    check_frame(current_, "current frame");
    check_frame(previous_, "previous frame");
}

torch::Tensor RecurrentInput::packed() const {
    auto prev = previous_.pixels();
    auto cur = current_.pixels();
    if (prev.scalar_type() != cur.scalar_type()) prev = prev.to(cur.scalar_type());
    return torch::stack({prev, cur}, 1).unsqueeze(0);
}

// -- network --------------------------------------------------------------------------

RmfatNetImpl::RmfatNetImpl(const ModelConfig& config) : config_(config) {
    config_.validate();
    const auto& bc = config_.blocks;
    const int64_t c1 = bc.channels(Scale::L1), c2 = bc.channels(Scale::L2),
                  c3 = bc.channels(Scale::L3);
    const std::array<int64_t, 3> widths{c1, c2, c3};

    embed = register_module("embed", nn::Conv3d(nn::Conv3dOptions(3, c1, 3).padding(1)));
    down1 = register_module("down1", ConvDown(c1, c2));
    down2 = register_module("down2", ConvDown(c2, c3));
    up3 = register_module("up3", ConvUp(c3, c2));
    up2 = register_module("up2", ConvUp(c2, c1));
    fuse2 = register_module("fuse2", nn::Conv3d(nn::Conv3dOptions(2 * c2, c2, 1)));
    fuse1 = register_module("fuse1", nn::Conv3d(nn::Conv3dOptions(2 * c1, c1, 1)));
    for (std::size_t s = 0; s < 3; ++s) {
        const auto tag = to_string(static_cast<Scale>(s));
        nn::Sequential enc, dec;
        for (int64_t i = 0; i < config_.num_encoder_blocks_per_scale; ++i) {
            enc->push_back(TransformerBlock(widths[s], bc));
        }
        for (int64_t i = 0; i < config_.num_decoder_blocks_per_scale; ++i) {
            dec->push_back(TransformerBlock(widths[s], bc));
        }
        encoder_blocks[s] = register_module("encoder_" + tag, enc);
        decoder_blocks[s] = register_module("decoder_" + tag, dec);
        // one alignment module per scale, no sharing
        flow_warps[s] = register_module("warp_" + tag, FlowWarp(widths[s]));
    }
    nn::Sequential refine;
    for (int64_t i = 0; i < config_.num_refinement_blocks; ++i) {
        refine->push_back(TransformerBlock(c1, bc));
    }
    refinement = register_module("refinement", refine);
    head = register_module("head", nn::Conv2d(nn::Conv2dOptions(c1, 3, 3).padding(1)));
}

void RmfatNetImpl::set_warp_flags(bool decoder_warp, bool multiscale_warp) {
    config_.decoder_warp = decoder_warp;
    config_.multiscale_warp = multiscale_warp;
}

namespace {

torch::Tensor run_blocks(nn::Sequential& blocks, torch::Tensor x) {
    return blocks->is_empty() ? x : blocks->forward(x);
}

}  // namespace

std::array<torch::Tensor, 3> RmfatNetImpl::encode(const torch::Tensor& packed) {
    check_feature_volume(packed, "encode");
    if (packed.size(1) != 3) throw ShapeError("encode: expected 3 input channels");
    if (packed.size(3) % 4 != 0 || packed.size(4) % 4 != 0) {
        throw ShapeError("encode: H and W must be divisible by 4 (pad upstream)");
    }
    auto f1 = run_blocks(encoder_blocks[0], embed(packed));
    auto f2 = run_blocks(encoder_blocks[1], down1(f1));
    auto f3 = run_blocks(encoder_blocks[2], down2(f2));
    return {f1, f2, f3};
}

DecodeResult RmfatNetImpl::decode(const std::array<torch::Tensor, 3>& features) {
    DecodeResult out;
    auto x = features[2];
    for (int s = 2; s >= 0; --s) {
        const auto scale = static_cast<Scale>(s);
        if (s == 1) x = fuse2(torch::cat({up3(x), features[1]}, 1));
        if (s == 0) x = fuse1(torch::cat({up2(x), features[0]}, 1));
        if (config_.warp_enabled(scale)) {
            auto previous = x.select(2, 0);
            auto current = x.select(2, 1);
            auto aligned = flow_warps[s]->forward(current, previous);
            x = torch::stack({aligned.aligned, current}, 2);
            out.flows.emplace(scale, aligned.flow);
        }
        x = run_blocks(decoder_blocks[s], x);
    }
    out.features = x;
    return out;
}

torch::Tensor resize_flow(const torch::Tensor& flow, int64_t height, int64_t width) {
    if (flow.size(-2) == height && flow.size(-1) == width) return flow;
    const bool batched = flow.dim() == 4;
    auto f = batched ? flow : flow.unsqueeze(0);
    const double sy = static_cast<double>(height) / static_cast<double>(f.size(2));
    const double sx = static_cast<double>(width) / static_cast<double>(f.size(3));
    auto up = F::interpolate(f, F::InterpolateFuncOptions()
                                    .size(std::vector<int64_t>{height, width})
                                    .mode(torch::kBilinear)
                                    .align_corners(false));
    auto scale = torch::tensor({sx, sy}, up.options()).view({1, 2, 1, 1});
    up = up * scale;
    return batched ? up : up.squeeze(0);
}

PackedOutput RmfatNetImpl::forward(const torch::Tensor& packed, bool clamp_output) {
    check_feature_volume(packed, "restore_step");
    const int64_t b = packed.size(0), h = packed.size(3), w = packed.size(4);
    if (h < kMinFrameSide || w < kMinFrameSide) {
        throw ShapeError("restore_step: frames must be at least 8x8");
    }
    const int64_t pad_h = (4 - h % 4) % 4;
    const int64_t pad_w = (4 - w % 4) % 4;
    auto x = packed;
    if (pad_h != 0 || pad_w != 0) {
        auto flat = packed.reshape({b, 6, h, w});
        flat = F::pad(flat, F::PadFuncOptions({0, pad_w, 0, pad_h}).mode(torch::kReflect));
        x = flat.reshape({b, 3, 2, h + pad_h, w + pad_w});
    }
    auto decoded = decode(encode(x));
    auto refined = run_blocks(refinement, decoded.features);
    auto current = x.select(2, 1);
    auto restored = current + head(refined.select(2, 1));

    PackedOutput out;
    out.restored = restored.narrow(2, 0, h).narrow(3, 0, w);
    if (clamp_output) out.restored = out.restored.clamp(0.0, 1.0);
    out.flows = std::move(decoded.flows);
    if (!out.flows.empty()) {
        const auto& finest = out.flows.begin()->second;  // map is ordered L1 < L2 < L3
        out.full_flow = resize_flow(finest, h + pad_h, w + pad_w).narrow(2, 0, h).narrow(3, 0, w);
    }
    return out;
}

StepOutput RmfatNetImpl::restore_step(const RecurrentInput& input, bool inference) {
    auto packed = input.packed();
    const auto dtype = parameters().front().scalar_type();
    if (packed.scalar_type() != dtype) packed = packed.to(dtype);
    auto result = forward(packed, inference);
    StepOutput out;
    out.restored = Frame(result.restored.squeeze(0));
    for (const auto& [scale, flow] : result.flows) out.flows.emplace(scale, FlowField(flow[0], scale));
    if (result.full_flow.defined()) out.step_flow = FlowField(result.full_flow[0], Scale::L1);
    return out;
}

RmfatNet make_network(const ModelConfig& config, const InitPolicy& policy, torch::Dtype dtype) {
    RmfatNet net(config);
    initialize_parameters(*net, config.init_seed, policy);
    net->to(dtype);
    return net;
}

int64_t parameter_count(const ModelConfig& config) {
    RmfatNet net(config);
    return count_parameters(*net);
}

}  // namespace rmfat
