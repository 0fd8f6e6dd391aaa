#include <algorithm>
#include <cmath>

#include "rmfat/video_core.hpp"

namespace rmfat {
namespace {

struct Sample {
    int64_t x0, x1, y0, y1;
    double fx, fy;
    bool inside_x, inside_y;
};

inline Sample locate(double sx, double sy, int64_t h, int64_t w) {
    Sample s{};
    const double max_x = static_cast<double>(w - 1);
    const double max_y = static_cast<double>(h - 1);
    s.inside_x = sx >= 0.0 && sx <= max_x;
    s.inside_y = sy >= 0.0 && sy <= max_y;
    sx = std::clamp(sx, 0.0, max_x);
    sy = std::clamp(sy, 0.0, max_y);
    const double flx = std::floor(sx);
    const double fly = std::floor(sy);
    s.x0 = static_cast<int64_t>(flx);
    s.y0 = static_cast<int64_t>(fly);
    s.x1 = std::min(s.x0 + 1, w - 1);
    s.y1 = std::min(s.y0 + 1, h - 1);
    s.fx = sx - flx;
    s.fy = sy - fly;
    return s;
}

template <typename T>
void warp_forward_kernel(const T* src, const T* flow, T* out, int64_t n, int64_t c, int64_t h,
                         int64_t w) {
    const int64_t plane = h * w;
    for (int64_t b = 0; b < n; ++b) {
        const T* fdx = flow + b * 2 * plane;
        const T* fdy = fdx + plane;
        const T* sb = src + b * c * plane;
        T* ob = out + b * c * plane;
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) {
                const int64_t p = y * w + x;
                const Sample s = locate(x + static_cast<double>(fdx[p]),
                                        y + static_cast<double>(fdy[p]), h, w);
                const T fx = static_cast<T>(s.fx);
                const T fy = static_cast<T>(s.fy);
                for (int64_t ch = 0; ch < c; ++ch) {
                    const T* sc = sb + ch * plane;
                    // lerp form: exact when fx == fy == 0 or when the neighbours agree
                    const T v00 = sc[s.y0 * w + s.x0];
                    const T v01 = sc[s.y0 * w + s.x1];
                    const T v10 = sc[s.y1 * w + s.x0];
                    const T v11 = sc[s.y1 * w + s.x1];
                    const T top = v00 + fx * (v01 - v00);
                    const T bottom = v10 + fx * (v11 - v10);
                    ob[ch * plane + p] = top + fy * (bottom - top);
                }
            }
        }
    }
}

template <typename T>
void warp_backward_kernel(const T* src, const T* flow, const T* grad_out, T* grad_src,
                          T* grad_flow, int64_t n, int64_t c, int64_t h, int64_t w) {
    const int64_t plane = h * w;
    for (int64_t b = 0; b < n; ++b) {
        const T* fdx = flow + b * 2 * plane;
        const T* fdy = fdx + plane;
        const T* sb = src + b * c * plane;
        const T* gb = grad_out + b * c * plane;
        T* gsb = grad_src + b * c * plane;
        T* gdx = grad_flow + b * 2 * plane;
        T* gdy = gdx + plane;
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) {
                const int64_t p = y * w + x;
                const Sample s = locate(x + static_cast<double>(fdx[p]),
                                        y + static_cast<double>(fdy[p]), h, w);
                const T fx = static_cast<T>(s.fx);
                const T fy = static_cast<T>(s.fy);
                T acc_dx = 0;
                T acc_dy = 0;
                for (int64_t ch = 0; ch < c; ++ch) {
                    const T g = gb[ch * plane + p];
                    const T* sc = sb + ch * plane;
                    T* gsc = gsb + ch * plane;
                    const T v00 = sc[s.y0 * w + s.x0];
                    const T v01 = sc[s.y0 * w + s.x1];
                    const T v10 = sc[s.y1 * w + s.x0];
                    const T v11 = sc[s.y1 * w + s.x1];
                    gsc[s.y0 * w + s.x0] += g * (1 - fx) * (1 - fy);
                    gsc[s.y0 * w + s.x1] += g * fx * (1 - fy);
                    gsc[s.y1 * w + s.x0] += g * (1 - fx) * fy;
                    gsc[s.y1 * w + s.x1] += g * fx * fy;
                    acc_dx += g * ((1 - fy) * (v01 - v00) + fy * (v11 - v10));
                    acc_dy += g * ((1 - fx) * (v10 - v00) + fx * (v11 - v01));
                }
                // clamped coordinates do not move with the flow
                gdx[p] = s.inside_x ? acc_dx : T(0);
                gdy[p] = s.inside_y ? acc_dy : T(0);
            }
        }
    }
}

class WarpFunction : public torch::autograd::Function<WarpFunction> {
public:
    static torch::Tensor forward(torch::autograd::AutogradContext* ctx, torch::Tensor src,
                                 torch::Tensor flow) {
        src = src.contiguous();
        flow = flow.contiguous();
        ctx->save_for_backward({src, flow});
        auto out = torch::empty_like(src);
        const int64_t n = src.size(0), c = src.size(1), h = src.size(2), w = src.size(3);
        AT_DISPATCH_FLOATING_TYPES(src.scalar_type(), "warp_forward", [&] {
            warp_forward_kernel<scalar_t>(src.data_ptr<scalar_t>(), flow.data_ptr<scalar_t>(),
                                          out.data_ptr<scalar_t>(), n, c, h, w);
        });
        return out;
    }

    static torch::autograd::tensor_list backward(torch::autograd::AutogradContext* ctx,
                                                 torch::autograd::tensor_list grads) {
        const auto saved = ctx->get_saved_variables();
        const auto& src = saved[0];
        const auto& flow = saved[1];
        auto grad_out = grads[0].contiguous();
        auto grad_src = torch::zeros_like(src);
        auto grad_flow = torch::zeros_like(flow);
        const int64_t n = src.size(0), c = src.size(1), h = src.size(2), w = src.size(3);
        AT_DISPATCH_FLOATING_TYPES(src.scalar_type(), "warp_backward", [&] {
            warp_backward_kernel<scalar_t>(src.data_ptr<scalar_t>(), flow.data_ptr<scalar_t>(),
                                           grad_out.data_ptr<scalar_t>(),
                                           grad_src.data_ptr<scalar_t>(),
                                           grad_flow.data_ptr<scalar_t>(), n, c, h, w);
        });
        return {grad_src, grad_flow};
    }
};

}  // namespace

torch::Tensor warp(const torch::Tensor& src, const torch::Tensor& flow) {
    if (src.dim() != flow.dim() || (src.dim() != 3 && src.dim() != 4)) {
        throw ShapeError("warp: src and flow must both be [C,H,W] or [N,C,H,W]");
    }
    const bool batched = src.dim() == 4;
    auto s = batched ? src : src.unsqueeze(0);
    auto f = batched ? flow : flow.unsqueeze(0);
    if (f.size(1) != 2) throw ShapeError("warp: flow must have 2 channels");
    if (s.size(0) != f.size(0) || s.size(2) != f.size(2) || s.size(3) != f.size(3)) {
        throw ShapeError("warp: flow dims " + std::to_string(f.size(2)) + "x" +
                         std::to_string(f.size(3)) + " do not match src dims " +
                         std::to_string(s.size(2)) + "x" + std::to_string(s.size(3)));
    }
    if (f.scalar_type() != s.scalar_type()) f = f.to(s.scalar_type());
    auto out = WarpFunction::apply(s, f);
    return batched ? out : out.squeeze(0);
}

Frame warp_frame(const Frame& src, const FlowField& flow) {
    return Frame(warp(src.pixels(), flow.field()));
}

FlowField compose_flows(const FlowField& f_ab, const FlowField& f_bc) {
    if (f_ab.scale() != f_bc.scale()) throw ShapeError("compose_flows: scale mismatch");
    if (f_ab.height() != f_bc.height() || f_ab.width() != f_bc.width()) {
        throw ShapeError("compose_flows: dimension mismatch");
    }
    auto bc = f_bc.field();
    auto ab = f_ab.field();
    if (ab.scalar_type() != bc.scalar_type()) ab = ab.to(bc.scalar_type());
    return {bc + warp(ab, bc), f_bc.scale()};
}

}  // namespace rmfat
