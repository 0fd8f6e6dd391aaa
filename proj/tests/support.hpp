#pragma once
// Shared fixtures for the test binaries.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>

#include <torch/torch.h>

#include "json.hpp"

#include "rmfat/network.hpp"
#include "rmfat/video_core.hpp"

namespace rmfat::testing {

/// Small network used where the reference widths would only cost time.
inline ModelConfig compact_model() {
    ModelConfig c;
    c.blocks.channels_per_scale = {8, 16, 32};
    c.blocks.attention_heads = 2;
    c.num_encoder_blocks_per_scale = 1;
    c.num_decoder_blocks_per_scale = 1;
    c.num_refinement_blocks = 1;
    return c;
}

/// Smallest valid network, for finite-difference checks.
inline ModelConfig tiny_model() {
    ModelConfig c;
    c.blocks.channels_per_scale = {4, 4, 4};
    c.blocks.attention_heads = 2;
    c.blocks.ffn_expansion = 1.0;
    c.num_encoder_blocks_per_scale = 1;
    c.num_decoder_blocks_per_scale = 1;
    c.num_refinement_blocks = 1;
    return c;
}

inline torch::Generator generator(uint64_t seed) {
    return at::make_generator<at::CPUGeneratorImpl>(seed);
}

inline torch::Tensor uniform(torch::IntArrayRef shape, uint64_t seed,
                             torch::Dtype dtype = torch::kFloat32) {
    return torch::rand(shape, generator(seed), torch::TensorOptions().dtype(torch::kFloat64)).to(dtype);
}

inline VideoSequence random_sequence(int64_t frames, int64_t h, int64_t w, uint64_t seed,
                                     torch::Dtype dtype = torch::kFloat32) {
    VideoSequence s;
    for (int64_t t = 0; t < frames; ++t) {
        s.frames.emplace_back(uniform({3, h, w}, seed * 1000 + static_cast<uint64_t>(t), dtype));
    }
    return s;
}

/// Smooth image: a few low-frequency sinusoids per channel, values inside (0, 1).
/// band scales every frequency (smaller is smoother).
inline torch::Tensor smooth_image(int64_t h, int64_t w, uint64_t seed, double band = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto y = torch::arange(h, torch::kFloat64).view({h, 1});
    auto x = torch::arange(w, torch::kFloat64).view({1, w});
    auto img = torch::zeros({3, h, w}, torch::kFloat64);
    for (int c = 0; c < 3; ++c) {
        auto acc = torch::full({h, w}, 0.5, torch::kFloat64);
        for (int k = 0; k < 3; ++k) {
            const double fx = band * (0.02 + 0.06 * u(rng)), fy = band * (0.02 + 0.06 * u(rng));
            const double ph = 6.28 * u(rng);
            acc = acc + 0.1 * torch::sin(2 * M_PI * (fx * x + fy * y) + ph);
        }
        img[c] = acc;
    }
    return img;
}

inline VideoSequence constant_sequence(const torch::Tensor& image, int64_t frames) {
    VideoSequence s;
    s.role = SequenceRole::Clean;
    for (int64_t t = 0; t < frames; ++t) s.frames.emplace_back(image);
    return s;
}

inline bool bit_equal(const torch::Tensor& a, const torch::Tensor& b) {
    return a.sizes().equals(b.sizes()) && a.scalar_type() == b.scalar_type() && torch::equal(a, b);
}

class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                ("rmfat_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

private:
    std::filesystem::path path_;
};

struct GradCheck {
    double worst_ratio = 0;  ///< max over elements of |a - f| / (rtol |f| + atol)
    int64_t checked = 0;
    bool ok() const { return worst_ratio <= 1.0; }
};

/// Central finite differences of a scalar function of `x` against autograd, on up to
/// max_elements evenly spread elements. x must be a double leaf tensor.
inline GradCheck check_gradient(const std::function<torch::Tensor(const torch::Tensor&)>& f,
                                torch::Tensor x, double rtol = 1e-4, double atol = 1e-8,
                                int64_t max_elements = 64, double h = 1e-6) {
    x = x.detach().clone().set_requires_grad(true);
    auto analytic = torch::autograd::grad({f(x)}, {x})[0].contiguous();
    GradCheck out;
    const int64_t n = x.numel();
    const int64_t stride = std::max<int64_t>(1, n / max_elements);
    torch::NoGradGuard guard;
    auto flat = x.detach().clone();
    auto view = flat.view({-1});
    for (int64_t i = 0; i < n; i += stride) {
        const double orig = view[i].item<double>();
        view[i] = orig + h;
        const double up = f(flat).item<double>();
        view[i] = orig - h;
        const double down = f(flat).item<double>();
        view[i] = orig;
        const double fd = (up - down) / (2 * h);
        const double a = analytic.view({-1})[i].item<double>();
        out.worst_ratio = std::max(out.worst_ratio, std::abs(a - fd) / (rtol * std::abs(fd) + atol));
        ++out.checked;
    }
    return out;
}

/// Same check for a module parameter: f evaluates the scalar with the module as-is.
inline GradCheck check_parameter_gradient(const std::function<torch::Tensor()>& f,
                                          torch::Tensor param, double rtol = 1e-4,
                                          double atol = 1e-8, int64_t max_elements = 16,
                                          double h = 1e-6) {
    auto analytic = torch::autograd::grad({f()}, {param})[0].contiguous();
    GradCheck out;
    const int64_t n = param.numel();
    const int64_t stride = std::max<int64_t>(1, n / max_elements);
    torch::NoGradGuard guard;
    auto view = param.view({-1});
    for (int64_t i = 0; i < n; i += stride) {
        const double orig = view[i].item<double>();
        view[i] = orig + h;
        const double up = f().item<double>();
        view[i] = orig - h;
        const double down = f().item<double>();
        view[i] = orig;
        const double fd = (up - down) / (2 * h);
        const double a = analytic.view({-1})[i].item<double>();
        out.worst_ratio = std::max(out.worst_ratio, std::abs(a - fd) / (rtol * std::abs(fd) + atol));
        ++out.checked;
    }
    return out;
}

/// Reads a checkpoint header straight from the file bytes.
inline nlohmann::json read_checkpoint_header(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::string(magic, 8) != "RMFATCK1") throw std::runtime_error("not a checkpoint");
    unsigned char len_bytes[8];
    in.read(reinterpret_cast<char*>(len_bytes), 8);
    uint64_t len = 0;
    for (int i = 7; i >= 0; --i) len = (len << 8) | len_bytes[i];
    std::string header(len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(len));
    return nlohmann::json::parse(header);
}

/// Sum of element counts over every tensor listed in one section of a checkpoint.
inline int64_t checkpoint_elements(const std::filesystem::path& file, const std::string& section) {
    int64_t total = 0;
    const auto header = read_checkpoint_header(file);
    for (const auto& t : header.at("tensors")) {
        if (t.at("section") != section) continue;
        int64_t n = 1;
        for (const auto& d : t.at("shape")) n *= d.get<int64_t>();
        total += n;
    }
    return total;
}

}  // namespace rmfat::testing
