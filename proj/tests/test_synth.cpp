#include <fstream>

#include <gtest/gtest.h>

#include "rmfat/metrics.hpp"
#include "rmfat/turbulence_synth.hpp"
#include "support.hpp"

using namespace rmfat;
using namespace rmfat::testing;
namespace fs = std::filesystem;

namespace {

// mean degraded PSNR of the seeded checkerboard run, recorded from the reference build
constexpr double kCheckerboardPsnr = 6.5482847711;

double frame_rms(const FlowField& f) { return std::sqrt((f.field() * f.field()).sum(0).mean().item<double>()); }

torch::Tensor stacked(const std::vector<FlowField>& flows) {
    std::vector<torch::Tensor> t;
    for (const auto& f : flows) t.push_back(f.field());
    return torch::stack(t);
}

torch::Tensor checkerboard(int64_t h, int64_t w, int64_t cell) {
    auto y = torch::arange(h).view({h, 1}).div(cell, "floor");
    auto x = torch::arange(w).view({1, w}).div(cell, "floor");
    auto board = ((y + x) % 2).to(torch::kFloat32);
    return board.unsqueeze(0).expand({3, h, w}).contiguous();
}

}  // namespace

TEST(TurbulenceParams, Validation) {
    TurbulenceParams p;
    EXPECT_NO_THROW(p.validate());
    p.temporal_corr = 1.0;
    EXPECT_THROW(p.validate(), ConfigError);
    p = {};
    p.tilt_strength = -1;
    EXPECT_THROW(p.validate(), ConfigError);
    p = {};
    p.blur_sigma_min = 2;
    p.blur_sigma_max = 1;
    EXPECT_THROW(p.validate(), ConfigError);
    EXPECT_THROW(severity_preset("apocalyptic"), ConfigError);
    EXPECT_EQ(severity_preset("none").tilt_strength, 0.0);
}

TEST(TiltSeries, ZeroStrengthGivesZeroFlows) {
    TurbulenceParams p;
    p.tilt_strength = 0;
    for (const auto& f : generate_tilt_series(p, 5, 12, 10)) EXPECT_EQ(f.field().abs().max().item<double>(), 0.0);
}

TEST(TiltSeries, PerFrameRmsEqualsStrength) {
    for (double s : {0.3, 1.5, 4.0}) {
        TurbulenceParams p;
        p.tilt_strength = s;
        p.seed = 5;
        for (const auto& f : generate_tilt_series(p, 20, 16, 20)) EXPECT_NEAR(frame_rms(f), s, 1e-6);
    }
}

TEST(TiltSeries, DeterministicGivenSeed) {
    TurbulenceParams p;
    p.seed = 77;
    auto a = stacked(generate_tilt_series(p, 6, 10, 10));
    auto b = stacked(generate_tilt_series(p, 6, 10, 10));
    EXPECT_TRUE(bit_equal(a, b));
    p.seed = 78;
    EXPECT_FALSE(bit_equal(a, stacked(generate_tilt_series(p, 6, 10, 10))));
}

TEST(TiltSeries, IndependentFramesAtZeroCorrelation) {
    TurbulenceParams p;
    p.temporal_corr = 0.0;
    p.seed = 3;
    auto d = stacked(generate_tilt_series(p, 500, 16, 16));
    auto a = d.narrow(0, 0, 499), b = d.narrow(0, 1, 499);
    const double corr = ((a * b).sum() / torch::sqrt((a * a).sum() * (b * b).sum())).item<double>();
    EXPECT_NEAR(corr, 0.0, 0.1);
}

TEST(TiltSeries, LagOneCorrelationFollowsCoefficient) {
    TurbulenceParams p;
    p.temporal_corr = 0.8;
    p.seed = 4;
    auto d = stacked(generate_tilt_series(p, 500, 16, 16));
    auto a = d.narrow(0, 0, 499), b = d.narrow(0, 1, 499);
    const double corr = ((a * b).sum() / torch::sqrt((a * a).sum() * (b * b).sum())).item<double>();
    EXPECT_NEAR(corr, 0.8, 0.1);
}

TEST(TiltSeries, LongRunMeanIsNearZeroPerPixel) {
    // per-pixel means scored against the AR(1) standard error of a 2000-frame average
    TurbulenceParams p;
    p.tilt_strength = 2.0;
    p.seed = 9;
    const double rho = p.temporal_corr, n = 2000;
    auto d = stacked(generate_tilt_series(p, 2000, 24, 24));
    auto se = d.std(0) * std::sqrt((1 + rho) / ((1 - rho) * n));
    EXPECT_LE((d.mean(0) / se).abs().max().item<double>(), 5.0);
}

TEST(TiltSeries, LongRunFieldMeanIsNearZero) {
    TurbulenceParams p;
    p.tilt_strength = 2.0;
    p.seed = 9;
    auto d = stacked(generate_tilt_series(p, 2000, 24, 24));
    EXPECT_LE(d.mean({0, 2, 3}).abs().max().item<double>(), 0.05 * p.tilt_strength);
}

TEST(TiltSeries, LongRunFieldMeanIsNearZeroForStrongCorrelation) {
    TurbulenceParams p;
    p.tilt_strength = 1.0;
    p.temporal_corr = 0.95;
    p.seed = 10;
    auto d = stacked(generate_tilt_series(p, 2000, 24, 24));
    EXPECT_LE(d.mean({0, 2, 3}).abs().max().item<double>(), 0.05 * p.tilt_strength);
}

TEST(Degrade, IdentityAtZeroParameters) {
    auto clean = random_sequence(4, 12, 12, 1);
    auto out = degrade_sequence(clean, severity_preset("none", 3));
    for (std::size_t t = 0; t < clean.size(); ++t) {
        EXPECT_TRUE(bit_equal(out.degraded.frames[t].pixels(), clean.frames[t].pixels()));
    }
}

TEST(Degrade, ConstantFrameSurvivesTilt) {
    auto clean = constant_sequence(torch::full({3, 16, 16}, 0.42f), 4);
    TurbulenceParams p;
    p.tilt_strength = 3;
    p.blur_sigma_min = p.blur_sigma_max = 0;
    auto out = degrade_sequence(clean, p);
    for (const auto& f : out.degraded.frames) EXPECT_TRUE(bit_equal(f.pixels(), clean.frames[0].pixels()));
}

TEST(Degrade, DeterministicAndReturnsTilts) {
    auto clean = random_sequence(3, 16, 16, 2);
    TurbulenceParams p;
    p.seed = 12;
    auto a = degrade_sequence(clean, p);
    auto b = degrade_sequence(clean, p);
    ASSERT_EQ(a.tilts.size(), 3u);
    ASSERT_EQ(a.blur_sigmas.size(), 3u);
    for (std::size_t t = 0; t < 3; ++t) {
        EXPECT_TRUE(bit_equal(a.degraded.frames[t].pixels(), b.degraded.frames[t].pixels()));
        EXPECT_GE(a.blur_sigmas[t], p.blur_sigma_min);
        EXPECT_LE(a.blur_sigmas[t], p.blur_sigma_max);
    }
}

TEST(Degrade, CheckerboardPsnrDropBaseline) {
    auto board = checkerboard(32, 32, 4);
    auto clean = constant_sequence(board, 8);
    TurbulenceParams p;
    p.tilt_strength = 2.0;
    p.blur_sigma_min = p.blur_sigma_max = 1.0;
    p.seed = 1;
    auto out = degrade_sequence(clean, p);
    double mean_psnr = 0;
    for (std::size_t t = 0; t < clean.size(); ++t) {
        const double quantized = psnr(Frame(board.mul(255).round().div(255)), clean.frames[t]);
        const double degraded = psnr(out.degraded.frames[t], clean.frames[t]);
        EXPECT_LT(degraded, quantized);
        mean_psnr += degraded / static_cast<double>(clean.size());
    }
    EXPECT_NEAR(mean_psnr, kCheckerboardPsnr, 1e-3);
}

TEST(GaussianBlur, PreservesConstantsAndMass) {
    auto c = torch::full({3, 10, 10}, 0.3, torch::kFloat64);
    EXPECT_LE((gaussian_blur(c, 1.3) - c).abs().max().item<double>(), 1e-12);
    auto img = uniform({1, 9, 9}, 3, torch::kFloat64);
    EXPECT_TRUE(bit_equal(gaussian_blur(img, 0.0), img));
}

TEST(Manifest, RoundTripResolvesPaths) {
    TempDir dir("manifest");
    TurbulenceParams p = params_for_strength(1.25, 4);
    std::vector<ManifestRecord> recs{{dir / "pair_0000/clean", dir / "pair_0000/degraded", 4, p},
                                     {dir / "pair_0001/clean", dir / "pair_0001/degraded", 5, p}};
    write_manifest(recs, dir / "manifest.jsonl");
    std::ifstream in(dir / "manifest.jsonl");
    std::string line;
    int lines = 0;
    while (std::getline(in, line)) {
        auto j = nlohmann::json::parse(line);
        EXPECT_TRUE(j.contains("clean_dir"));
        EXPECT_TRUE(j.contains("degraded_dir"));
        EXPECT_TRUE(j.contains("seed"));
        EXPECT_TRUE(j.contains("params"));
        ++lines;
    }
    EXPECT_EQ(lines, 2);
    auto back = read_manifest(dir / "manifest.jsonl");
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(fs::weakly_canonical(back[1].degraded_dir), fs::weakly_canonical(recs[1].degraded_dir));
    EXPECT_EQ(back[1].seed, 5u);
    EXPECT_EQ(back[0].params.tilt_strength, 1.25);
    EXPECT_EQ(back[0].params.blur_sigma_max, p.blur_sigma_max);
}

TEST(Manifest, MalformedLineThrows) {
    TempDir dir("manifestbad");
    std::ofstream(dir / "m.jsonl") << "{not json\n";
    EXPECT_THROW(read_manifest(dir / "m.jsonl"), Error);
}
