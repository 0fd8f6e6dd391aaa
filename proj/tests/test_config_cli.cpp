#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "rmfat/checkpoint.hpp"
#include "rmfat/cli.hpp"
#include "rmfat/config.hpp"
#include "rmfat/metrics.hpp"
#include "support.hpp"

using namespace rmfat;
using namespace rmfat::testing;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code = -1;
    std::string out, err;
};

Run cli(std::vector<std::string> args) {
    args.insert(args.begin(), "rmfat");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    Run r;
    r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

std::string slurp(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void write_text(const fs::path& file, const std::string& text) { std::ofstream(file) << text; }

void write_sources(const fs::path& dir, int count, int64_t h = 24, int64_t w = 24) {
    fs::create_directories(dir);
    for (int i = 0; i < count; ++i) {
        save_frame(Frame(smooth_image(h, w, static_cast<uint64_t>(i) + 1)),
                   dir / ("img_" + std::to_string(i) + ".png"));
    }
}

/// Compact identity checkpoint with its config snapshot.
fs::path identity_checkpoint(const fs::path& file) {
    RunConfig rc;
    rc.train.model = compact_model();
    auto net = make_network(rc.train.model);
    Checkpoint ck;
    ck.parameters = snapshot_parameters(*net);
    ck.config = dump_config(rc);
    save_checkpoint(ck, file);
    return file;
}

std::size_t count_files(const fs::path& dir) {
    if (!fs::exists(dir)) return 0;
    std::size_t n = 0;
    for (const auto& e : fs::directory_iterator(dir)) n += e.is_regular_file() ? 1 : 0;
    return n;
}

}  // namespace

// -- config ------------------------------------------------------------------------------

TEST(Config, SchemaCoversAblationsAndDefaultsRoundTrip) {
    RunConfig rc;
    for (const char* k : {"use_wavelet", "use_detection", "use_flow", "decoder_warp", "multiscale_warp",
                          "recurrent", "epochs", "lr_initial", "channels_per_scale", "tilt_strength"}) {
        EXPECT_TRUE(is_config_key(k)) << k;
    }
    auto dumped = dump_config(rc);
    EXPECT_EQ(dumped.size(), config_schema().size());
    RunConfig again;
    apply_config(again, dumped);
    EXPECT_EQ(dump_config(again), dumped);
}

TEST(Config, ParsesFileSyntax) {
    auto kv = parse_config_text("# comment\n\nepochs = 3\n  lr_initial=2e-4  # trailing\nuse_flow = false\n"
                                "channels_per_scale = 8, 16, 32\n");
    RunConfig rc;
    apply_config(rc, kv);
    EXPECT_EQ(rc.train.epochs, 3);
    EXPECT_EQ(rc.train.lr_initial, 2e-4);
    EXPECT_FALSE(rc.train.loss.use_flow);
    EXPECT_EQ(rc.train.model.blocks.channels_per_scale, (std::array<int64_t, 3>{8, 16, 32}));
}

TEST(Config, UnknownKeyNamedWithLine) {
    try {
        parse_config_text("epochs = 1\nlr_inital = 0.1\n");
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("lr_inital"), std::string::npos);
        EXPECT_NE(msg.find("line 2"), std::string::npos);
    }
}

TEST(Config, DuplicateAndMalformedLinesRejected) {
    EXPECT_THROW(parse_config_text("epochs = 1\nepochs = 2\n"), ConfigError);
    EXPECT_THROW(parse_config_text("epochs\n"), ConfigError);
    RunConfig rc;
    EXPECT_THROW(apply_config(rc, {{"epochs", "many"}}), ConfigError);
    EXPECT_THROW(apply_config(rc, {{"use_flow", "maybe"}}), ConfigError);
    EXPECT_THROW(apply_config(rc, {{"attention_heads", "3"}}), ConfigError);
}

TEST(Config, SnapshotRestoresModel) {
    RunConfig rc;
    rc.train.model = compact_model();
    rc.train.model.decoder_warp = false;
    auto back = config_from_snapshot(dump_config(rc));
    EXPECT_EQ(back.train.model.blocks.channels_per_scale, rc.train.model.blocks.channels_per_scale);
    EXPECT_FALSE(back.train.model.decoder_warp);
    EXPECT_EQ(back.train.model.num_refinement_blocks, 1);
}

// -- cli basics ----------------------------------------------------------------------------

TEST(Cli, NoSubcommandIsUsageError) {
    EXPECT_EQ(cli({}).code, kExitUsage);
    EXPECT_EQ(cli({"frobnicate"}).code, kExitUsage);
}

TEST(Cli, TrainHelpListsEveryKeyWithDefault) {
    auto r = cli({"train", "--help"});
    EXPECT_EQ(r.code, kExitOk);
    const RunConfig defaults;
    for (const auto& key : config_schema()) {
        const auto at = r.out.find("--" + key.name + " ");
        ASSERT_NE(at, std::string::npos) << key.name;
        const auto line = r.out.substr(at, r.out.find('\n', at) - at);
        EXPECT_NE(line.find(get_config_value(defaults, key.name)), std::string::npos) << line;
    }
}

TEST(Cli, SubcommandHelpShowsDefaults) {
    auto r = cli({"synth", "--help"});
    EXPECT_EQ(r.code, kExitOk);
    EXPECT_NE(r.out.find("--frames"), std::string::npos);
    EXPECT_NE(r.out.find("50"), std::string::npos);
    EXPECT_EQ(cli({"slice", "--help"}).code, kExitOk);
}

// -- synth ---------------------------------------------------------------------------------

TEST(CliSynth, ThreeImagesFiftyFrames) {
    TempDir dir("synth");
    write_sources(dir / "src", 3);
    auto r = cli({"synth", "--src-dir", (dir / "src").string(), "--out-dir", (dir / "out").string()});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    auto records = read_manifest(dir / "out" / "manifest.jsonl");
    ASSERT_EQ(records.size(), 3u);
    for (const auto& rec : records) {
        EXPECT_EQ(count_files(rec.clean_dir), 50u);
        EXPECT_EQ(count_files(rec.degraded_dir), 50u);
    }
    std::ifstream in(dir / "out" / "manifest.jsonl");
    std::string line;
    int lines = 0;
    while (std::getline(in, line)) lines += line.empty() ? 0 : 1;
    EXPECT_EQ(lines, 3);
}

TEST(CliSynth, ZeroStrengthIsIdentity) {
    TempDir dir("synth0");
    write_sources(dir / "src", 1);
    auto r = cli({"synth", "--src-dir", (dir / "src").string(), "--out-dir", (dir / "out").string(),
                  "--frames", "4", "--strength", "0"});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    auto rec = read_manifest(dir / "out" / "manifest.jsonl").front();
    auto clean = load_sequence(rec.clean_dir, SequenceRole::Clean);
    auto degraded = load_sequence(rec.degraded_dir, SequenceRole::Degraded);
    for (std::size_t t = 0; t < clean.size(); ++t) {
        EXPECT_TRUE(torch::equal(clean.frames[t].pixels(), degraded.frames[t].pixels()));
    }
}

TEST(CliSynth, SameSeedSameBytes) {
    TempDir dir("synthdet");
    write_sources(dir / "src", 2);
    for (const char* out : {"a", "b"}) {
        auto r = cli({"synth", "--src-dir", (dir / "src").string(), "--out-dir", (dir / out).string(),
                      "--frames", "3", "--seed", "5"});
        ASSERT_EQ(r.code, kExitOk) << r.err;
    }
    for (const char* rel : {"pair_0000/degraded/frame_00002.png", "pair_0001/degraded/frame_00000.png"}) {
        EXPECT_EQ(slurp(dir / "a" / rel), slurp(dir / "b" / rel)) << rel;
    }
    auto ma = read_manifest(dir / "a" / "manifest.jsonl");
    auto mb = read_manifest(dir / "b" / "manifest.jsonl");
    EXPECT_EQ(ma[1].seed, 6u);
    EXPECT_EQ(ma[1].seed, mb[1].seed);
}

TEST(CliSynth, AcceptsFrameDirectories) {
    TempDir dir("synthdir");
    VideoSequence video = random_sequence(5, 16, 16, 3);
    save_sequence(video, dir / "src" / "video");
    auto r = cli({"synth", "--src-dir", (dir / "src").string(), "--out-dir", (dir / "out").string(),
                  "--frames", "3"});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    auto rec = read_manifest(dir / "out" / "manifest.jsonl").front();
    EXPECT_EQ(count_files(rec.clean_dir), 3u);
}

TEST(CliSynth, EmptySourceDirFailsWithoutOutput) {
    TempDir dir("synthempty");
    fs::create_directories(dir / "src");
    auto r = cli({"synth", "--src-dir", (dir / "src").string(), "--out-dir", (dir / "out").string()});
    EXPECT_EQ(r.code, kExitUsage);
    EXPECT_FALSE(fs::exists(dir / "out"));
    EXPECT_EQ(cli({"synth", "--src-dir", (dir / "nope").string(), "--out-dir", (dir / "out").string()}).code,
              kExitUsage);
    EXPECT_EQ(cli({"synth", "--src-dir", (dir / "src").string()}).code, kExitUsage);
}

TEST(CliSynth, ConfigSuppliesTurbulence) {
    TempDir dir("synthcfg");
    write_sources(dir / "src", 1);
    write_text(dir / "t.cfg", "tilt_strength = 0\nblur_sigma_min = 0\nblur_sigma_max = 0\n");
    auto r = cli({"synth", "--src-dir", (dir / "src").string(), "--out-dir", (dir / "out").string(),
                  "--frames", "2", "--config", (dir / "t.cfg").string()});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    auto rec = read_manifest(dir / "out" / "manifest.jsonl").front();
    EXPECT_EQ(rec.params.tilt_strength, 0.0);
    EXPECT_EQ(slurp(rec.clean_dir / "frame_00001.png"), slurp(rec.degraded_dir / "frame_00001.png"));
}

// -- train ---------------------------------------------------------------------------------

class CliTrain : public ::testing::Test {
protected:
    void SetUp() override {
        write_sources(dir / "src", 1, 16, 16);
        auto r = cli({"synth", "--src-dir", (dir / "src").string(), "--out-dir", (dir / "data").string(),
                      "--frames", "3"});
        ASSERT_EQ(r.code, kExitOk) << r.err;
        write_text(dir / "small.cfg",
                   "epochs = 1\npatch_size = 16\nclip_length = 2\nchannels_per_scale = 4,4,4\n"
                   "attention_heads = 2\nffn_expansion = 1\nnum_encoder_blocks_per_scale = 1\n"
                   "num_decoder_blocks_per_scale = 1\nnum_refinement_blocks = 1\n");
    }
    std::vector<std::string> base(const std::string& out) {
        return {"train", "--config", (dir / "small.cfg").string(), "--data-manifest",
                (dir / "data" / "manifest.jsonl").string(), "--out-dir", (dir / out).string()};
    }
    TempDir dir{"train"};
};

TEST_F(CliTrain, SmokeRunWritesCheckpointAndEchoesConfig) {
    auto r = cli(base("run"));
    ASSERT_EQ(r.code, kExitOk) << r.err;
    EXPECT_TRUE(fs::exists(dir / "run" / "last.ckpt"));
    EXPECT_TRUE(fs::exists(dir / "run" / "train_log.jsonl"));
    EXPECT_NE(r.out.find("# effective config"), std::string::npos);
    EXPECT_NE(r.out.find("patch_size = 16"), std::string::npos);
    auto snap = load_checkpoint(dir / "run" / "last.ckpt").config;
    ASSERT_NE(find_value(snap, "channels_per_scale"), nullptr);
    EXPECT_EQ(*find_value(snap, "channels_per_scale"), "4,4,4");
    EXPECT_EQ(slurp(dir / "run" / "effective_config.txt").find("epochs = 1"), 0u);
}

TEST_F(CliTrain, FlagsOverrideFile) {
    auto args = base("run");
    args.insert(args.end(), {"--epochs", "2", "--use_flow", "false"});
    auto r = cli(args);
    ASSERT_EQ(r.code, kExitOk) << r.err;
    EXPECT_EQ(load_checkpoint(dir / "run" / "last.ckpt").epoch, 2);
    std::ifstream log(dir / "run" / "train_log.jsonl");
    std::string line;
    while (std::getline(log, line)) EXPECT_EQ(nlohmann::json::parse(line)["loss_flow"].get<double>(), 0.0);
}

TEST_F(CliTrain, UnknownKeyNamedBeforeTraining) {
    write_text(dir / "bad.cfg", "epochs = 1\nlr_inital = 1e-3\n");
    auto r = cli({"train", "--config", (dir / "bad.cfg").string(), "--data-manifest",
                  (dir / "data" / "manifest.jsonl").string(), "--out-dir", (dir / "bad").string()});
    EXPECT_EQ(r.code, kExitUsage);
    EXPECT_NE(r.err.find("lr_inital"), std::string::npos);
    EXPECT_FALSE(fs::exists(dir / "bad"));
}

TEST_F(CliTrain, MissingManifestIsRuntimeError) {
    auto r = cli({"train", "--config", (dir / "small.cfg").string(), "--data-manifest",
                  (dir / "none.jsonl").string(), "--out-dir", (dir / "x").string()});
    EXPECT_EQ(r.code, kExitRuntime);
    EXPECT_FALSE(fs::exists(dir / "x"));
}

TEST_F(CliTrain, ResumeExtendsRun) {
    ASSERT_EQ(cli(base("run")).code, kExitOk);
    auto args = base("run");
    args.insert(args.end(), {"--epochs", "2", "--resume", (dir / "run" / "last.ckpt").string()});
    auto r = cli(args);
    ASSERT_EQ(r.code, kExitOk) << r.err;
    EXPECT_EQ(load_checkpoint(dir / "run" / "last.ckpt").epoch, 2);
}

// -- restore -------------------------------------------------------------------------------

TEST(CliRestore, IdentityCheckpointPassesFramesThrough) {
    TempDir dir("restore");
    auto ck = identity_checkpoint(dir / "id.ckpt");
    save_sequence(random_sequence(4, 20, 28, 1), dir / "in");
    auto r = cli({"restore", "--checkpoint", ck.string(), "--input-dir", (dir / "in").string(),
                  "--output-dir", (dir / "out").string(), "--emit-flows"});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    for (int t = 0; t < 4; ++t) {
        const auto name = frame_filename(static_cast<std::size_t>(t));
        auto a = load_frame(dir / "in" / name).pixels();
        auto b = load_frame(dir / "out" / name).pixels();
        EXPECT_LE((a - b).abs().max().item<double>(), 1.0 / 255 + 1e-6);
    }
    EXPECT_EQ(count_files(dir / "out" / "flows"), 3u);
    auto flow = read_flow_sidecar(dir / "out" / "flows" / "flow_00001.bin");
    EXPECT_EQ(flow.height(), 20);
    EXPECT_EQ(flow.width(), 28);
}

TEST(CliRestore, SingleFrame) {
    TempDir dir("restore1");
    auto ck = identity_checkpoint(dir / "id.ckpt");
    save_sequence(random_sequence(1, 16, 16, 2), dir / "in");
    auto r = cli({"restore", "--checkpoint", ck.string(), "--input-dir", (dir / "in").string(),
                  "--output-dir", (dir / "out").string()});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    EXPECT_EQ(count_files(dir / "out"), 1u);
    EXPECT_NE(r.out.find("restored 1 frames"), std::string::npos);
}

TEST(CliRestore, TimingSummaryAtTableResolution) {
    TempDir dir("restoret");
    auto ck = identity_checkpoint(dir / "id.ckpt");
    save_sequence(random_sequence(10, 384, 480, 3), dir / "in");
    auto r = cli({"restore", "--checkpoint", ck.string(), "--input-dir", (dir / "in").string(),
                  "--output-dir", (dir / "out").string()});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    EXPECT_NE(r.out.find("(480x384)"), std::string::npos) << r.out;
    const auto at = r.out.find("mean ");
    ASSERT_NE(at, std::string::npos);
    EXPECT_GT(std::stod(r.out.substr(at + 5)), 0.0);
}

TEST(CliRestore, BadInputsFailCleanly) {
    TempDir dir("restorebad");
    auto ck = identity_checkpoint(dir / "id.ckpt");
    std::ofstream(dir / "junk.ckpt") << "junk";
    save_sequence(random_sequence(2, 16, 16, 4), dir / "in");
    EXPECT_EQ(cli({"restore", "--checkpoint", (dir / "junk.ckpt").string(), "--input-dir",
                   (dir / "in").string(), "--output-dir", (dir / "o1").string()})
                  .code,
              kExitRuntime);
    EXPECT_EQ(cli({"restore", "--checkpoint", ck.string(), "--input-dir", (dir / "missing").string(),
                   "--output-dir", (dir / "o2").string()})
                  .code,
              kExitRuntime);
    EXPECT_FALSE(fs::exists(dir / "o1"));
    EXPECT_FALSE(fs::exists(dir / "o2"));

    // a checkpoint whose tensors do not fit the configured model
    Checkpoint bad = load_checkpoint(ck);
    bad.parameters.pop_back();
    save_checkpoint(bad, dir / "bad.ckpt");
    auto r = cli({"restore", "--checkpoint", (dir / "bad.ckpt").string(), "--input-dir",
                  (dir / "in").string(), "--output-dir", (dir / "o3").string()});
    EXPECT_EQ(r.code, kExitUsage);
    EXPECT_NE(r.err.find("missing tensor"), std::string::npos) << r.err;
}

// -- eval ----------------------------------------------------------------------------------

TEST(CliEval, IdentityAndSchema) {
    TempDir dir("eval");
    save_sequence(random_sequence(3, 16, 16, 5), dir / "a");
    auto r = cli({"eval", "--restored-dir", (dir / "a").string(), "--reference-dir", (dir / "a").string(),
                  "--report", (dir / "r.json").string()});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    auto j = nlohmann::json::parse(slurp(dir / "r.json"));
    EXPECT_EQ(j["aggregate"]["psnr_mean"].get<double>(), 100.0);
    EXPECT_NEAR(j["aggregate"]["ssim_mean"].get<double>(), 1.0, 1e-9);
    EXPECT_EQ(j["per_frame"].size(), 3u);
    EXPECT_TRUE(j["metadata"].contains("config_hash"));
    EXPECT_NO_THROW(EvalReport::from_json(j));
}

TEST(CliEval, SymmetricInArguments) {
    TempDir dir("evalsym");
    save_sequence(random_sequence(2, 16, 16, 6), dir / "a");
    save_sequence(random_sequence(2, 16, 16, 7), dir / "b");
    ASSERT_EQ(cli({"eval", "--restored-dir", (dir / "a").string(), "--reference-dir", (dir / "b").string(),
                   "--report", (dir / "ab.json").string()})
                  .code,
              kExitOk);
    ASSERT_EQ(cli({"eval", "--restored-dir", (dir / "b").string(), "--reference-dir", (dir / "a").string(),
                   "--report", (dir / "ba.json").string()})
                  .code,
              kExitOk);
    auto ab = nlohmann::json::parse(slurp(dir / "ab.json"))["aggregate"];
    auto ba = nlohmann::json::parse(slurp(dir / "ba.json"))["aggregate"];
    EXPECT_NEAR(ab["psnr_mean"].get<double>(), ba["psnr_mean"].get<double>(), 1e-12);
    EXPECT_NEAR(ab["ssim_mean"].get<double>(), ba["ssim_mean"].get<double>(), 1e-12);
}

TEST(CliEval, UsesFlowSidecars) {
    TempDir dir("evalflow");
    auto ck = identity_checkpoint(dir / "id.ckpt");
    save_sequence(random_sequence(3, 16, 16, 8), dir / "in");
    ASSERT_EQ(cli({"restore", "--checkpoint", ck.string(), "--input-dir", (dir / "in").string(),
                   "--output-dir", (dir / "out").string(), "--emit-flows"})
                  .code,
              kExitOk);
    auto r = cli({"eval", "--restored-dir", (dir / "out").string(), "--reference-dir", (dir / "in").string(),
                  "--report", (dir / "r.json").string(), "--flows-dir", (dir / "out" / "flows").string()});
    EXPECT_EQ(r.code, kExitOk) << r.err;
    auto missing = cli({"eval", "--restored-dir", (dir / "out").string(), "--reference-dir",
                        (dir / "in").string(), "--report", (dir / "m.json").string(), "--flows-dir",
                        (dir / "nowhere").string()});
    EXPECT_EQ(missing.code, kExitRuntime);
    EXPECT_FALSE(fs::exists(dir / "m.json"));
}

TEST(CliEval, LengthMismatchRejected) {
    TempDir dir("evalbad");
    save_sequence(random_sequence(3, 16, 16, 9), dir / "a");
    save_sequence(random_sequence(2, 16, 16, 10), dir / "b");
    auto r = cli({"eval", "--restored-dir", (dir / "a").string(), "--reference-dir", (dir / "b").string(),
                  "--report", (dir / "r.json").string()});
    EXPECT_EQ(r.code, kExitUsage);
    EXPECT_FALSE(fs::exists(dir / "r.json"));
}

// -- slice ---------------------------------------------------------------------------------

TEST(CliSlice, NinetyFrameSliceAtColumn435) {
    TempDir dir("slice");
    save_sequence(random_sequence(90, 12, 440, 11), dir / "in");
    auto r = cli({"slice", "--input-dir", (dir / "in").string(), "--x", "435", "--t0", "0", "--t1", "90",
                  "--out", (dir / "s.png").string()});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    auto img = load_frame(dir / "s.png");
    EXPECT_EQ(img.height(), 12);
    EXPECT_EQ(img.width(), 90);
}

TEST(CliSlice, ColumnOutOfRangeStatesBounds) {
    TempDir dir("slicebad");
    save_sequence(random_sequence(3, 10, 10, 12), dir / "in");
    auto r = cli({"slice", "--input-dir", (dir / "in").string(), "--x", "10", "--out", (dir / "s.png").string()});
    EXPECT_EQ(r.code, kExitUsage);
    EXPECT_NE(r.err.find("[0, 9]"), std::string::npos) << r.err;
    EXPECT_FALSE(fs::exists(dir / "s.png"));
    auto range = cli({"slice", "--input-dir", (dir / "in").string(), "--x", "1", "--t1", "7", "--out",
                      (dir / "s.png").string()});
    EXPECT_EQ(range.code, kExitUsage);
}

TEST(CliSlice, StaticInputGivesIdenticalColumns) {
    TempDir dir("slicestatic");
    save_sequence(constant_sequence(uniform({3, 10, 10}, 13), 6), dir / "in");
    ASSERT_EQ(cli({"slice", "--input-dir", (dir / "in").string(), "--x", "4", "--out", (dir / "s.png").string()})
                  .code,
              kExitOk);
    auto img = load_frame(dir / "s.png").pixels();
    EXPECT_EQ(img.size(2), 6);
    EXPECT_TRUE(torch::equal(img, img.select(2, 0).unsqueeze(2).expand_as(img)));
}
