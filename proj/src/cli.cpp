#include "rmfat/cli.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <map>
#include <ostream>
#include <set>

#include "CLI11.hpp"

#include "rmfat/checkpoint.hpp"
#include "rmfat/config.hpp"
#include "rmfat/metrics.hpp"
#include "rmfat/recurrent_engine.hpp"
#include "rmfat/training.hpp"
#include "rmfat/turbulence_synth.hpp"

namespace fs = std::filesystem;

namespace rmfat {
namespace {

std::string pair_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "pair_%04zu", i);
    return buf;
}

std::string flow_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "flow_%05zu.bin", i);
    return buf;
}

bool is_image_file(const fs::path& p) {
    static const std::set<std::string> exts{".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".ppm"};
    auto ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return exts.count(ext) > 0;
}

void require_writable_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());
}

// -- synth ----------------------------------------------------------------------------

struct SynthArgs {
    std::string src_dir, out_dir, config;
    int64_t frames = 50;
    double strength = 1.0;
    uint64_t seed = 0;
};

int cmd_synth(const SynthArgs& a, bool strength_given, std::ostream& out) {
    if (a.frames < 1) throw ConfigError("--frames must be >= 1");
    if (!(a.strength >= 0.0)) throw ConfigError("--strength must be >= 0");
    if (!fs::is_directory(a.src_dir)) throw ConfigError("source directory does not exist: " + a.src_dir);

    TurbulenceParams base = params_for_strength(a.strength);
    if (!a.config.empty() && !strength_given) {
        RunConfig rc;
        apply_config(rc, read_config_file(a.config));
        base = rc.turbulence;
    }

    std::vector<fs::path> sources;
    for (const auto& e : fs::directory_iterator(a.src_dir)) {
        if ((e.is_regular_file() && is_image_file(e.path())) || e.is_directory()) sources.push_back(e.path());
    }
    std::sort(sources.begin(), sources.end());

    // everything is loaded and checked before the first file is written
    std::vector<VideoSequence> clean;
    for (const auto& src : sources) {
        VideoSequence seq;
        seq.role = SequenceRole::Clean;
        if (fs::is_directory(src)) {
            seq = load_sequence(src, SequenceRole::Clean);
            if (static_cast<int64_t>(seq.size()) > a.frames) seq.frames.resize(static_cast<std::size_t>(a.frames));
        } else {
            auto frame = load_frame(src);
            seq.frames.assign(static_cast<std::size_t>(a.frames), frame);
        }
        check_frame(seq.frames.front(), src.string());
        clean.push_back(std::move(seq));
    }
    if (clean.empty()) throw ConfigError("no source images in " + a.src_dir);

    require_writable_dir(a.out_dir);
    std::vector<ManifestRecord> records;
    for (std::size_t i = 0; i < clean.size(); ++i) {
        TurbulenceParams p = base;
        p.seed = a.seed + i;
        auto degraded = degrade_sequence(clean[i], p);
        const fs::path dir = fs::path(a.out_dir) / pair_name(i);
        save_sequence(clean[i], dir / "clean");
        save_sequence(degraded.degraded, dir / "degraded");
        records.push_back({dir / "clean", dir / "degraded", p.seed, p});
    }
    const fs::path manifest = fs::path(a.out_dir) / "manifest.jsonl";
    write_manifest(records, manifest);
    out << "wrote " << records.size() << " pairs of " << clean.front().size() << " frames; manifest "
        << manifest.string() << "\n";
    return kExitOk;
}

// -- train ----------------------------------------------------------------------------

struct TrainArgs {
    std::string config, data_manifest, val_manifest, out_dir, resume;
    std::map<std::string, std::string> overrides;
};

int cmd_train(const TrainArgs& a, const std::map<std::string, CLI::Option*>& key_flags,
              std::ostream& out) {
    RunConfig rc;
    KeyValues entries;
    if (!a.config.empty()) entries = read_config_file(a.config);
    for (const auto& [key, opt] : key_flags) {
        if (opt->count() > 0) entries.emplace_back(key, a.overrides.at(key));
    }
    apply_config(rc, entries);
    const auto effective = dump_config(rc);

    auto train_clips = load_clips(read_manifest(a.data_manifest));
    std::vector<TrainingClip> val_clips;
    if (!a.val_manifest.empty()) val_clips = load_clips(read_manifest(a.val_manifest));
    if (!a.resume.empty() && !fs::is_regular_file(a.resume)) {
        throw ConfigError("resume checkpoint does not exist: " + a.resume);
    }

    require_writable_dir(a.out_dir);
    const auto text = format_config(effective);
    {
        std::ofstream f(fs::path(a.out_dir) / "effective_config.txt");
        f << text;
    }
    out << "# effective config\n" << text;

    TrainOptions opts;
    opts.config_snapshot = effective;
    opts.progress = &out;
    if (!a.resume.empty()) opts.resume = fs::path(a.resume);
    auto result = train_on_clips(train_clips, val_clips, rc.train, a.out_dir, opts);
    out << "training finished after " << result.epoch << " epochs; best score " << result.best_score
        << "\n";
    return kExitOk;
}

// -- restore --------------------------------------------------------------------------

struct RestoreArgs {
    std::string checkpoint, input_dir, output_dir;
    bool emit_flows = false;
};

int cmd_restore(const RestoreArgs& a, std::ostream& out) {
    auto ck = load_checkpoint(a.checkpoint);
    const RunConfig rc = config_from_snapshot(ck.config);
    auto net = make_network(rc.train.model);
    apply_parameters(*net, ck.parameters);
    net->eval();
    const auto input = load_sequence(a.input_dir, SequenceRole::Degraded);
    for (std::size_t t = 0; t < input.size(); ++t) check_frame(input.frames[t], "input frame " + std::to_string(t));

    require_writable_dir(a.output_dir);
    EngineOptions opts;
    opts.history_size = rc.train.loss.history_k;
    opts.recurrent = rc.train.recurrent;
    opts.inference = true;
    RecurrentEngine engine(net, opts);
    double total = 0.0;
    for (std::size_t t = 0; t < input.size(); ++t) {
        const auto start = std::chrono::steady_clock::now();
        auto trace = engine.step(input.frames[t]);
        total += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        save_frame(trace.restored, fs::path(a.output_dir) / frame_filename(t));
        if (a.emit_flows && t > 0) {
            write_flow_sidecar(trace.step_flow, fs::path(a.output_dir) / "flows" / flow_name(t));
        }
    }
    const double n = static_cast<double>(input.size());
    out << "restored " << input.size() << " frames (" << input.width() << "x" << input.height()
        << "); mean " << total / n << " s/frame, total " << total << " s\n";
    return kExitOk;
}

// -- eval -----------------------------------------------------------------------------

struct EvalArgs {
    std::string restored_dir, reference_dir, report, flows_dir;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
    const auto restored = load_sequence(a.restored_dir, SequenceRole::Restored);
    const auto reference = load_sequence(a.reference_dir, SequenceRole::Clean);
    if (restored.size() != reference.size()) {
        throw ShapeError("sequence lengths differ: " + std::to_string(restored.size()) + " restored vs " +
                         std::to_string(reference.size()) + " reference frames");
    }
    if (restored.height() != reference.height() || restored.width() != reference.width()) {
        throw ShapeError("frame dimensions differ between restored and reference");
    }
    std::vector<FlowField> flows;
    if (!a.flows_dir.empty()) {
        for (std::size_t t = 1; t < restored.size(); ++t) {
            auto f = read_flow_sidecar(fs::path(a.flows_dir) / flow_name(t));
            if (f.height() != restored.height() || f.width() != restored.width()) {
                throw ShapeError("flow " + flow_name(t) + " does not match the frame dimensions");
            }
            flows.push_back(std::move(f));
        }
    }
    auto report = evaluate(restored, reference, a.flows_dir.empty() ? nullptr : &flows);
    report.sequence_ids = {fs::path(a.restored_dir).filename().string()};
    report.config_hash = fnv1a_hex("restored=" + a.restored_dir + ";reference=" + a.reference_dir +
                                   ";flows=" + a.flows_dir);
    const fs::path report_path(a.report);
    if (report_path.has_parent_path()) require_writable_dir(report_path.parent_path());
    std::ofstream f(report_path);
    if (!f) throw IoError("cannot write report " + a.report);
    f << report.to_json().dump(2) << "\n";
    out << "psnr_mean " << report.psnr_mean << " ssim_mean " << report.ssim_mean
        << " temporal_consistency " << report.temporal_consistency << " frames "
        << report.per_frame.size() << "\n";
    return kExitOk;
}

// -- slice ----------------------------------------------------------------------------

struct SliceArgs {
    std::string input_dir, out;
    int64_t x = 0;
    int64_t t0 = 0;
    int64_t t1 = -1;
};

int cmd_slice(const SliceArgs& a, std::ostream& out) {
    const auto seq = load_sequence(a.input_dir, SequenceRole::Degraded);
    const int64_t t1 = a.t1 < 0 ? static_cast<int64_t>(seq.size()) : a.t1;
    auto image = yt_slice(seq, a.x, {a.t0, t1});
    save_image(image, a.out);
    out << "wrote " << image.size(1) << "x" << image.size(2) << " slice to " << a.out << "\n";
    return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"rmfat: turbulence mitigation video restoration"};
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();

    SynthArgs synth;
    auto* s = app.add_subcommand("synth", "synthesize clean/degraded training pairs");
    s->add_option("--src-dir", synth.src_dir, "directory of source images or frame directories")->required();
    s->add_option("--out-dir", synth.out_dir, "output directory")->required();
    s->add_option("--frames", synth.frames, "frames per sequence");
    auto* strength_opt = s->add_option("--strength", synth.strength, "turbulence strength (tilt RMS, px)");
    s->add_option("--seed", synth.seed, "base seed; pair i uses seed + i");
    s->add_option("--config", synth.config, "config file supplying turbulence keys when --strength is absent");

    TrainArgs train;
    auto* t = app.add_subcommand("train", "train a restoration model");
    t->add_option("--config", train.config, "key = value config file");
    t->add_option("--data-manifest", train.data_manifest, "training manifest")->required();
    t->add_option("--val-manifest", train.val_manifest, "validation manifest (default: training set)");
    t->add_option("--out-dir", train.out_dir, "output directory")->required();
    t->add_option("--resume", train.resume, "checkpoint to resume from");
    std::map<std::string, CLI::Option*> key_flags;
    {
        const RunConfig defaults;
        for (const auto& key : config_schema()) {
            auto& slot = train.overrides[key.name];
            auto* opt = t->add_option("--" + key.name, slot, key.help);
            opt->default_str(get_config_value(defaults, key.name))->type_name("VALUE");
            key_flags[key.name] = opt;
        }
    }

    RestoreArgs restore;
    auto* r = app.add_subcommand("restore", "restore a degraded frame sequence");
    r->add_option("--checkpoint", restore.checkpoint, "model checkpoint")->required();
    r->add_option("--input-dir", restore.input_dir, "degraded frames")->required();
    r->add_option("--output-dir", restore.output_dir, "restored frames")->required();
    r->add_flag("--emit-flows", restore.emit_flows, "write per-step flow sidecars under output-dir/flows");

    EvalArgs eval;
    auto* e = app.add_subcommand("eval", "score restored frames against references");
    e->add_option("--restored-dir", eval.restored_dir, "restored frames")->required();
    e->add_option("--reference-dir", eval.reference_dir, "reference frames")->required();
    e->add_option("--report", eval.report, "output JSON report")->required();
    e->add_option("--flows-dir", eval.flows_dir, "flow sidecars for temporal consistency (default: zero flow)");

    SliceArgs slice;
    auto* sl = app.add_subcommand("slice", "write a y-t slice image");
    sl->add_option("--input-dir", slice.input_dir, "frame directory")->required();
    sl->add_option("--x", slice.x, "column index")->required();
    sl->add_option("--t0", slice.t0, "first frame (inclusive)");
    sl->add_option("--t1", slice.t1, "last frame (exclusive); -1 means the sequence end");
    sl->add_option("--out", slice.out, "output PNG")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& ex) {
        const int code = app.exit(ex, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*s) return cmd_synth(synth, strength_opt->count() > 0, out);
        if (*t) return cmd_train(train, key_flags, out);
        if (*r) return cmd_restore(restore, out);
        if (*e) return cmd_eval(eval, out);
        if (*sl) return cmd_slice(slice, out);
    } catch (const ConfigError& ex) {
        err << "error: " << ex.what() << "\n";
        return kExitUsage;
    } catch (const ShapeError& ex) {
        err << "error: " << ex.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& ex) {
        err << "error: " << ex.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}

}  // namespace rmfat
