#include "rmfat/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "rmfat/recurrent_engine.hpp"

namespace fs = std::filesystem;

namespace rmfat {

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (patch_size < kMinFrameSide || patch_size % 4 != 0) {
        throw ConfigError("patch_size must be >= 8 and divisible by 4");
    }
    if (!(lr_initial > 0.0)) throw ConfigError("lr_initial must be > 0");
    if (lr_step_epochs < 1) throw ConfigError("lr_step_epochs must be >= 1");
    if (!(lr_gamma > 0.0 && lr_gamma <= 1.0)) throw ConfigError("lr_gamma must be in (0, 1]");
    if (clip_length < 1) throw ConfigError("clip_length must be >= 1");
    if (bptt_window < 1) throw ConfigError("bptt_window must be >= 1");
    if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip must be >= 0");
    if (detector != "none") {
        const auto names = registered_detectors();
        if (std::find(names.begin(), names.end(), detector) == names.end()) {
            throw ConfigError("unknown detector '" + detector + "'");
        }
    }
    loss.validate();
    model.validate();
}

double learning_rate_at(const TrainConfig& config, int64_t epoch) {
    const auto k = std::max<int64_t>(epoch, 0) / config.lr_step_epochs;
    return config.lr_initial * std::pow(config.lr_gamma, static_cast<double>(k));
}

double combined_score(double psnr_mean, double ssim_mean) { return psnr_mean / 50.0 + ssim_mean; }

// -- Adam -----------------------------------------------------------------------------

Adam::Adam(NamedTensors parameters, double beta1, double beta2, double eps)
    : params_(std::move(parameters)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& [name, p] : params_) {
        m_.push_back(torch::zeros_like(p));
        v_.push_back(torch::zeros_like(p));
    }
}

void Adam::zero_grad() {
    for (auto& [name, p] : params_) {
        if (p.grad().defined()) p.mutable_grad().zero_();
    }
}

void Adam::step(double lr) {
    torch::NoGradGuard guard;
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i].second;
        const auto& g = p.grad();
        if (!g.defined()) continue;
        m_[i].mul_(beta1_).add_(g, 1.0 - beta1_);
        v_[i].mul_(beta2_).addcmul_(g, g, 1.0 - beta2_);
        auto denom = (v_[i] / bc2).sqrt_().add_(eps_);
        p.addcdiv_(m_[i], denom, -lr / bc1);
    }
}

OptimizerState Adam::state() const {
    OptimizerState s;
    s.step = step_;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        s.first_moment.emplace_back(params_[i].first, m_[i].clone());
        s.second_moment.emplace_back(params_[i].first, v_[i].clone());
    }
    return s;
}

void Adam::load_state(const OptimizerState& state) {
    auto load = [&](const NamedTensors& src, std::vector<torch::Tensor>& dst, const char* what) {
        if (src.size() != params_.size()) {
            throw ConfigError(std::string("optimizer state: ") + what + " count does not match the model");
        }
        for (std::size_t i = 0; i < params_.size(); ++i) {
            if (src[i].first != params_[i].first || !src[i].second.sizes().equals(dst[i].sizes())) {
                throw ConfigError(std::string("optimizer state: ") + what + " for '" +
                                  params_[i].first + "' does not match the model");
            }
            dst[i].copy_(src[i].second);
        }
    };
    torch::NoGradGuard guard;
    load(state.first_moment, m_, "first moment");
    load(state.second_moment, v_, "second moment");
    step_ = state.step;
}

// -- trainer --------------------------------------------------------------------------

nlohmann::json StepRecord::to_json() const {
    return {{"epoch", epoch},           {"step", step},           {"lr", lr},
            {"loss_total", loss_total}, {"loss_charb", loss_charb}, {"loss_dwt", loss_dwt},
            {"loss_flow", loss_flow},   {"loss_det", loss_det}};
}

namespace {

NamedTensors live_parameters(torch::nn::Module& module) {
    NamedTensors out;
    for (auto& item : module.named_parameters(true)) out.emplace_back(item.key(), item.value());
    return out;
}

}  // namespace

Trainer::Trainer(TrainConfig config, RmfatNet net)
    : config_(std::move(config)), net_(std::move(net)), optimizer_(live_parameters(*net_)) {
    config_.validate();
    net_->set_warp_flags(config_.model.decoder_warp, config_.model.multiscale_warp);
    if (config_.loss.use_detection && config_.detector != "none") {
        detector_ = make_detector(config_.detector);
    }
}

StepRecord Trainer::run_clip(const TrainingClip& clip, int64_t epoch, bool backward) {
    clip.degraded.validate();
    clip.clean.validate();
    if (clip.degraded.size() != clip.clean.size()) {
        throw ShapeError("clip '" + clip.id + "': degraded and clean lengths differ");
    }
    std::optional<torch::NoGradGuard> no_grad;
    if (!backward) no_grad.emplace();
    net_->train(backward);

    EngineOptions opts;
    opts.history_size = config_.loss.history_k;
    opts.recurrent = config_.recurrent;
    opts.inference = false;
    RecurrentEngine engine(net_, opts);

    const auto n = static_cast<int64_t>(clip.degraded.size());
    const double inv_n = 1.0 / static_cast<double>(n);
    const double batch_scale = 1.0 / static_cast<double>(config_.batch_size);
    const auto dtype = net_->parameters().front().scalar_type();

    StepRecord rec;
    rec.epoch = epoch;
    rec.lr = learning_rate_at(config_, epoch);
    torch::Tensor window;
    for (int64_t t = 0; t < n; ++t) {
        auto trace = engine.step(clip.degraded.frames[static_cast<std::size_t>(t)]);
        const auto& pred = trace.restored.pixels();
        auto target = clip.clean.frames[static_cast<std::size_t>(t)].pixels().to(dtype);
        auto terms = total_loss(pred, target, trace.history, nullptr, epoch, config_.loss);
        auto step_loss = terms.total * inv_n;
        if (t == n - 1 && detector_) {
            const auto gt = detector_->detect(clip.clean.frames.back()).boxes;
            auto det = detection_loss(trace.restored, gt, *detector_);
            rec.loss_det = det.total.item<double>();
            step_loss = step_loss + config_.loss.detection_weight(epoch) * det.total.to(dtype);
        }
        const double value = step_loss.item<double>();
        if (!std::isfinite(value)) {
            std::ostringstream os;
            os << "non-finite loss at epoch " << epoch << ", clip '" << clip.id << "', frame " << t
               << " (charb " << terms.charb << ", dwt " << terms.dwt << ", flow " << terms.flow
               << ", det " << rec.loss_det << ")";
            throw TrainingAborted(os.str());
        }
        rec.loss_total += value;
        rec.loss_charb += terms.charb * inv_n;
        rec.loss_dwt += terms.dwt * inv_n;
        rec.loss_flow += terms.flow * inv_n;
        window = window.defined() ? window + step_loss : step_loss;
        if ((t + 1) % config_.bptt_window == 0 || t == n - 1) {
            if (backward) (window * batch_scale).backward();
            window = torch::Tensor();
            engine.detach_state();
        }
    }
    return rec;
}

StepRecord Trainer::accumulate_clip(const TrainingClip& clip, int64_t epoch) {
    return run_clip(clip, epoch, true);
}

StepRecord Trainer::evaluate_loss(const TrainingClip& clip, int64_t epoch) {
    return run_clip(clip, epoch, false);
}

void Trainer::optimizer_step(int64_t epoch) {
    if (config_.grad_clip > 0.0) {
        torch::nn::utils::clip_grad_norm_(net_->parameters(), config_.grad_clip);
    }
    optimizer_.step(learning_rate_at(config_, epoch));
    optimizer_.zero_grad();
}

StepRecord Trainer::train_clip(const TrainingClip& clip, int64_t epoch) {
    auto rec = accumulate_clip(clip, epoch);
    optimizer_step(epoch);
    rec.step = optimizer_.steps();
    return rec;
}

// -- validation -----------------------------------------------------------------------

ValidationResult validate(RmfatNet net, const std::vector<TrainingClip>& clips, bool recurrent) {
    if (clips.empty()) throw ConfigError("validation requires at least one clip");
    net->eval();
    EngineOptions opts;
    opts.recurrent = recurrent;
    opts.inference = true;
    std::vector<EvalReport> reports;
    for (const auto& clip : clips) {
        auto result = run_sequence(net, clip.degraded, opts);
        std::vector<FlowField> flows;
        for (std::size_t t = 1; t < result.traces.size(); ++t) flows.push_back(result.traces[t].step_flow);
        auto report = evaluate(result.restored, clip.clean, &flows);
        report.sequence_ids = {clip.id};
        reports.push_back(std::move(report));
    }
    ValidationResult out;
    out.report = merge_reports(reports);
    out.score = combined_score(out.report.psnr_mean, out.report.ssim_mean);
    return out;
}

// -- data -----------------------------------------------------------------------------

std::vector<TrainingClip> load_clips(const std::vector<ManifestRecord>& records) {
    std::vector<TrainingClip> clips;
    for (const auto& r : records) {
        TrainingClip c;
        c.id = r.degraded_dir.string();
        c.degraded = load_sequence(r.degraded_dir, SequenceRole::Degraded);
        c.clean = load_sequence(r.clean_dir, SequenceRole::Clean);
        if (c.degraded.size() != c.clean.size()) {
            throw ShapeError("manifest pair " + c.id + ": degraded and clean lengths differ");
        }
        clips.push_back(std::move(c));
    }
    return clips;
}

TrainingClip sample_training_clip(const TrainingClip& clip, int64_t patch_size,
                                  int64_t clip_length, uint64_t seed) {
    clip.degraded.validate();
    clip.clean.validate();
    if (clip.degraded.size() != clip.clean.size()) {
        throw ShapeError("clip '" + clip.id + "': degraded and clean lengths differ");
    }
    const auto total = static_cast<int64_t>(clip.degraded.size());
    const int64_t len = std::min(clip_length, total);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int64_t> pick(0, total - len);
    const auto start = pick(rng);
    auto window = [&](const VideoSequence& s) {
        VideoSequence w;
        w.role = s.role;
        w.frame_rate = s.frame_rate;
        w.frames.assign(s.frames.begin() + start, s.frames.begin() + start + len);
        return w;
    };
    auto patch = crop_patch_pair(window(clip.degraded), window(clip.clean), patch_size, rng());
    return {clip.id, std::move(patch.degraded), std::move(patch.clean)};
}

// -- loop -----------------------------------------------------------------------------

Checkpoint train_on_clips(const std::vector<TrainingClip>& train_clips,
                          const std::vector<TrainingClip>& val_clips, const TrainConfig& config,
                          const fs::path& out_dir, const TrainOptions& options) {
    config.validate();
    if (train_clips.empty()) throw ConfigError("training set is empty");
    auto net = make_network(config.model);
    Trainer trainer(config, net);
    std::mt19937_64 rng(config.seed);
    int64_t first_epoch = 0;
    double best = -std::numeric_limits<double>::infinity();

    if (options.resume) {
        auto ck = load_checkpoint(*options.resume);
        apply_parameters(*net, ck.parameters);
        trainer.optimizer().load_state(ck.optimizer);
        first_epoch = ck.epoch;
        best = ck.best_score;
        std::istringstream is(ck.rng_state);
        is >> rng;
        if (!is) throw IoError("checkpoint RNG state is unreadable");
    }

    fs::create_directories(out_dir);
    std::ofstream log(out_dir / "train_log.jsonl", options.resume ? std::ios::app : std::ios::trunc);
    if (!log) throw IoError("cannot write training log in " + out_dir.string());

    auto say = [&](const std::string& msg) {
        if (options.progress) *options.progress << msg << std::endl;
    };
    const auto& val_set = val_clips.empty() ? train_clips : val_clips;

    Checkpoint last;
    last.epoch = first_epoch;
    last.best_score = best;
    for (int64_t epoch = first_epoch; epoch < config.epochs; ++epoch) {
        std::vector<std::size_t> order(train_clips.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);

        std::size_t used = 0;
        for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(config.batch_size)) {
            const auto end = std::min(order.size(), at + static_cast<std::size_t>(config.batch_size));
            StepRecord sum;
            std::size_t in_batch = 0;
            for (std::size_t i = at; i < end; ++i) {
                const auto& clip = train_clips[order[i]];
                const uint64_t clip_seed = rng();
                TrainingClip sample;
                try {
                    sample = sample_training_clip(clip, config.patch_size, config.clip_length, clip_seed);
                } catch (const Error& e) {
                    say("[skip] clip '" + clip.id + "': " + e.what());
                    continue;
                }
                auto rec = trainer.accumulate_clip(sample, epoch);
                sum.loss_total += rec.loss_total;
                sum.loss_charb += rec.loss_charb;
                sum.loss_dwt += rec.loss_dwt;
                sum.loss_flow += rec.loss_flow;
                sum.loss_det += rec.loss_det;
                ++in_batch;
            }
            if (in_batch == 0) continue;
            trainer.optimizer_step(epoch);
            const double k = static_cast<double>(in_batch);
            StepRecord rec{epoch,
                           trainer.optimizer().steps(),
                           learning_rate_at(config, epoch),
                           sum.loss_total / k,
                           sum.loss_charb / k,
                           sum.loss_dwt / k,
                           sum.loss_flow / k,
                           sum.loss_det / k};
            log << rec.to_json().dump() << '\n';
            log.flush();
            if (options.on_step) options.on_step(rec);
            used += in_batch;
        }
        if (used == 0) throw TrainingAborted("epoch " + std::to_string(epoch) + ": no usable training clips");

        auto val = validate(net, val_set, config.recurrent);
        std::ostringstream os;
        os << "epoch " << epoch + 1 << "/" << config.epochs << " lr " << learning_rate_at(config, epoch)
           << " val psnr " << val.report.psnr_mean << " ssim " << val.report.ssim_mean << " score "
           << val.score;
        say(os.str());

        const bool improved = val.score > best;
        if (improved) best = val.score;
        last.parameters = snapshot_parameters(*net);
        last.config = options.config_snapshot;
        last.epoch = epoch + 1;
        last.best_score = best;
        std::ostringstream rs;
        rs << rng;
        last.rng_state = rs.str();
        last.optimizer = trainer.optimizer().state();
        if (improved) save_checkpoint(last, out_dir / "best.ckpt");
        save_checkpoint(last, out_dir / "last.ckpt");
    }
    return last;
}

Checkpoint train(const std::vector<ManifestRecord>& train_set,
                 const std::vector<ManifestRecord>& val_set, const TrainConfig& config,
                 const fs::path& out_dir, const TrainOptions& options) {
    config.validate();
    return train_on_clips(load_clips(train_set), load_clips(val_set), config, out_dir, options);
}

}  // namespace rmfat
