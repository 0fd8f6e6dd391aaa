#pragma once
// Training loop: Adam with step decay, loss assembly over the recurrence, per-epoch
// validation and checkpointing.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "rmfat/checkpoint.hpp"
#include "rmfat/detection.hpp"
#include "rmfat/losses.hpp"
#include "rmfat/metrics.hpp"
#include "rmfat/network.hpp"
#include "rmfat/turbulence_synth.hpp"

namespace rmfat {

struct TrainConfig {
    int64_t epochs = 100;
    int64_t batch_size = 1;
    int64_t patch_size = 256;
    double lr_initial = 1e-4;
    int64_t lr_step_epochs = 5;
    double lr_gamma = 0.5;
    uint64_t seed = 0;
    int64_t clip_length = 12;
    /// Recurrent steps per truncated backward pass.
    int64_t bptt_window = 1;
    double grad_clip = 1.0;  ///< global norm; 0 disables
    bool recurrent = true;
    /// Registry name, or "none".
    std::string detector = "luminance_blob";
    LossConfig loss;
    ModelConfig model = ModelConfig::reference();

    void validate() const;
};

/// lr_initial * lr_gamma^floor(epoch / lr_step_epochs)
double learning_rate_at(const TrainConfig& config, int64_t epoch);

/// psnr_mean / 50 + ssim_mean
double combined_score(double psnr_mean, double ssim_mean);

/// Adam (beta 0.9 / 0.999, eps 1e-8) over a fixed, named parameter list.
class Adam {
public:
    explicit Adam(NamedTensors parameters, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8);

    void zero_grad();
    void step(double lr);

    OptimizerState state() const;
    void load_state(const OptimizerState& state);
    int64_t steps() const { return step_; }

private:
    NamedTensors params_;
    std::vector<torch::Tensor> m_, v_;
    double beta1_, beta2_, eps_;
    int64_t step_ = 0;
};

struct TrainingClip {
    std::string id;
    VideoSequence degraded;
    VideoSequence clean;
};

/// One line of the training log.
struct StepRecord {
    int64_t epoch = 0;
    int64_t step = 0;
    double lr = 0;
    double loss_total = 0;
    double loss_charb = 0;
    double loss_dwt = 0;
    double loss_flow = 0;
    double loss_det = 0;

    nlohmann::json to_json() const;
};

/// Owns the optimizer and detector for one network. train_clip accumulates gradients;
/// optimizer_step applies them.
class Trainer {
public:
    Trainer(TrainConfig config, RmfatNet net);

    const TrainConfig& config() const { return config_; }
    RmfatNet network() const { return net_; }
    Adam& optimizer() { return optimizer_; }

    /// Runs the recurrence over a (pre-cropped) clip and backpropagates the clip loss,
    /// scaled by 1 / batch_size. Returns the per-term values (clip means).
    StepRecord accumulate_clip(const TrainingClip& clip, int64_t epoch);
    /// Clips the gradient norm and steps Adam at the epoch's learning rate.
    void optimizer_step(int64_t epoch);
    /// accumulate_clip followed by optimizer_step.
    StepRecord train_clip(const TrainingClip& clip, int64_t epoch);

    /// Loss of a clip without touching gradients or parameters.
    StepRecord evaluate_loss(const TrainingClip& clip, int64_t epoch);

private:
    StepRecord run_clip(const TrainingClip& clip, int64_t epoch, bool backward);

    TrainConfig config_;
    RmfatNet net_;
    Adam optimizer_;
    std::unique_ptr<Detector> detector_;
};

struct ValidationResult {
    EvalReport report;
    double score = 0;
};

/// Full-frame inference over every clip, scored against the clean frames.
ValidationResult validate(RmfatNet net, const std::vector<TrainingClip>& clips, bool recurrent);

struct TrainOptions {
    std::optional<std::filesystem::path> resume;
    /// Effective configuration, stored in checkpoints.
    KeyValues config_snapshot;
    /// Progress messages; null for silence.
    std::ostream* progress = nullptr;
    /// Invoked after every optimizer step.
    std::function<void(const StepRecord&)> on_step;
};

/// Writes <out_dir>/train_log.jsonl, <out_dir>/last.ckpt after every epoch and
/// <out_dir>/best.ckpt whenever the validation score improves. Returns the final state.
Checkpoint train_on_clips(const std::vector<TrainingClip>& train_clips,
                          const std::vector<TrainingClip>& val_clips, const TrainConfig& config,
                          const std::filesystem::path& out_dir, const TrainOptions& options = {});

/// Loads the manifests' sequences and calls train_on_clips.
Checkpoint train(const std::vector<ManifestRecord>& train_set,
                 const std::vector<ManifestRecord>& val_set, const TrainConfig& config,
                 const std::filesystem::path& out_dir, const TrainOptions& options = {});

std::vector<TrainingClip> load_clips(const std::vector<ManifestRecord>& records);

/// Crops a shared patch and a clip_length window (random start) from a clip.
TrainingClip sample_training_clip(const TrainingClip& clip, int64_t patch_size,
                                  int64_t clip_length, uint64_t seed);

}  // namespace rmfat
