#pragma once

// Simulated-interaction fine-tuning: per-batch 9-iteration loop, loss
// assembly, Adam with group-restricted steps and the step-decay schedule.

#include "sammed/dataset.hpp"
#include "sammed/model.hpp"
#include "sammed/prompt_sim.hpp"

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace sammed::train {

using ag::Tensor;
using ag::Var;
using model::ModelState;
using model::ParamGroup;

class TrainError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    double lr = 1e-4;
    int epochs = 12;
    std::set<int> lr_drop_epochs{7, 10};
    double lr_drop_factor = 0.5;
    double focal_weight = 20.0;
    double dice_weight = 1.0;
    double iou_loss_weight = 1.0;
    int masks_per_image = 5;
    int iterations_per_batch = 9;
    double focal_gamma = 2.0;
    double focal_alpha = 0.25;
    std::uint64_t seed = 0;
    int images_per_batch = 1;
    int max_box_offset = 5;

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

struct LossReport {
    double focal = 0;
    double dice = 0;
    double iou_mse = 0;
    double total = 0;
    int selected_mask_index = 0;
};

// Mean over pixels; logits and gt share H x W (logits may carry a leading 1).
Var focal_loss(const Var& logits, const BinaryMask& gt, double gamma, double alpha);
Var dice_loss(const Var& logits, const BinaryMask& gt);

double mask_iou(const BinaryMask& a, const BinaryMask& b);
// True IoU of each binarized candidate (logit > 0) against gt.
std::array<double, model::kNumMaskCandidates> candidate_ious(const Tensor& mask_logits, const BinaryMask& gt);
// Mean over candidates of (iou_pred - actual)^2.
Var iou_loss(const Var& iou_pred, const std::array<double, model::kNumMaskCandidates>& actual);
Var iou_loss(const Var& iou_pred, const Tensor& mask_logits, const BinaryMask& gt);

// Argmax of true IoU; ties go to the lowest index.
int select_best_mask(const Tensor& mask_logits, const BinaryMask& gt);

// Constants the loss treats as data: the selected candidate and the IoU
// regression targets, both read off the forward values.
struct LossTargets {
    int selected = 0;
    std::array<double, model::kNumMaskCandidates> ious{};
};

LossTargets loss_targets(const Tensor& mask_logits, const BinaryMask& gt);

struct LossTerms {
    Var focal, dice, iou_mse, total;
    int selected = 0;
    LossReport report() const;
};

LossTerms compute_loss(const model::DecoderVars& out, const BinaryMask& gt, const LossTargets& targets,
                       const TrainConfig& config);

double lr_at(int epoch, const TrainConfig& config);

// Adam (beta1 0.9, beta2 0.999, eps 1e-8), no weight decay. Moments are kept
// per parameter name and advance only when that parameter is stepped.
class Adam {
  public:
    // Updates trainable parameters of the listed groups from their current
    // gradients, then clears every gradient in the state.
    void step(ModelState& state, std::span<const ParamGroup> groups, double lr);

    nlohmann::json to_json() const;
    static Adam from_json(const nlohmann::json& j);

  private:
    struct Moments {
        Tensor m, v;
        long t = 0;
    };
    std::map<std::string, Moments> moments_;
};

// One simulated-interaction iteration's forward for a fixed embedding.
model::DecoderVars forward_prompts(const model::ImageEmbedding& embedding, const prompt::PromptSet& prompts,
                                   const ModelState& state);

// The groups stepped after iteration `it` (1-based).
std::vector<ParamGroup> groups_for_iteration(int iteration);

struct StepEvent {
    int iteration = 0;
    std::vector<ParamGroup> updated;
};

// Called before and after each optimizer step (after = true on the second call).
using StepObserver = std::function<void(const StepEvent& event, const ModelState& state, bool after)>;

struct StepResult {
    // reports[m][it]: one LossReport per (image, mask) sample per iteration.
    std::vector<std::vector<LossReport>> reports;
    std::array<double, 16> mean_total{}; // per iteration, first iterations_per_batch entries used
};

// Expands each image to masks_per_image masks (random duplicates when short)
// and runs the interaction loop with one optimizer step per iteration.
StepResult train_step(std::span<const dataset::Sample> batch, ModelState& state, Adam& optimizer,
                      const TrainConfig& config, double lr, prompt::Rng& rng, const StepObserver& observer = {});

struct TrainOptions {
    std::filesystem::path out_dir;
    std::filesystem::path resume; // checkpoint to start from (optional)
    int max_steps = 0;            // stop early after this many train_steps (0 = no cap)
    bool write_checkpoints = true;
    bool verbose = false;
};

struct TrainSummary {
    int steps = 0;
    std::vector<double> step_losses; // mean total loss over iterations, per step
};

// epochs x batches of train_step over the manifest's train split; appends one
// JSON line per step to metrics.jsonl and writes a checkpoint per epoch.
TrainSummary run_training(const data::DatasetManifest& manifest, ModelState& state, const TrainConfig& config,
                          const TrainOptions& options);
TrainSummary run_training(std::span<const dataset::Sample> train_set, ModelState& state, const TrainConfig& config,
                          const TrainOptions& options);

} // namespace sammed::train
