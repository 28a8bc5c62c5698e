#include "sammed/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>

namespace sammed::train {

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

double log_sigmoid(double y) { return y >= 0 ? -std::log1p(std::exp(-y)) : y - std::log1p(std::exp(y)); }
double sigmoid(double y) { return y >= 0 ? 1.0 / (1.0 + std::exp(-y)) : std::exp(y) / (1.0 + std::exp(y)); }

void check_pixels(const Var& logits, const BinaryMask& gt, const char* what) {
    if (logits.value().size() != gt.bits.size())
        throw TrainError(std::string(what) + ": logits " + ag::shape_str(logits.shape()) + " do not match mask " +
                         std::to_string(gt.height) + "x" + std::to_string(gt.width));
}

Tensor mask_tensor(const BinaryMask& m, ag::Shape shape) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < m.bits.size(); ++i) t.data[i] = m.bits[i] ? 1.0 : 0.0;
    return t;
}

BinaryMask binarize(const Tensor& logits, int candidate, int h, int w) {
    BinaryMask m(h, w);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (std::size_t i = 0; i < plane; ++i) m.bits[i] = logits.data[candidate * plane + i] > 0.0;
    return m;
}

Var select_candidate(const Var& stack, int index) {
    const auto& s = stack.shape();
    const int plane = s[1] * s[2];
    return ag::slice_rows(ag::reshape(stack, {s[0], plane}), index, 1);
}

} // namespace

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
    if (!(lr > 0)) throw TrainError("lr must be positive");
    if (epochs < 1) throw TrainError("epochs must be >= 1");
    if (!(lr_drop_factor > 0)) throw TrainError("lr_drop_factor must be positive");
    if (!(focal_weight > 0) || !(dice_weight > 0) || !(iou_loss_weight > 0))
        throw TrainError("loss weights must be positive");
    if (masks_per_image < 1) throw TrainError("masks_per_image must be >= 1");
    if (iterations_per_batch < 3 || iterations_per_batch > 16) throw TrainError("iterations_per_batch must be in [3, 16]");
    if (!(focal_alpha > 0 && focal_alpha < 1)) throw TrainError("focal_alpha must lie in (0, 1)");
    if (focal_gamma < 0) throw TrainError("focal_gamma must be >= 0");
    if (images_per_batch < 1) throw TrainError("images_per_batch must be >= 1");
    if (max_box_offset < 0) throw TrainError("max_box_offset must be >= 0");
}

nlohmann::json TrainConfig::to_json() const {
    return {{"lr", lr},
            {"epochs", epochs},
            {"lr_drop_epochs", lr_drop_epochs},
            {"lr_drop_factor", lr_drop_factor},
            {"focal_weight", focal_weight},
            {"dice_weight", dice_weight},
            {"iou_loss_weight", iou_loss_weight},
            {"masks_per_image", masks_per_image},
            {"iterations_per_batch", iterations_per_batch},
            {"focal_gamma", focal_gamma},
            {"focal_alpha", focal_alpha},
            {"seed", seed},
            {"images_per_batch", images_per_batch},
            {"max_box_offset", max_box_offset}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    static const std::set<std::string> known{"lr",           "epochs",          "lr_drop_epochs",       "lr_drop_factor",
                                             "focal_weight",  "dice_weight",     "iou_loss_weight",      "masks_per_image",
                                             "focal_gamma",   "focal_alpha",     "iterations_per_batch", "seed",
                                             "images_per_batch", "max_box_offset", "model"};
    for (const auto& [key, _] : j.items())
        if (!known.count(key)) throw TrainError("unknown training config field '" + key + "'");
    TrainConfig c;
    try {
        c.lr = j.value("lr", c.lr);
        c.epochs = j.value("epochs", c.epochs);
        if (j.contains("lr_drop_epochs")) c.lr_drop_epochs = j.at("lr_drop_epochs").get<std::set<int>>();
        c.lr_drop_factor = j.value("lr_drop_factor", c.lr_drop_factor);
        c.focal_weight = j.value("focal_weight", c.focal_weight);
        c.dice_weight = j.value("dice_weight", c.dice_weight);
        c.iou_loss_weight = j.value("iou_loss_weight", c.iou_loss_weight);
        c.masks_per_image = j.value("masks_per_image", c.masks_per_image);
        c.iterations_per_batch = j.value("iterations_per_batch", c.iterations_per_batch);
        c.focal_gamma = j.value("focal_gamma", c.focal_gamma);
        c.focal_alpha = j.value("focal_alpha", c.focal_alpha);
        c.seed = j.value("seed", c.seed);
        c.images_per_batch = j.value("images_per_batch", c.images_per_batch);
        c.max_box_offset = j.value("max_box_offset", c.max_box_offset);
    } catch (const nlohmann::json::exception& e) {
        throw TrainError(std::string("malformed training config: ") + e.what());
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Losses

Var focal_loss(const Var& logits, const BinaryMask& gt, double gamma, double alpha) {
    check_pixels(logits, gt, "focal_loss");
    for (double v : logits.value().data)
        if (!std::isfinite(v)) throw TrainError("focal_loss: non-finite logit");
    Var terms = ag::pointwise(logits, [&](double x, std::size_t i) {
        const bool pos = gt.bits[i] != 0;
        const double s = pos ? 1.0 : -1.0;
        const double a = pos ? alpha : 1.0 - alpha;
        const double y = s * x;
        const double q = sigmoid(y), one_minus_q = sigmoid(-y);
        const double lq = log_sigmoid(y);
        const double mod = std::pow(one_minus_q, gamma);
        const double value = -a * mod * lq;
        const double dy = -a * mod * (one_minus_q - gamma * q * lq);
        return std::pair{value, s * dy};
    });
    return ag::mean(terms);
}

Var dice_loss(const Var& logits, const BinaryMask& gt) {
    check_pixels(logits, gt, "dice_loss");
    Var p = ag::sigmoid(logits);
    Var g = Var::constant(mask_tensor(gt, logits.shape()));
    const double g_sum = static_cast<double>(gt.area());
    Var num = ag::add_scalar(ag::scale(ag::sum(ag::mul(p, g)), 2.0), 1.0);
    Var den = ag::add_scalar(ag::sum(p), g_sum + 1.0);
    Var inv = ag::pointwise(den, [](double d, std::size_t) { return std::pair{1.0 / d, -1.0 / (d * d)}; });
    return ag::add_scalar(ag::scale(ag::mul(num, inv), -1.0), 1.0);
}

double mask_iou(const BinaryMask& a, const BinaryMask& b) {
    if (!a.same_shape(b)) throw TrainError("mask_iou: shape mismatch");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.bits.size(); ++i) {
        inter += (a.bits[i] && b.bits[i]);
        uni += (a.bits[i] || b.bits[i]);
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::array<double, model::kNumMaskCandidates> candidate_ious(const Tensor& mask_logits, const BinaryMask& gt) {
    if (mask_logits.rank() != 3 || mask_logits.dim(0) != model::kNumMaskCandidates || mask_logits.dim(1) != gt.height ||
        mask_logits.dim(2) != gt.width)
        throw TrainError("candidate_ious: logits " + ag::shape_str(mask_logits.shape) + " do not match mask");
    std::array<double, model::kNumMaskCandidates> out{};
    for (int c = 0; c < model::kNumMaskCandidates; ++c) out[c] = mask_iou(binarize(mask_logits, c, gt.height, gt.width), gt);
    return out;
}

Var iou_loss(const Var& iou_pred, const std::array<double, model::kNumMaskCandidates>& actual) {
    if (iou_pred.value().size() != actual.size()) throw TrainError("iou_loss: expected 3 predictions");
    Var diff = ag::sub(iou_pred, Var::constant(Tensor(iou_pred.shape(), std::vector<double>(actual.begin(), actual.end()))));
    return ag::mean(ag::mul(diff, diff));
}

Var iou_loss(const Var& iou_pred, const Tensor& mask_logits, const BinaryMask& gt) {
    return iou_loss(iou_pred, candidate_ious(mask_logits, gt));
}

int select_best_mask(const Tensor& mask_logits, const BinaryMask& gt) {
    const auto ious = candidate_ious(mask_logits, gt);
    return static_cast<int>(std::max_element(ious.begin(), ious.end()) - ious.begin());
}

LossTargets loss_targets(const Tensor& mask_logits, const BinaryMask& gt) {
    LossTargets t;
    t.ious = candidate_ious(mask_logits, gt);
    t.selected = static_cast<int>(std::max_element(t.ious.begin(), t.ious.end()) - t.ious.begin());
    return t;
}

LossReport LossTerms::report() const {
    return {focal.value()[0], dice.value()[0], iou_mse.value()[0], total.value()[0], selected};
}

LossTerms compute_loss(const model::DecoderVars& out, const BinaryMask& gt, const LossTargets& targets,
                       const TrainConfig& config) {
    LossTerms t;
    t.selected = targets.selected;
    Var chosen = select_candidate(out.mask_logits, targets.selected);
    t.focal = focal_loss(chosen, gt, config.focal_gamma, config.focal_alpha);
    t.dice = dice_loss(chosen, gt);
    t.iou_mse = iou_loss(out.iou_pred, targets.ious);
    t.total = ag::add(ag::add(ag::scale(t.focal, config.focal_weight), ag::scale(t.dice, config.dice_weight)),
                      ag::scale(t.iou_mse, config.iou_loss_weight));
    return t;
}

double lr_at(int epoch, const TrainConfig& config) {
    if (epoch < 1 || epoch > config.epochs)
        throw TrainError("lr_at: epoch " + std::to_string(epoch) + " outside [1, " + std::to_string(config.epochs) + "]");
    const auto drops = std::count_if(config.lr_drop_epochs.begin(), config.lr_drop_epochs.end(),
                                     [&](int e) { return e <= epoch; });
    return config.lr * std::pow(config.lr_drop_factor, static_cast<double>(drops));
}

// ---------------------------------------------------------------------------
// Optimizer

void Adam::step(ModelState& state, std::span<const ParamGroup> groups, double lr) {
    for (auto& p : state.params()) {
        const bool scheduled = std::find(groups.begin(), groups.end(), p.group) != groups.end();
        const Tensor& g = p.var.grad();
        if (scheduled && p.trainable && !g.empty()) {
            auto& mo = moments_[p.name];
            if (mo.m.empty()) {
                mo.m = Tensor(g.shape);
                mo.v = Tensor(g.shape);
            }
            ++mo.t;
            const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(mo.t));
            const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(mo.t));
            Tensor& w = p.var.mutable_value();
            for (std::size_t i = 0; i < w.size(); ++i) {
                mo.m.data[i] = kBeta1 * mo.m.data[i] + (1.0 - kBeta1) * g.data[i];
                mo.v.data[i] = kBeta2 * mo.v.data[i] + (1.0 - kBeta2) * g.data[i] * g.data[i];
                w.data[i] -= lr * (mo.m.data[i] / c1) / (std::sqrt(mo.v.data[i] / c2) + kAdamEps);
            }
        }
        p.var.zero_grad();
    }
}

nlohmann::json Adam::to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [name, mo] : moments_)
        j[name] = {{"t", mo.t}, {"shape", mo.m.shape}, {"m", mo.m.data}, {"v", mo.v.data}};
    return j;
}

Adam Adam::from_json(const nlohmann::json& j) {
    Adam a;
    for (const auto& [name, v] : j.items()) {
        Moments mo;
        mo.t = v.at("t");
        const auto shape = v.at("shape").get<ag::Shape>();
        mo.m = Tensor(shape, v.at("m").get<std::vector<double>>());
        mo.v = Tensor(shape, v.at("v").get<std::vector<double>>());
        a.moments_[name] = std::move(mo);
    }
    return a;
}

// ---------------------------------------------------------------------------
// Interaction loop

model::DecoderVars forward_prompts(const model::ImageEmbedding& embedding, const prompt::PromptSet& prompts,
                                   const ModelState& state) {
    Var sparse = model::encode_sparse(prompts, state);
    Var dense = model::encode_dense(prompts.dense ? &prompts.dense->logits : nullptr, state);
    return model::decode_masks(embedding, sparse, dense, state);
}

std::vector<ParamGroup> groups_for_iteration(int iteration) {
    if (iteration == 1) return {ParamGroup::adapters, ParamGroup::prompt_encoder, ParamGroup::mask_decoder};
    return {ParamGroup::mask_decoder};
}

namespace {

struct Track {
    std::size_t image = 0;
    const BinaryMask* gt = nullptr;
    std::vector<prompt::PointPrompt> points;
    std::optional<prompt::BoxPrompt> box;
    BinaryMask prev_pred;
    Tensor prev_low_res;
};

} // namespace

StepResult train_step(std::span<const dataset::Sample> batch, ModelState& state, Adam& optimizer,
                      const TrainConfig& config, double lr, prompt::Rng& rng, const StepObserver& observer) {
    const int size = state.config.encoder.input_size;
    std::vector<Track> tracks;
    std::vector<std::size_t> images_used;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto& s = batch[b];
        if (s.image.height != size || s.image.width != size)
            throw TrainError("image " + s.image_id + " is " + std::to_string(s.image.height) + "x" +
                             std::to_string(s.image.width) + ", model expects " + std::to_string(size));
        std::vector<const BinaryMask*> usable;
        for (const auto& m : s.masks) {
            if (m.mask.height != size || m.mask.width != size)
                throw TrainError("mask " + m.mask_id + " does not match the model input size");
            if (m.mask.empty()) {
                std::cerr << "warning: skipping empty mask " << m.mask_id << '\n';
                continue;
            }
            usable.push_back(&m.mask);
        }
        if (usable.empty()) continue;
        std::vector<const BinaryMask*> chosen;
        std::shuffle(usable.begin(), usable.end(), rng);
        for (int k = 0; k < config.masks_per_image && k < static_cast<int>(usable.size()); ++k) chosen.push_back(usable[k]);
        std::uniform_int_distribution<std::size_t> dup(0, usable.size() - 1);
        while (static_cast<int>(chosen.size()) < config.masks_per_image) chosen.push_back(usable[dup(rng)]);
        for (const auto* gt : chosen) {
            Track t;
            t.image = images_used.size();
            t.gt = gt;
            tracks.push_back(std::move(t));
        }
        images_used.push_back(b);
    }
    if (tracks.empty()) throw TrainError("train_step: batch has no usable masks");

    StepResult result;
    result.reports.assign(tracks.size(), {});
    const auto schedule = prompt::make_schedule(rng, config.iterations_per_batch);
    const double inv_n = 1.0 / static_cast<double>(tracks.size());

    std::vector<model::ImageEmbedding> embeddings;
    for (std::size_t idx : images_used) embeddings.push_back(model::encode_image(batch[idx].image, state));

    for (int it = 1; it <= config.iterations_per_batch; ++it) {
        std::vector<Var> totals;
        for (std::size_t k = 0; k < tracks.size(); ++k) {
            Track& t = tracks[k];
            const BinaryMask& gt = *t.gt;
            prompt::PromptSet prompts;
            if (it == 1) {
                auto init = prompt::sample_initial_prompt(gt, rng, config.max_box_offset);
                if (auto* p = std::get_if<prompt::PointPrompt>(&init)) t.points.push_back(*p);
                else t.box = std::get<prompt::BoxPrompt>(init);
                prompts.points = t.points;
                prompts.box = t.box;
            } else {
                prompts.dense = prompt::DensePrompt{t.prev_low_res};
                if (!schedule.is_dense_only(it)) {
                    auto extra = prompt::sample_correction_points(t.prev_pred, gt, schedule.points_at(it), rng);
                    if (!extra.empty()) {
                        t.points.insert(t.points.end(), extra.begin(), extra.end());
                        prompts.points = t.points;
                        prompts.box = t.box;
                    }
                }
            }
            auto out = forward_prompts(embeddings[t.image], prompts, state);
            const auto targets = loss_targets(out.mask_logits.value(), gt);
            auto terms = compute_loss(out, gt, targets, config);
            result.reports[k].push_back(terms.report());
            totals.push_back(terms.total);

            t.prev_pred = binarize(out.mask_logits.value(), targets.selected, gt.height, gt.width);
            const auto& lr_stack = out.low_res.value();
            const int lh = lr_stack.dim(1), lw = lr_stack.dim(2);
            t.prev_low_res = Tensor({lh, lw});
            std::copy_n(lr_stack.data.begin() + static_cast<std::ptrdiff_t>(targets.selected) * lh * lw,
                        static_cast<std::size_t>(lh) * lw, t.prev_low_res.data.begin());
        }
        Var loss = totals[0];
        for (std::size_t k = 1; k < totals.size(); ++k) loss = ag::add(loss, totals[k]);
        loss = ag::scale(loss, inv_n);
        result.mean_total[static_cast<std::size_t>(it - 1)] = loss.value()[0];

        ag::backward(loss);
        const StepEvent event{it, groups_for_iteration(it)};
        if (observer) observer(event, state, false);
        optimizer.step(state, event.updated, lr);
        if (observer) observer(event, state, true);

        if (it == 1) {
            // Adapters moved; later iterations see the updated encoder as data.
            ag::NoGradGuard no_grad;
            for (std::size_t e = 0; e < images_used.size(); ++e)
                embeddings[e] = model::encode_image(batch[images_used[e]].image, state);
        }
    }
    return result;
}

// ---------------------------------------------------------------------------

namespace {

std::filesystem::path optimizer_path(const std::filesystem::path& ckpt) {
    auto p = ckpt;
    p.replace_extension(".optim.json");
    return p;
}

} // namespace

TrainSummary run_training(const data::DatasetManifest& manifest, ModelState& state, const TrainConfig& config,
                          const TrainOptions& options) {
    const auto train_set = dataset::load_samples(manifest, data::Split::train);
    return run_training(train_set, state, config, options);
}

TrainSummary run_training(std::span<const dataset::Sample> train_set, ModelState& state, const TrainConfig& config,
                          const TrainOptions& options) {
    config.validate();
    if (train_set.empty()) throw TrainError("training split is empty");

    Adam optimizer;
    int first_epoch = 1;
    if (!options.resume.empty()) {
        state = model::load_checkpoint(options.resume);
        const auto opt_path = optimizer_path(options.resume);
        if (std::filesystem::exists(opt_path)) {
            std::ifstream in(opt_path);
            const auto j = nlohmann::json::parse(in);
            optimizer = Adam::from_json(j.at("adam"));
            first_epoch = j.at("epoch").get<int>() + 1;
        }
    }

    std::ofstream metrics;
    if (!options.out_dir.empty()) {
        std::filesystem::create_directories(options.out_dir);
        metrics.open(options.out_dir / "metrics.jsonl", first_epoch == 1 ? std::ios::trunc : std::ios::app);
    }

    TrainSummary summary;
    std::vector<std::size_t> order(train_set.size());
    for (int epoch = first_epoch; epoch <= config.epochs; ++epoch) {
        prompt::Rng rng(config.seed * 1000003ULL + static_cast<std::uint64_t>(epoch));
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        const double lr = lr_at(epoch, config);
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.images_per_batch)) {
            std::vector<dataset::Sample> batch;
            for (std::size_t i = start; i < std::min(order.size(), start + config.images_per_batch); ++i)
                batch.push_back(train_set[order[i]]);
            auto res = train_step(batch, state, optimizer, config, lr, rng);
            ++summary.steps;
            double mean = 0;
            std::vector<double> its(res.mean_total.begin(), res.mean_total.begin() + config.iterations_per_batch);
            for (double v : its) mean += v;
            mean /= static_cast<double>(its.size());
            summary.step_losses.push_back(mean);
            if (metrics.is_open())
                metrics << nlohmann::json{{"epoch", epoch}, {"step", summary.steps}, {"iteration_losses", its}, {"lr", lr}}.dump()
                        << '\n';
            if (options.verbose && summary.steps % 50 == 0)
                std::cerr << "epoch " << epoch << " step " << summary.steps << " loss " << mean << '\n';
            if (options.max_steps > 0 && summary.steps >= options.max_steps) return summary;
        }
        if (options.write_checkpoints && !options.out_dir.empty()) {
            const auto ckpt = options.out_dir / ("epoch_" + std::to_string(epoch) + ".ckpt");
            model::save_checkpoint(state, ckpt);
            std::ofstream opt(optimizer_path(ckpt));
            opt << nlohmann::json{{"epoch", epoch}, {"adam", optimizer.to_json()}}.dump() << '\n';
        }
    }
    return summary;
}

} // namespace sammed::train
