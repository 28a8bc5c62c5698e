#include "doctest.h"

#include "sammed/training.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace sammed;
using namespace sammed::train;
using model::ParamGroup;

namespace {

Var logits_of(const std::vector<double>& v, int h, int w) {
    Tensor t({h, w});
    t.data = v;
    return Var::constant(t);
}

BinaryMask mask_of(const std::vector<std::uint8_t>& bits, int h, int w) {
    BinaryMask m(h, w);
    m.bits = bits;
    return m;
}

Tensor candidates(const std::array<BinaryMask, 3>& masks) {
    const int h = masks[0].height, w = masks[0].width;
    Tensor t({3, h, w});
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < h * w; ++i) t.data[c * h * w + i] = masks[c].bits[i] ? 5.0 : -5.0;
    return t;
}

std::map<std::string, Tensor> snapshot(const ModelState& s) {
    std::map<std::string, Tensor> out;
    for (const auto& p : s.params()) out[p.name] = p.var.value();
    return out;
}

std::set<ParamGroup> changed_groups(const ModelState& s, const std::map<std::string, Tensor>& before) {
    std::set<ParamGroup> out;
    for (const auto& p : s.params())
        if (p.var.value().data != before.at(p.name).data) out.insert(p.group);
    return out;
}

} // namespace

TEST_CASE("focal loss values") {
    const auto gt1 = mask_of({1}, 1, 1);
    CHECK(focal_loss(logits_of({0.0}, 1, 1), gt1, 2.0, 0.25).value()[0] ==
          doctest::Approx(0.25 * 0.25 * std::log(2.0)).epsilon(1e-12));

    const auto gt = mask_of({1, 0, 1, 0}, 2, 2);
    CHECK(focal_loss(logits_of({20, -20, 20, -20}, 2, 2), gt, 2.0, 0.25).value()[0] < 1e-6);

    // gamma 0, alpha 0.5 is half the binary cross-entropy
    const std::vector<double> z{0.3, -1.2, 2.5, 0.7};
    double bce = 0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double p = 1.0 / (1.0 + std::exp(-z[i]));
        bce += gt.bits[i] ? -std::log(p) : -std::log(1 - p);
    }
    bce /= 4;
    CHECK(focal_loss(logits_of(z, 2, 2), gt, 0.0, 0.5).value()[0] == doctest::Approx(0.5 * bce).epsilon(1e-12));

    // huge logits stay finite
    CHECK(std::isfinite(focal_loss(logits_of({-800, 800, -800, 800}, 2, 2), gt, 2.0, 0.25).value()[0]));
    CHECK_THROWS_AS(focal_loss(logits_of({NAN, 0, 0, 0}, 2, 2), gt, 2.0, 0.25), TrainError);
    CHECK_THROWS_AS(focal_loss(logits_of({0, 0}, 1, 2), gt, 2.0, 0.25), TrainError);
}

TEST_CASE("dice loss degenerate cases") {
    const auto gt = mask_of({1, 1, 0, 1, 0, 0}, 2, 3);
    CHECK(dice_loss(logits_of({30, 30, -30, 30, -30, -30}, 2, 3), gt).value()[0] < 1e-6);
    const double a = 3;
    CHECK(dice_loss(logits_of(std::vector<double>(6, -40), 2, 3), gt).value()[0] ==
          doctest::Approx(1 - 1 / (a + 1)).epsilon(1e-9));
    CHECK(dice_loss(logits_of(std::vector<double>(6, -40), 2, 3), BinaryMask(2, 3)).value()[0] < 1e-9);
}

TEST_CASE("IoU loss and selection") {
    BinaryMask gt(4, 4);
    for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 4; ++x) gt.at(y, x) = 1;
    const BinaryMask empty(4, 4);
    const Tensor none = candidates({empty, empty, empty});
    CHECK(iou_loss(Var::constant(Tensor({3}, 1.0)), none, gt).value()[0] == doctest::Approx(1.0).epsilon(1e-15));

    BinaryMask quarter(4, 4), half = gt, most = gt;
    quarter.at(0, 0) = quarter.at(0, 1) = 1; // IoU 0.25
    most.at(2, 0) = 1;                       // IoU 8/9
    const Tensor c = candidates({quarter, most, half});
    const auto ious = candidate_ious(c, gt);
    CHECK(ious[0] == doctest::Approx(0.25));
    CHECK(ious[1] == doctest::Approx(8.0 / 9.0));
    CHECK(ious[2] == 1.0);
    CHECK(select_best_mask(c, gt) == 2);
    Tensor exact({3});
    exact.data = {ious[0], ious[1], ious[2]};
    CHECK(iou_loss(Var::constant(exact), c, gt).value()[0] == 0.0);

    // joint permutation leaves the loss unchanged
    Tensor pred({3});
    pred.data = {0.1, 0.6, 0.3};
    Tensor pred_perm({3});
    pred_perm.data = {0.3, 0.1, 0.6};
    const Tensor c_perm = candidates({half, quarter, most});
    CHECK(iou_loss(Var::constant(pred), c, gt).value()[0] ==
          doctest::Approx(iou_loss(Var::constant(pred_perm), c_perm, gt).value()[0]).epsilon(1e-15));

    CHECK(select_best_mask(candidates({half, half, half}), gt) == 0);
    CHECK(select_best_mask(candidates({quarter, most, quarter}), gt) == 1);
}

TEST_CASE("loss total is the weighted sum") {
    auto state = model::init_model(model::ModelConfig::toy());
    auto sample = dataset::make_synthetic_sample(3);
    const auto& gt = sample.masks[0].mask;
    auto emb = model::encode_image(sample.image, state);
    prompt::PromptSet p;
    p.box = prompt::tight_bbox(gt);
    auto out = forward_prompts(emb, p, state);
    TrainConfig cfg;
    auto terms = compute_loss(out, gt, loss_targets(out.mask_logits.value(), gt), cfg);
    auto r = terms.report();
    CHECK(std::abs(r.total - (20 * r.focal + r.dice + r.iou_mse)) < 1e-12);
    cfg.iou_loss_weight = 3;
    r = compute_loss(out, gt, loss_targets(out.mask_logits.value(), gt), cfg).report();
    CHECK(std::abs(r.total - (20 * r.focal + r.dice + 3 * r.iou_mse)) < 1e-12);
}

TEST_CASE("mask loss gives no gradient to non-selected candidates") {
    auto state = model::init_model(model::ModelConfig::toy());
    auto sample = dataset::make_synthetic_sample(4);
    const auto& gt = sample.masks[0].mask;
    auto emb = model::encode_image(sample.image, state);
    prompt::PromptSet p;
    p.box = prompt::tight_bbox(gt);
    auto out = forward_prompts(emb, p, state);
    TrainConfig cfg;
    auto targets = loss_targets(out.mask_logits.value(), gt);
    auto terms = compute_loss(out, gt, targets, cfg);
    ag::backward(ag::add(ag::scale(terms.focal, 20.0), terms.dice));
    for (int i = 0; i < 3; ++i) {
        const auto& g = state.get("dec.hyper" + std::to_string(i) + ".fc3.w").grad();
        double norm = 0;
        for (double v : g.data) norm += std::abs(v);
        if (i == targets.selected)
            CHECK(norm > 0);
        else
            CHECK(norm == 0.0);
    }
}

TEST_CASE("lr schedule") {
    TrainConfig cfg;
    CHECK(lr_at(1, cfg) == 1e-4);
    CHECK(lr_at(6, cfg) == 1e-4);
    CHECK(lr_at(7, cfg) == 5e-5);
    CHECK(lr_at(9, cfg) == 5e-5);
    CHECK(lr_at(10, cfg) == 2.5e-5);
    CHECK(lr_at(12, cfg) == 2.5e-5);
    CHECK_THROWS_AS(lr_at(0, cfg), TrainError);
    CHECK_THROWS_AS(lr_at(13, cfg), TrainError);
}

TEST_CASE("config JSON") {
    TrainConfig cfg;
    cfg.lr = 3e-3;
    cfg.lr_drop_epochs = {2};
    auto back = TrainConfig::from_json(cfg.to_json());
    CHECK(back.lr == 3e-3);
    CHECK(back.lr_drop_epochs == std::set<int>{2});
    CHECK_THROWS_AS(TrainConfig::from_json(nlohmann::json{{"learning_rate", 1}}), TrainError);
    CHECK_THROWS_AS(TrainConfig::from_json(nlohmann::json{{"epochs", 0}}), TrainError);
    CHECK_NOTHROW(TrainConfig::from_json(nlohmann::json{{"model", nlohmann::json::object()}}));
}

TEST_CASE("Adam steps only the listed groups and clears gradients") {
    auto state = model::init_model(model::ModelConfig::toy());
    for (auto& p : state.params()) p.var.node()->grad = Tensor(p.var.shape(), 1.0);
    auto before = snapshot(state);
    Adam adam;
    const ParamGroup only[] = {ParamGroup::mask_decoder};
    adam.step(state, only, 1e-3);
    CHECK(changed_groups(state, before) == std::set<ParamGroup>{ParamGroup::mask_decoder});
    for (const auto& p : state.params()) CHECK(p.var.grad().empty());
    // first Adam step moves every coordinate by lr in the direction of -grad
    const auto& w = state.get("dec.iou_token").value();
    for (std::size_t i = 0; i < w.size(); ++i)
        CHECK(w.data[i] == doctest::Approx(before.at("dec.iou_token").data[i] - 1e-3).epsilon(1e-9));
    auto restored = Adam::from_json(adam.to_json());
    CHECK(restored.to_json() == adam.to_json());
}

TEST_CASE("train_step discipline") {
    auto state = model::init_model(model::ModelConfig::toy());
    auto samples = dataset::make_synthetic_set(2, 11);
    Adam adam;
    TrainConfig cfg;
    cfg.masks_per_image = 2;
    prompt::Rng rng(1);
    std::map<std::string, Tensor> before;
    std::vector<std::set<ParamGroup>> changed;
    auto observer = [&](const StepEvent& e, const ModelState& s, bool after) {
        if (!after) {
            before = snapshot(s);
            return;
        }
        changed.push_back(changed_groups(s, before));
        CHECK(e.updated == groups_for_iteration(e.iteration));
    };
    const auto base = snapshot(state);
    auto result = train_step(std::span(samples.data(), 1), state, adam, cfg, 1e-3, rng, observer);
    REQUIRE(changed.size() == 9);
    CHECK(changed[0].count(ParamGroup::adapters));
    CHECK(changed[0].count(ParamGroup::prompt_encoder));
    CHECK(changed[0].count(ParamGroup::mask_decoder));
    for (std::size_t i = 1; i < 9; ++i) CHECK(changed[i] == std::set<ParamGroup>{ParamGroup::mask_decoder});
    for (const auto& p : state.params())
        if (p.group == ParamGroup::encoder_base) CHECK(p.var.value().data == base.at(p.name).data);
    REQUIRE(result.reports.size() == 2);
    for (const auto& r : result.reports) CHECK(r.size() == 9);
}

TEST_CASE("train_step skips empty masks and rejects bad sizes") {
    auto state = model::init_model(model::ModelConfig::toy());
    auto s = dataset::make_synthetic_sample(5);
    s.masks.push_back({"empty", "", BinaryMask(64, 64)});
    Adam adam;
    TrainConfig cfg;
    cfg.masks_per_image = 1;
    prompt::Rng rng(2);
    CHECK_NOTHROW(train_step(std::span(&s, 1), state, adam, cfg, 1e-4, rng));

    s.masks = {{"empty", "", BinaryMask(64, 64)}};
    CHECK_THROWS_AS(train_step(std::span(&s, 1), state, adam, cfg, 1e-4, rng), TrainError);

    auto big = dataset::make_synthetic_sample(6, {.size = 32});
    CHECK_THROWS_AS(train_step(std::span(&big, 1), state, adam, cfg, 1e-4, rng), TrainError);
}

TEST_CASE("run_training is deterministic and writes artifacts") {
    auto samples = dataset::make_synthetic_set(3, 21);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.lr_drop_epochs = {2};
    cfg.masks_per_image = 1;
    const auto dir = std::filesystem::temp_directory_path() / "sammed_test_train";
    std::filesystem::remove_all(dir);
    TrainOptions opt;
    opt.out_dir = dir;
    auto a = model::init_model(model::ModelConfig::toy());
    auto sa = run_training(samples, a, cfg, opt);
    CHECK(sa.steps == 6);
    CHECK(std::filesystem::exists(dir / "epoch_2.ckpt"));
    CHECK(std::filesystem::exists(dir / "epoch_1.optim.json"));

    std::ifstream metrics(dir / "metrics.jsonl");
    std::string line;
    int lines = 0;
    while (std::getline(metrics, line)) {
        auto j = nlohmann::json::parse(line);
        CHECK(j.at("iteration_losses").size() == 9);
        CHECK(j.contains("lr"));
        ++lines;
    }
    CHECK(lines == 6);

    TrainOptions quiet;
    quiet.write_checkpoints = false;
    auto b = model::init_model(model::ModelConfig::toy());
    auto sb = run_training(samples, b, cfg, quiet);
    CHECK(sa.step_losses == sb.step_losses);
    for (const auto& p : a.params()) CHECK(p.var.value().data == b.get(p.name).value().data);

    auto c = model::init_model(model::ModelConfig::toy());
    CHECK_THROWS_AS(run_training(std::span<const dataset::Sample>{}, c, cfg, quiet), TrainError);
}
