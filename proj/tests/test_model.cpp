#include "doctest.h"
#include "gradcheck.hpp"

#include "sammed/model.hpp"

#include <filesystem>
#include <fstream>

using namespace sammed;
using namespace sammed::model;
using testutil::random_tensor;

namespace {

Image test_image(int size, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Image img(size, size, 1);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng() % 256);
    return img;
}

// Adapters with a nonzero transposed convolution so they are not the identity.
void perturb_adapters(ModelState& s, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (auto& p : s.params())
        if (p.group == ParamGroup::adapters) p.var.mutable_value() = random_tensor(p.var.shape(), rng, 0.1);
}

bool same(const Tensor& a, const Tensor& b) { return a.shape == b.shape && a.data == b.data; }

prompt::PromptSet box_prompt() {
    prompt::PromptSet p;
    p.box = prompt::BoxPrompt{10, 12, 40, 44};
    return p;
}

} // namespace

TEST_CASE("config validation") {
    auto cfg = ModelConfig::toy();
    CHECK_NOTHROW(cfg.validate());
    auto bad = cfg;
    bad.encoder.input_size = 70;
    CHECK_THROWS_AS(bad.validate(), ModelError);
    bad = cfg;
    bad.prompt_dim = 30;
    CHECK_THROWS_AS(bad.validate(), ModelError);
    CHECK(ModelConfig::from_json(cfg.to_json()).to_json() == cfg.to_json());
}

TEST_CASE("parameter groups and freezing") {
    auto s = init_model(ModelConfig::toy());
    for (auto g : kAllGroups) CHECK(s.count(g) > 0);
    for (const auto& p : s.params()) {
        if (p.group == ParamGroup::encoder_base) CHECK_FALSE(p.trainable);
        if (p.group == ParamGroup::adapters) CHECK(p.trainable);
    }
    CHECK(s.param("prompt.pe_gaussian").trainable == false);
    CHECK(s.count(ParamGroup::adapters) == 8 * static_cast<std::size_t>(s.config.encoder.depth));
}

TEST_CASE("forward shapes") {
    auto s = init_model(ModelConfig::toy());
    auto emb = encode_image(test_image(64, 1), s);
    CHECK(emb.grid == 4);
    CHECK(emb.tokens.shape() == ag::Shape{16, s.config.prompt_dim});
    auto out = predict(emb, box_prompt(), s);
    CHECK(out.mask_logits.shape == ag::Shape{3, 64, 64});
    CHECK(out.low_res_logits.shape == ag::Shape{3, 16, 16});
    CHECK(out.iou_pred.shape == ag::Shape{3});
    for (double v : out.iou_pred.data) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
    CHECK(out.low_res(1).shape == ag::Shape{16, 16});
    CHECK(out.binary_mask(0).height == 64);
}

TEST_CASE("image preprocessing") {
    Image img(64, 64, 1, 255);
    img.at(0, 0) = 0;
    auto t = preprocess_image(img, 64);
    CHECK(t.shape == ag::Shape{3, 64, 64});
    CHECK(t.data[0] == -1.0);
    CHECK(t.data[1] == 1.0);
    CHECK(t.data[64 * 64] == -1.0);
    CHECK_THROWS(preprocess_image(Image(32, 32, 1), 64));
}

TEST_CASE("zero-initialized adapter layer is the exact identity") {
    auto s = init_model(ModelConfig::toy());
    std::mt19937_64 rng(2);
    auto x = Var::constant(random_tensor({32, 4, 4}, rng));
    for (int b = 0; b < s.config.encoder.depth; ++b) {
        auto y = adapter_layer(x, AdapterParams::from_state(s, b));
        CHECK(same(y.value(), x.value()));
    }
    perturb_adapters(s, 3);
    CHECK_FALSE(same(adapter_layer(x, AdapterParams::from_state(s, 0)).value(), x.value()));
}

TEST_CASE("remove_adapters matches an adapter-free model sharing weights") {
    auto s = init_model(ModelConfig::toy());
    perturb_adapters(s, 4);
    auto stripped = remove_adapters(s);
    CHECK(stripped.count(ParamGroup::adapters) == 0);
    CHECK_FALSE(stripped.config.encoder.adapters_enabled);

    auto cfg = s.config;
    cfg.encoder.adapters_enabled = false;
    auto fresh = init_model(cfg);
    for (auto& p : fresh.params()) p.var.mutable_value() = s.get(p.name).value();

    auto img = test_image(64, 5);
    auto e1 = encode_image(img, stripped), e2 = encode_image(img, fresh), e3 = encode_image(img, s);
    CHECK(same(e1.tokens.value(), e2.tokens.value()));
    CHECK_FALSE(same(e1.tokens.value(), e3.tokens.value()));
    auto o1 = predict(e1, box_prompt(), stripped), o2 = predict(e2, box_prompt(), fresh);
    CHECK(same(o1.mask_logits, o2.mask_logits));
    CHECK(same(o1.iou_pred, o2.iou_pred));
}

TEST_CASE("checkpoint round trip is bit-exact") {
    auto s = init_model(ModelConfig::toy());
    perturb_adapters(s, 6);
    const auto path = std::filesystem::temp_directory_path() / "sammed_test_model.ckpt";
    save_checkpoint(s, path);
    auto back = load_checkpoint(path);
    REQUIRE(back.params().size() == s.params().size());
    for (const auto& p : s.params()) {
        CHECK(same(back.get(p.name).value(), p.var.value()));
        CHECK(back.param(p.name).group == p.group);
        CHECK(back.param(p.name).trainable == p.trainable);
    }
    CHECK(back.config.to_json() == s.config.to_json());

    std::ofstream(path, std::ios::binary) << "not a checkpoint";
    CHECK_THROWS(load_checkpoint(path));
}

TEST_CASE("clone shares no storage") {
    auto s = init_model(ModelConfig::toy());
    auto c = s.clone();
    c.params()[0].var.mutable_value().data[0] += 1.0;
    CHECK(c.params()[0].var.value().data[0] != s.params()[0].var.value().data[0]);
}

TEST_CASE("prompt encoding") {
    auto s = init_model(ModelConfig::toy());
    const int d = s.config.prompt_dim;
    prompt::PromptSet p;
    CHECK_FALSE(encode_sparse(p, s).defined());
    p.points = {{3, 4, prompt::PointLabel::foreground}, {9, 9, prompt::PointLabel::background}};
    CHECK(encode_sparse(p, s).shape() == ag::Shape{2, d});
    p.box = prompt::BoxPrompt{1, 1, 20, 20};
    CHECK(encode_sparse(p, s).shape() == ag::Shape{4, d});

    // fg and bg at the same place differ only by the label embeddings
    prompt::PointPrompt fg{5, 5, prompt::PointLabel::foreground}, bg{5, 5, prompt::PointLabel::background};
    auto a = encode_points(std::span(&fg, 1), s).value(), b = encode_points(std::span(&bg, 1), s).value();
    const auto& efg = s.get("prompt.point_fg").value();
    const auto& ebg = s.get("prompt.point_bg").value();
    for (std::size_t i = 0; i < d; ++i) CHECK(a.data[i] - efg.data[i] == doctest::Approx(b.data[i] - ebg.data[i]));

    auto pe = fourier_pe(s, 0.3, 0.7);
    CHECK(pe.size() == d);
    for (double v : pe.data) CHECK(std::abs(v) <= 1.0);

    auto nomask = encode_dense(nullptr, s);
    CHECK(nomask.shape() == ag::Shape{16, d});
    Tensor logits({16, 16}, 0.5);
    CHECK(encode_dense(&logits, s).shape() == ag::Shape{16, d});
    Tensor wrong({8, 8});
    CHECK_THROWS(encode_dense(&wrong, s));
}

TEST_CASE("predict is deterministic and reacts to the dense prompt") {
    auto s = init_model(ModelConfig::toy());
    auto emb = encode_image(test_image(64, 7), s);
    auto a = predict(emb, box_prompt(), s), b = predict(emb, box_prompt(), s);
    CHECK(same(a.mask_logits, b.mask_logits));

    auto with_dense = box_prompt();
    with_dense.dense = prompt::DensePrompt{a.low_res(a.best_by_iou_pred())};
    auto c = predict(emb, with_dense, s);
    CHECK_FALSE(same(a.mask_logits, c.mask_logits));

    prompt::PromptSet dense_only;
    dense_only.dense = with_dense.dense;
    CHECK_NOTHROW(predict(emb, dense_only, s));
}

TEST_CASE("decoder gradients reach every trainable group") {
    auto s = init_model(ModelConfig::toy());
    perturb_adapters(s, 8);
    auto img = test_image(64, 9);
    auto emb = encode_image(img, s);
    auto out = decode_masks(emb, encode_sparse(box_prompt(), s), encode_dense(nullptr, s), s);
    ag::backward(ag::add(ag::sum(out.mask_logits), ag::sum(out.iou_pred)));
    for (auto g : {ParamGroup::adapters, ParamGroup::prompt_encoder, ParamGroup::mask_decoder}) {
        bool any = false;
        for (const auto& p : s.params())
            if (p.group == g && !p.var.grad().empty())
                for (double v : p.var.grad().data) any = any || v != 0.0;
        CHECK_MESSAGE(any, to_string(g));
    }
    for (const auto& p : s.params())
        if (p.group == ParamGroup::encoder_base) CHECK(p.var.grad().empty());
}
