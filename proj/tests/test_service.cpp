#include "doctest.h"

#include "sammed/service.hpp"

#include <thread>

#include "httplib.h"

using namespace sammed;
using namespace sammed::service;

namespace {

std::vector<std::uint8_t> png_bytes(int h, int w, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Image img(h, w, 1);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng() % 256);
    return encode_png(img);
}

const model::ModelState& toy_state() {
    static const auto s = model::init_model(model::ModelConfig::toy());
    return s;
}

int status_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const ServiceError& e) {
        return e.status();
    }
    return 0;
}

nlohmann::json point_body(int x, int y) { return {{"points", {{{"x", x}, {"y", y}, {"label", "fg"}}}}}; }

} // namespace

TEST_CASE("RLE round trip and format") {
    BinaryMask m(3, 4);
    m.at(0, 0) = m.at(0, 1) = m.at(2, 3) = 1;
    auto j = encode_rle(m);
    CHECK(j["size"] == nlohmann::json({3, 4}));
    CHECK(j["counts"] == nlohmann::json({0, 2, 9, 1}));
    CHECK(decode_rle(j) == m);

    BinaryMask empty(2, 2);
    CHECK(encode_rle(empty)["counts"] == nlohmann::json({4}));
    std::mt19937_64 rng(1);
    for (int t = 0; t < 50; ++t) {
        BinaryMask r(9, 7);
        for (auto& b : r.bits) b = rng() % 2;
        CHECK(decode_rle(encode_rle(r)) == r);
    }
    CHECK(status_of([] { decode_rle({{"size", {2, 2}}, {"counts", {1, 1}}}); }) == 400);
    CHECK(status_of([] { decode_rle({{"size", {2, 2}}, {"counts", {3, 3}}}); }) == 400);
}

TEST_CASE("session lifecycle and the encoder-once contract") {
    InferenceService svc(toy_state());
    const auto bytes = png_bytes(64, 64, 2);
    const auto id = svc.create_session(bytes);
    CHECK(svc.session_count() == 1);
    const auto first = svc.predict(id, point_body(20, 30));
    for (int i = 0; i < 10; ++i) svc.predict(id, point_body(10 + i, 30));
    CHECK(svc.encoder_calls(id) == 1);
    CHECK(svc.encoder_calls() == 1);
    CHECK(svc.history_size(id) == 11);
    CHECK(first.at("masks_rle").size() == 3);
    CHECK(first.at("iou_pred").size() == 3);
    CHECK(first.at("round") == 1);

    svc.reset_session(id);
    CHECK(svc.history_size(id) == 0);
    CHECK(svc.encoder_calls(id) == 1);
    const auto again = svc.predict(id, point_body(20, 30));
    CHECK(again.at("masks_rle") == first.at("masks_rle"));
    CHECK(again.at("iou_pred") == first.at("iou_pred"));

    svc.delete_session(id);
    CHECK(status_of([&] { svc.predict(id, point_body(20, 30)); }) == 404);
    CHECK(status_of([&] { svc.reset_session(id); }) == 404);
    CHECK(status_of([&] { svc.delete_session(id); }) == 404);
}

TEST_CASE("previous mask chaining") {
    InferenceService svc(toy_state());
    const auto id = svc.create_session(png_bytes(64, 64, 3));
    auto body = point_body(20, 30);
    body["return_low_res"] = true;
    const auto r1 = svc.predict(id, body);
    CHECK(r1.at("low_res_shape") == nlohmann::json({16, 16}));

    // attaching the previous logits explicitly equals use_previous_mask
    auto explicit_body = point_body(25, 30);
    explicit_body["dense"] = r1.at("low_res");
    explicit_body["dense_shape"] = r1.at("low_res_shape");
    auto chained_body = point_body(25, 30);
    chained_body["use_previous_mask"] = true;

    const auto id2 = svc.create_session(png_bytes(64, 64, 3));
    svc.predict(id2, body);
    const auto chained = svc.predict(id2, chained_body);
    const auto manual = svc.predict(id, explicit_body);
    CHECK(chained.at("masks_rle") == manual.at("masks_rle"));

    // no history: use_previous_mask is a no-op
    const auto id3 = svc.create_session(png_bytes(64, 64, 3));
    CHECK(svc.predict(id3, chained_body).at("masks_rle") == svc.predict(id, point_body(25, 30)).at("masks_rle"));
}

TEST_CASE("prompts and masks live in original image space") {
    InferenceService svc(toy_state());
    const auto id = svc.create_session(png_bytes(40, 30, 4));
    const auto r = svc.predict(id, {{"box", {2, 3, 20, 25}}});
    for (const auto& m : r.at("masks_rle")) CHECK(m.at("size") == nlohmann::json({40, 30}));
    CHECK(r.at("transform").at("pad_top") == 12);
    CHECK(r.at("transform").at("pad_left") == 17);
    CHECK(status_of([&] { svc.predict(id, point_body(30, 5)); }) == 422);
    CHECK(status_of([&] { svc.predict(id, point_body(5, -1)); }) == 422);
    CHECK(status_of([&] { svc.predict(id, {{"box", {0, 0, 31, 10}}}); }) == 422);
    CHECK(status_of([&] { svc.predict(id, {{"points", nlohmann::json::array()}}); }) == 422);
    CHECK(status_of([&] { svc.predict(id, {{"points", {{{"x", 1}, {"y", 1}, {"label", "?"}}}}}); }) == 422);

    const auto big = svc.create_session(png_bytes(128, 96, 5));
    const auto rb = svc.predict(big, point_body(90, 120));
    CHECK(rb.at("masks_rle")[0].at("size") == nlohmann::json({128, 96}));
}

TEST_CASE("upload validation") {
    ServiceConfig cfg;
    cfg.max_upload_bytes = 1000;
    InferenceService svc(toy_state(), cfg);
    const std::vector<std::uint8_t> junk{1, 2, 3, 4};
    CHECK(status_of([&] { svc.create_session(junk); }) == 400);
    CHECK(status_of([&] { svc.create_session({}); }) == 400);
    CHECK(status_of([&] { svc.create_session(std::vector<std::uint8_t>(2000, 0)); }) == 413);
    const auto ok = png_bytes(8, 8, 6);
    CHECK(status_of([&] { svc.create_session(ok, {{"adapters", "sideways"}}); }) == 400);
    CHECK_NOTHROW(svc.create_session(ok, {{"adapters", "remove"}}));
}

TEST_CASE("LRU cap and TTL") {
    ServiceConfig cfg;
    cfg.max_sessions = 2;
    cfg.ttl_seconds = 60;
    InferenceService svc(toy_state(), cfg);
    const auto bytes = png_bytes(16, 16, 7);
    const auto a = svc.create_session(bytes);
    const auto b = svc.create_session(bytes);
    svc.predict(a, point_body(3, 3)); // a is now most recent
    const auto c = svc.create_session(bytes);
    CHECK(svc.session_count() == 2);
    CHECK(status_of([&] { svc.predict(b, point_body(3, 3)); }) == 404);
    CHECK_NOTHROW(svc.predict(a, point_body(3, 3)));

    svc.advance_clock(std::chrono::seconds(61));
    CHECK(status_of([&] { svc.predict(c, point_body(3, 3)); }) == 404);
}

TEST_CASE("adapter mode per session") {
    auto state = toy_state().clone();
    std::mt19937_64 rng(8);
    std::normal_distribution<double> d(0, 0.1);
    for (auto& p : state.params())
        if (p.group == model::ParamGroup::adapters)
            for (auto& v : p.var.mutable_value().data) v = d(rng);
    InferenceService svc(state);
    const auto bytes = png_bytes(64, 64, 9);
    const auto keep = svc.create_session(bytes);
    const auto remove = svc.create_session(bytes, {{"adapters", "remove"}});
    const auto rk = svc.predict(keep, point_body(30, 30)), rr = svc.predict(remove, point_body(30, 30));
    CHECK(rk.at("iou_pred") != rr.at("iou_pred"));

    auto stripped = model::remove_adapters(state);
    InferenceService plain(stripped);
    CHECK(plain.predict(plain.create_session(bytes), point_body(30, 30)).at("iou_pred") == rr.at("iou_pred"));
}

TEST_CASE("concurrent sessions stay isolated") {
    InferenceService svc(toy_state());
    constexpr int kSessions = 8, kRounds = 4;
    std::vector<std::string> ids;
    std::vector<std::vector<nlohmann::json>> expected(kSessions);
    for (int s = 0; s < kSessions; ++s) {
        ids.push_back(svc.create_session(png_bytes(64, 64, 100 + s)));
        for (int r = 0; r < kRounds; ++r) {
            auto body = point_body(10 + 5 * r, 10 + 3 * s);
            body["use_previous_mask"] = true;
            expected[s].push_back(svc.predict(ids[s], body).at("masks_rle"));
        }
        svc.reset_session(ids[s]);
    }
    std::vector<std::vector<nlohmann::json>> got(kSessions);
    std::vector<std::thread> threads;
    for (int s = 0; s < kSessions; ++s)
        threads.emplace_back([&, s] {
            for (int r = 0; r < kRounds; ++r) {
                auto body = point_body(10 + 5 * r, 10 + 3 * s);
                body["use_previous_mask"] = true;
                got[s].push_back(svc.predict(ids[s], body).at("masks_rle"));
            }
        });
    for (auto& t : threads) t.join();
    for (int s = 0; s < kSessions; ++s) {
        CHECK(got[s] == expected[s]);
        CHECK(svc.history_size(ids[s]) == kRounds);
    }
    CHECK(svc.encoder_calls() == kSessions);
}

TEST_CASE("HTTP routes") {
    InferenceService svc(toy_state());
    httplib::Server server;
    mount_routes(server, svc);
    const int port = server.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    std::thread th([&] { server.listen_after_bind(); });
    server.wait_until_ready();
    httplib::Client cli("127.0.0.1", port);

    auto health = cli.Get("/healthz");
    REQUIRE(health);
    CHECK(health->status == 200);
    CHECK(nlohmann::json::parse(health->body).at("status") == "ok");

    const auto bytes = png_bytes(100, 100, 10);
    httplib::MultipartFormDataItems items{
        {"image", std::string(bytes.begin(), bytes.end()), "img.png", "image/png"},
        {"options", R"({"adapters": "keep"})", "", "application/json"},
    };
    auto created = cli.Post("/sessions", items);
    REQUIRE(created);
    CHECK(created->status == 201);
    const auto id = nlohmann::json::parse(created->body).at("session_id").get<std::string>();

    auto pred = cli.Post("/sessions/" + id + "/predict", point_body(50, 50).dump(), "application/json");
    REQUIRE(pred);
    CHECK(pred->status == 200);
    auto pj = nlohmann::json::parse(pred->body);
    CHECK(pj.at("masks_rle").size() == 3);
    CHECK(pj.at("transform").at("kind") == "resize");
    CHECK(decode_rle(pj.at("masks_rle")[0]).height == 100);

    auto again = cli.Post("/sessions/" + id + "/predict", point_body(50, 50).dump(), "application/json");
    CHECK(nlohmann::json::parse(again->body).at("masks_rle") == pj.at("masks_rle"));

    auto bad_point = cli.Post("/sessions/" + id + "/predict", point_body(500, 5).dump(), "application/json");
    CHECK(bad_point->status == 422);
    CHECK(nlohmann::json::parse(bad_point->body).at("error").at("status") == 422);
    auto bad_json = cli.Post("/sessions/" + id + "/predict", "{nope", "application/json");
    CHECK(bad_json->status == 400);
    auto corrupt = cli.Post("/sessions", "not an image", "application/octet-stream");
    CHECK(corrupt->status == 400);
    CHECK_FALSE(nlohmann::json::parse(corrupt->body).at("error").at("reason").get<std::string>().empty());

    CHECK(cli.Post("/sessions/" + id + "/reset")->status == 200);
    CHECK(cli.Delete("/sessions/" + id)->status == 200);
    CHECK(cli.Post("/sessions/" + id + "/predict", point_body(50, 50).dump(), "application/json")->status == 404);
    CHECK(cli.Delete("/sessions/" + id)->status == 404);

    server.stop();
    th.join();
}
