#include "sammed/service.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "httplib.h"

namespace sammed::service {

nlohmann::json encode_rle(const BinaryMask& mask) {
    std::vector<std::uint64_t> counts;
    std::uint8_t current = 0;
    std::uint64_t run = 0;
    for (std::uint8_t b : mask.bits) {
        const std::uint8_t v = b ? 1 : 0;
        if (v != current) {
            counts.push_back(run);
            run = 0;
            current = v;
        }
        ++run;
    }
    counts.push_back(run);
    return {{"size", {mask.height, mask.width}}, {"counts", counts}};
}

BinaryMask decode_rle(const nlohmann::json& rle) {
    const auto size = rle.at("size").get<std::array<int, 2>>();
    BinaryMask m(size[0], size[1]);
    std::size_t pos = 0;
    std::uint8_t v = 0;
    for (const auto& c : rle.at("counts")) {
        const auto n = c.get<std::uint64_t>();
        if (pos + n > m.bits.size()) throw ServiceError(400, "RLE runs exceed the mask size");
        std::fill_n(m.bits.begin() + static_cast<std::ptrdiff_t>(pos), n, v);
        pos += n;
        v ^= 1;
    }
    if (pos != m.bits.size()) throw ServiceError(400, "RLE runs do not cover the mask");
    return m;
}

namespace {

std::string new_session_id() {
    static std::mutex mu;
    static std::mt19937_64 rng{std::random_device{}()};
    std::lock_guard lock(mu);
    std::ostringstream os;
    os << std::hex << rng() << rng();
    return os.str();
}

} // namespace

InferenceService::InferenceService(model::ModelState state, ServiceConfig config)
    : state_(std::move(state)), config_(config) {
    if (state_.config.encoder.adapters_enabled) stripped_ = model::remove_adapters(state_);
    if (config_.max_sessions == 0) throw ServiceError(500, "max_sessions must be >= 1");
}

void InferenceService::evict_locked() {
    const auto t = now();
    for (auto it = lru_.begin(); it != lru_.end();) {
        auto s = sessions_.find(*it);
        if (std::chrono::duration<double>(t - s->second->last_used).count() > config_.ttl_seconds) {
            sessions_.erase(s);
            it = lru_.erase(it);
        } else {
            ++it;
        }
    }
    while (sessions_.size() >= config_.max_sessions && !lru_.empty()) {
        sessions_.erase(lru_.back());
        lru_.pop_back();
    }
}

std::shared_ptr<Session> InferenceService::find(const std::string& id) const {
    std::lock_guard lock(mutex_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw ServiceError(404, "unknown session '" + id + "'");
    const auto t = now();
    if (std::chrono::duration<double>(t - it->second->last_used).count() > config_.ttl_seconds) {
        sessions_.erase(it);
        lru_.remove(id);
        throw ServiceError(404, "session '" + id + "' expired");
    }
    it->second->last_used = t;
    lru_.remove(id);
    lru_.push_front(id);
    return it->second;
}

std::string InferenceService::create_session(std::span<const std::uint8_t> image_bytes, const nlohmann::json& options) {
    if (image_bytes.size() > config_.max_upload_bytes)
        throw ServiceError(413, "image payload of " + std::to_string(image_bytes.size()) + " bytes exceeds the " +
                                    std::to_string(config_.max_upload_bytes) + " byte limit");
    if (image_bytes.empty()) throw ServiceError(400, "empty image payload");
    auto s = std::make_shared<Session>();
    try {
        s->image = decode_png(image_bytes);
    } catch (const ImageIoError& e) {
        throw ServiceError(400, std::string("cannot decode image: ") + e.what());
    }
    if (!options.is_null() && !options.is_object()) throw ServiceError(400, "options must be a JSON object");
    if (options.is_object() && options.contains("adapters")) {
        try {
            s->adapters = eval::adapter_mode_from_string(options.at("adapters").get<std::string>());
        } catch (const std::exception& e) {
            throw ServiceError(400, e.what());
        }
    }
    const int size = state_.config.encoder.input_size;
    s->transform = data::make_transform(s->image.height, s->image.width, size);
    const Image model_image = data::resize_image(s->image, s->transform);
    const bool strip = s->adapters == eval::AdapterMode::remove && state_.config.encoder.adapters_enabled;
    {
        ag::NoGradGuard no_grad;
        s->embedding = model::encode_image(model_image, strip ? stripped_ : state_);
    }
    ++s->encoder_calls;
    ++encoder_calls_;
    s->created_at = s->last_used = now();
    s->id = new_session_id();

    std::lock_guard lock(mutex_);
    evict_locked();
    sessions_[s->id] = s;
    lru_.push_front(s->id);
    return s->id;
}

prompt::PromptSet InferenceService::to_model_space(const Session& s, const prompt::PromptSet& in) const {
    const int h = s.image.height, w = s.image.width, size = state_.config.encoder.input_size;
    prompt::PromptSet out;
    for (const auto& p : in.points) {
        if (p.x < 0 || p.x >= w || p.y < 0 || p.y >= h)
            throw ServiceError(422, "point (" + std::to_string(p.x) + ", " + std::to_string(p.y) +
                                        ") lies outside the " + std::to_string(w) + "x" + std::to_string(h) + " image");
        const auto m = s.transform.to_model(p.x, p.y);
        out.points.push_back({std::clamp(static_cast<int>(std::lround(m[0])), 0, size - 1),
                              std::clamp(static_cast<int>(std::lround(m[1])), 0, size - 1), p.label});
    }
    if (in.box) {
        const auto& b = *in.box;
        if (b.x0 < 0 || b.y0 < 0 || b.x1 > w || b.y1 > h)
            throw ServiceError(422, "box lies outside the " + std::to_string(w) + "x" + std::to_string(h) + " image");
        // Edges sit half a pixel before the pixel centers they bound.
        const auto lo = s.transform.to_model(b.x0 - 0.5, b.y0 - 0.5);
        const auto hi = s.transform.to_model(b.x1 - 0.5, b.y1 - 0.5);
        prompt::BoxPrompt mb{static_cast<int>(std::floor(lo[0] + 0.5 + 1e-9)), static_cast<int>(std::floor(lo[1] + 0.5 + 1e-9)),
                             static_cast<int>(std::ceil(hi[0] + 0.5 - 1e-9)), static_cast<int>(std::ceil(hi[1] + 0.5 - 1e-9))};
        mb.x0 = std::clamp(mb.x0, 0, size - 1);
        mb.y0 = std::clamp(mb.y0, 0, size - 1);
        mb.x1 = std::clamp(mb.x1, mb.x0 + 1, size);
        mb.y1 = std::clamp(mb.y1, mb.y0 + 1, size);
        out.box = mb;
    }
    if (in.dense) {
        const int low = size / 4;
        if (in.dense->logits.rank() != 2 || in.dense->logits.dim(0) != low || in.dense->logits.dim(1) != low)
            throw ServiceError(422, "dense prompt must be " + std::to_string(low) + "x" + std::to_string(low));
        out.dense = in.dense;
    }
    return out;
}

nlohmann::json InferenceService::predict(const std::string& session_id, const nlohmann::json& body) {
    auto s = find(session_id);
    if (!body.is_object()) throw ServiceError(400, "request body must be a JSON object");
    prompt::PromptSet original;
    try {
        original = prompt::PromptSet::from_json(body);
    } catch (const prompt::PromptError& e) {
        throw ServiceError(422, e.what());
    }
    const bool use_previous = body.value("use_previous_mask", false);
    const bool return_low_res = body.value("return_low_res", false);

    std::lock_guard lock(s->mutex);
    prompt::PromptSet prompts = to_model_space(*s, original);
    if (use_previous && !prompts.dense && !s->history.empty()) {
        const auto& last = s->history.back();
        const int lh = last.low_res.dim(1), lw = last.low_res.dim(2);
        ag::Tensor t({lh, lw});
        std::copy_n(last.low_res.data.begin() + static_cast<std::ptrdiff_t>(last.best_index) * lh * lw,
                    static_cast<std::size_t>(lh) * lw, t.data.begin());
        prompts.dense = prompt::DensePrompt{std::move(t)};
    }
    if (prompts.empty()) throw ServiceError(422, "prompt set is empty");

    const bool strip = s->adapters == eval::AdapterMode::remove && state_.config.encoder.adapters_enabled;
    const auto out = model::predict(s->embedding, prompts, strip ? stripped_ : state_);
    const int best = out.best_by_iou_pred();

    nlohmann::json masks = nlohmann::json::array();
    for (int i = 0; i < model::kNumMaskCandidates; ++i)
        masks.push_back(encode_rle(data::mask_to_original(out.binary_mask(i), s->transform)));
    std::vector<double> iou(out.iou_pred.data.begin(), out.iou_pred.data.end());
    nlohmann::json resp{{"session_id", s->id},
                        {"masks_rle", masks},
                        {"iou_pred", iou},
                        {"best_index", best},
                        {"transform", s->transform.to_json()},
                        {"round", s->history.size() + 1}};
    if (return_low_res) {
        resp["low_res"] = prompt::encode_float_grid(out.low_res(best));
        resp["low_res_shape"] = {out.low_res_logits.dim(1), out.low_res_logits.dim(2)};
    }
    s->history.push_back({prompts, iou, best, out.low_res_logits});
    return resp;
}

void InferenceService::reset_session(const std::string& session_id) {
    auto s = find(session_id);
    std::lock_guard lock(s->mutex);
    s->history.clear();
}

void InferenceService::delete_session(const std::string& session_id) {
    std::lock_guard lock(mutex_);
    if (sessions_.erase(session_id) == 0) throw ServiceError(404, "unknown session '" + session_id + "'");
    lru_.remove(session_id);
}

std::size_t InferenceService::session_count() const {
    std::lock_guard lock(mutex_);
    return sessions_.size();
}

std::size_t InferenceService::encoder_calls(const std::string& session_id) const { return find(session_id)->encoder_calls; }

std::size_t InferenceService::history_size(const std::string& session_id) const {
    auto s = find(session_id);
    std::lock_guard lock(s->mutex);
    return s->history.size();
}

// ---------------------------------------------------------------------------
// HTTP

namespace {

void send_json(httplib::Response& res, int status, const nlohmann::json& j) {
    res.status = status;
    res.set_content(j.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& reason) {
    send_json(res, status, {{"error", {{"status", status}, {"reason", reason}}}});
}

template <typename F>
void guarded(httplib::Response& res, F&& f) {
    try {
        f();
    } catch (const ServiceError& e) {
        send_error(res, e.status(), e.what());
    } catch (const nlohmann::json::exception& e) {
        send_error(res, 400, std::string("malformed JSON: ") + e.what());
    } catch (const std::exception& e) {
        send_error(res, 500, e.what());
    }
}

} // namespace

void mount_routes(httplib::Server& server, InferenceService& service) {
    server.Get("/healthz", [&service](const httplib::Request&, httplib::Response& res) {
        send_json(res, 200, {{"status", "ok"}, {"sessions", service.session_count()},
                             {"input_size", service.state().config.encoder.input_size}});
    });

    server.Post("/sessions", [&service](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            std::string bytes;
            nlohmann::json options = nlohmann::json::object();
            if (req.is_multipart_form_data()) {
                if (!req.has_file("image")) throw ServiceError(400, "multipart field 'image' is missing");
                bytes = req.get_file_value("image").content;
                if (req.has_file("options")) options = nlohmann::json::parse(req.get_file_value("options").content);
            } else {
                bytes = req.body;
            }
            const auto* data = reinterpret_cast<const std::uint8_t*>(bytes.data());
            const auto id = service.create_session({data, bytes.size()}, options);
            send_json(res, 201, {{"session_id", id}});
        });
    });

    server.Post(R"(/sessions/([0-9a-f]+)/predict)", [&service](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const auto body = nlohmann::json::parse(req.body);
            send_json(res, 200, service.predict(req.matches[1], body));
        });
    });

    server.Post(R"(/sessions/([0-9a-f]+)/reset)", [&service](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            service.reset_session(req.matches[1]);
            send_json(res, 200, {{"ok", true}});
        });
    });

    server.Delete(R"(/sessions/([0-9a-f]+))", [&service](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            service.delete_session(req.matches[1]);
            send_json(res, 200, {{"ok", true}});
        });
    });

    server.set_payload_max_length(4 * (16u << 20));
}

} // namespace sammed::service
