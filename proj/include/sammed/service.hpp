#pragma once

// Session-based inference: upload once, cache the embedding, then answer
// prompt -> mask requests against it. The HTTP layer is a thin mapping of
// InferenceService calls onto routes.

#include "sammed/data_engine.hpp"
#include "sammed/evaluation.hpp"
#include "sammed/model.hpp"
#include "sammed/prompt_sim.hpp"

#include <atomic>
#include <chrono>
#include <cstdint>
#include <list>
#include <memory>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace httplib {
class Server;
}

namespace sammed::service {

// Carries the HTTP status the error maps to.
class ServiceError : public std::runtime_error {
  public:
    ServiceError(int status, const std::string& reason) : std::runtime_error(reason), status_(status) {}
    int status() const { return status_; }

  private:
    int status_;
};

struct ServiceConfig {
    std::size_t max_sessions = 64;
    double ttl_seconds = 3600;
    std::size_t max_upload_bytes = 16u << 20;
};

// Row-major run lengths starting with a (possibly empty) run of zeros:
// {"size": [h, w], "counts": [...]}.
nlohmann::json encode_rle(const BinaryMask& mask);
BinaryMask decode_rle(const nlohmann::json& rle);

struct HistoryEntry {
    prompt::PromptSet prompts; // model space, dense included when used
    std::vector<double> iou_pred;
    int best_index = 0;
    ag::Tensor low_res; // [3, T/4, T/4]
};

struct Session {
    std::string id;
    Image image; // as uploaded
    data::SampleTransform transform;
    model::ImageEmbedding embedding;
    eval::AdapterMode adapters = eval::AdapterMode::keep;
    std::vector<HistoryEntry> history;
    std::chrono::steady_clock::time_point created_at;
    std::chrono::steady_clock::time_point last_used;
    std::size_t encoder_calls = 0;
    std::mutex mutex; // serializes predicts on this session
};

class InferenceService {
  public:
    using Clock = std::chrono::steady_clock;

    InferenceService(model::ModelState state, ServiceConfig config = {});

    // image_bytes: PNG. options: {"adapters": "keep"|"remove"}.
    std::string create_session(std::span<const std::uint8_t> image_bytes, const nlohmann::json& options = {});

    // body: PromptSet JSON in original image coordinates plus optional
    // "use_previous_mask" (bool) and "return_low_res" (bool).
    // Returns {masks_rle[3], iou_pred[3], best_index, transform}.
    nlohmann::json predict(const std::string& session_id, const nlohmann::json& body);

    void reset_session(const std::string& session_id);
    void delete_session(const std::string& session_id);

    std::size_t session_count() const;
    std::size_t encoder_calls() const { return encoder_calls_.load(); }
    std::size_t encoder_calls(const std::string& session_id) const;
    std::size_t history_size(const std::string& session_id) const;
    const model::ModelState& state() const { return state_; }

    // Test hook: advances the clock used for TTL decisions.
    void advance_clock(std::chrono::seconds delta) { clock_offset_s_ += delta.count(); }

  private:
    Clock::time_point now() const { return Clock::now() + std::chrono::seconds(clock_offset_s_.load()); }
    std::shared_ptr<Session> find(const std::string& id) const;
    void evict_locked();
    prompt::PromptSet to_model_space(const Session& s, const prompt::PromptSet& original) const;

    model::ModelState state_;
    model::ModelState stripped_; // adapters removed; empty when the model has none
    ServiceConfig config_;
    mutable std::mutex mutex_;
    mutable std::unordered_map<std::string, std::shared_ptr<Session>> sessions_;
    mutable std::list<std::string> lru_; // front = most recent
    std::atomic<std::size_t> encoder_calls_{0};
    std::atomic<long long> clock_offset_s_{0};
};

// Registers every route on the server.
void mount_routes(httplib::Server& server, InferenceService& service);

} // namespace sammed::service
