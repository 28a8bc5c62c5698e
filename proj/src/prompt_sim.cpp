#include "sammed/prompt_sim.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace sammed::prompt {

bool InteractionSchedule::is_dense_only(int iteration) const {
    return iteration == dense_only_iterations[0] || iteration == dense_only_iterations[1];
}

int InteractionSchedule::points_at(int iteration) const {
    if (iteration < 2 || iteration > num_iterations) return 0;
    return point_counts.at(static_cast<std::size_t>(iteration - 2));
}

BoxPrompt tight_bbox(const BinaryMask& mask) {
    int x0 = mask.width, y0 = mask.height, x1 = -1, y1 = -1;
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x)
            if (mask.at(y, x)) {
                x0 = std::min(x0, x);
                y0 = std::min(y0, y);
                x1 = std::max(x1, x);
                y1 = std::max(y1, y);
            }
    if (x1 < 0) throw PromptError("tight_bbox: mask has no foreground");
    return {x0, y0, x1 + 1, y1 + 1};
}

BoxPrompt jitter_box(const BoxPrompt& box, Rng& rng, int max_offset, int height, int width) {
    const auto clamp_box = [&](BoxPrompt b) {
        b.x0 = std::clamp(b.x0, 0, width);
        b.x1 = std::clamp(b.x1, 0, width);
        b.y0 = std::clamp(b.y0, 0, height);
        b.y1 = std::clamp(b.y1, 0, height);
        return b;
    };
    if (max_offset <= 0) return clamp_box(box);
    std::uniform_int_distribution<int> offset(-max_offset, max_offset);
    constexpr int kMaxRetries = 16;
    for (int attempt = 0; attempt < kMaxRetries; ++attempt) {
        BoxPrompt b{box.x0 + offset(rng), box.y0 + offset(rng), box.x1 + offset(rng), box.y1 + offset(rng)};
        b = clamp_box(b);
        if (b.valid()) return b;
    }
    return clamp_box(box);
}

InitialPrompt sample_initial_prompt(const BinaryMask& gt, Rng& rng, int max_offset) {
    std::vector<int> fg;
    for (std::size_t i = 0; i < gt.bits.size(); ++i)
        if (gt.bits[i]) fg.push_back(static_cast<int>(i));
    if (fg.empty()) throw PromptError("sample_initial_prompt: ground truth is empty");
    std::bernoulli_distribution use_box(0.5);
    if (use_box(rng)) return jitter_box(tight_bbox(gt), rng, max_offset, gt.height, gt.width);
    std::uniform_int_distribution<std::size_t> pick(0, fg.size() - 1);
    const int idx = fg[pick(rng)];
    return PointPrompt{idx % gt.width, idx / gt.width, PointLabel::foreground};
}

std::vector<PointPrompt> sample_correction_points(const BinaryMask& pred, const BinaryMask& gt, int k, Rng& rng) {
    if (!pred.same_shape(gt)) throw PromptError("sample_correction_points: shape mismatch");
    if (k < 1) throw PromptError("sample_correction_points: k must be >= 1");
    std::vector<int> errors;
    for (std::size_t i = 0; i < gt.bits.size(); ++i)
        if ((pred.bits[i] != 0) != (gt.bits[i] != 0)) errors.push_back(static_cast<int>(i));

    std::size_t take = errors.size();
    if (errors.size() > static_cast<std::size_t>(k)) {
        // Partial Fisher-Yates: the first k entries become a uniform sample.
        take = static_cast<std::size_t>(k);
        for (std::size_t i = 0; i < take; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, errors.size() - 1);
            std::swap(errors[i], errors[pick(rng)]);
        }
    }
    std::vector<PointPrompt> out;
    out.reserve(take);
    for (std::size_t i = 0; i < take; ++i) {
        const int idx = errors[i];
        const PointLabel label = gt.bits[static_cast<std::size_t>(idx)] ? PointLabel::foreground : PointLabel::background;
        out.push_back({idx % gt.width, idx / gt.width, label});
    }
    return out;
}

InteractionSchedule make_schedule(Rng& rng, int num_iterations) {
    if (num_iterations < 3) throw PromptError("make_schedule: need at least 3 iterations");
    InteractionSchedule s;
    s.num_iterations = num_iterations;
    std::uniform_int_distribution<std::size_t> choice(0, kCorrectionPointChoices.size() - 1);
    for (int it = 2; it <= num_iterations; ++it) s.point_counts.push_back(kCorrectionPointChoices[choice(rng)]);
    std::uniform_int_distribution<int> intermediate(2, num_iterations - 1);
    s.dense_only_iterations = {intermediate(rng), num_iterations};
    return s;
}

// ---------------------------------------------------------------------------

namespace {
constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

int b64_value(char c) {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
}
} // namespace

std::string encode_base64(const std::vector<std::uint8_t>& bytes) {
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    for (std::size_t i = 0; i < bytes.size(); i += 3) {
        const std::uint32_t b0 = bytes[i];
        const std::uint32_t b1 = i + 1 < bytes.size() ? bytes[i + 1] : 0;
        const std::uint32_t b2 = i + 2 < bytes.size() ? bytes[i + 2] : 0;
        const std::uint32_t n = (b0 << 16) | (b1 << 8) | b2;
        out += kAlphabet[(n >> 18) & 63];
        out += kAlphabet[(n >> 12) & 63];
        out += i + 1 < bytes.size() ? kAlphabet[(n >> 6) & 63] : '=';
        out += i + 2 < bytes.size() ? kAlphabet[n & 63] : '=';
    }
    return out;
}

std::vector<std::uint8_t> decode_base64(const std::string& text) {
    std::vector<std::uint8_t> out;
    std::uint32_t acc = 0;
    int bits = 0;
    for (char c : text) {
        if (c == '=') break;
        if (c == '\n' || c == '\r' || c == ' ') continue;
        const int v = b64_value(c);
        if (v < 0) throw PromptError("invalid base64 payload");
        acc = (acc << 6) | static_cast<std::uint32_t>(v);
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back(static_cast<std::uint8_t>((acc >> bits) & 0xFF));
        }
    }
    return out;
}

std::string encode_float_grid(const ag::Tensor& grid) {
    std::vector<std::uint8_t> bytes(grid.size() * sizeof(float));
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const float f = static_cast<float>(grid.data[i]);
        std::memcpy(bytes.data() + i * sizeof(float), &f, sizeof(float));
    }
    return encode_base64(bytes);
}

ag::Tensor decode_float_grid(const std::string& text, int height, int width) {
    const auto bytes = decode_base64(text);
    const std::size_t n = bytes.size() / sizeof(float);
    if (bytes.size() % sizeof(float) != 0) throw PromptError("dense grid payload is not a float32 array");
    if (height <= 0 || width <= 0) {
        const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
        if (static_cast<std::size_t>(side) * side != n) throw PromptError("dense grid is not square; give dense_shape");
        height = width = side;
    }
    if (static_cast<std::size_t>(height) * width != n) throw PromptError("dense grid size does not match dense_shape");
    ag::Tensor t({height, width});
    for (std::size_t i = 0; i < n; ++i) {
        float f;
        std::memcpy(&f, bytes.data() + i * sizeof(float), sizeof(float));
        if (!std::isfinite(f)) throw PromptError("dense grid contains non-finite values");
        t.data[i] = f;
    }
    return t;
}

nlohmann::json PromptSet::to_json() const {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : points)
        pts.push_back({{"x", p.x}, {"y", p.y}, {"label", p.label == PointLabel::foreground ? "fg" : "bg"}});
    nlohmann::json j{{"points", pts}};
    j["box"] = box ? nlohmann::json{box->x0, box->y0, box->x1, box->y1} : nlohmann::json(nullptr);
    if (dense) {
        j["dense"] = encode_float_grid(dense->logits);
        j["dense_shape"] = {dense->logits.dim(0), dense->logits.dim(1)};
    } else {
        j["dense"] = nullptr;
    }
    return j;
}

PromptSet PromptSet::from_json(const nlohmann::json& j) {
    PromptSet s;
    try {
        if (j.contains("points") && !j.at("points").is_null()) {
            for (const auto& p : j.at("points")) {
                PointPrompt pt;
                pt.x = p.at("x").get<int>();
                pt.y = p.at("y").get<int>();
                const auto label = p.value("label", std::string("fg"));
                if (label == "fg") pt.label = PointLabel::foreground;
                else if (label == "bg") pt.label = PointLabel::background;
                else throw PromptError("point label must be \"fg\" or \"bg\"");
                s.points.push_back(pt);
            }
        }
        if (j.contains("box") && !j.at("box").is_null()) {
            const auto b = j.at("box").get<std::array<int, 4>>();
            s.box = BoxPrompt{b[0], b[1], b[2], b[3]};
            if (!s.box->valid()) throw PromptError("box must satisfy x0 < x1 and y0 < y1");
        }
        if (j.contains("dense") && !j.at("dense").is_null()) {
            int h = 0, w = 0;
            if (j.contains("dense_shape")) {
                const auto shape = j.at("dense_shape").get<std::array<int, 2>>();
                h = shape[0];
                w = shape[1];
            }
            s.dense = DensePrompt{decode_float_grid(j.at("dense").get<std::string>(), h, w)};
        }
    } catch (const nlohmann::json::exception& e) {
        throw PromptError(std::string("malformed prompt set: ") + e.what());
    }
    return s;
}

} // namespace sammed::prompt
