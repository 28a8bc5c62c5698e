#pragma once

// Simulated user interaction: initial point/box prompts, error-region
// correction clicks and the per-batch interaction schedule.

#include "sammed/autograd.hpp"
#include "sammed/image.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

namespace sammed::prompt {

using Rng = std::mt19937_64;

class PromptError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

enum class PointLabel { background = 0, foreground = 1 };

struct PointPrompt {
    int x = 0;
    int y = 0;
    PointLabel label = PointLabel::foreground;
    friend bool operator==(const PointPrompt&, const PointPrompt&) = default;
};

// Corners in pixel coordinates; x1 and y1 are exclusive.
struct BoxPrompt {
    int x0 = 0;
    int y0 = 0;
    int x1 = 0;
    int y1 = 0;
    bool valid() const { return x0 < x1 && y0 < y1; }
    friend bool operator==(const BoxPrompt&, const BoxPrompt&) = default;
};

// Low-resolution mask logits, shape [H/4, W/4].
struct DensePrompt {
    ag::Tensor logits;
};

struct PromptSet {
    std::vector<PointPrompt> points;
    std::optional<BoxPrompt> box;
    std::optional<DensePrompt> dense;

    bool has_sparse() const { return !points.empty() || box.has_value(); }
    bool empty() const { return !has_sparse() && !dense.has_value(); }

    // {"points": [{"x", "y", "label": "fg"|"bg"}], "box": [x0,y0,x1,y1] | null,
    //  "dense": base64 float32 grid | null, "dense_shape": [h, w] (optional)}
    nlohmann::json to_json() const;
    static PromptSet from_json(const nlohmann::json& j);
};

using InitialPrompt = std::variant<PointPrompt, BoxPrompt>;

struct InteractionSchedule {
    int num_iterations = 9;
    // Counts for iterations 2..num_iterations (index 0 is iteration 2).
    std::vector<int> point_counts;
    // 1-based iteration indices; the second entry is always the last iteration.
    std::array<int, 2> dense_only_iterations{0, 0};

    bool is_dense_only(int iteration) const;
    int points_at(int iteration) const;
};

inline constexpr std::array<int, 4> kCorrectionPointChoices{1, 3, 5, 9};

BoxPrompt tight_bbox(const BinaryMask& mask);

// Shifts each coordinate by U{-max_offset..max_offset} and clamps to the
// image; redraws on degeneracy and falls back to the clamped input box.
BoxPrompt jitter_box(const BoxPrompt& box, Rng& rng, int max_offset, int height, int width);

// Foreground point or jittered tight box, each with probability 1/2.
InitialPrompt sample_initial_prompt(const BinaryMask& gt, Rng& rng, int max_offset = 5);

// Up to k distinct pixels drawn uniformly from pred XOR gt. Misses (gt, not
// pred) become foreground clicks, false alarms become background clicks.
std::vector<PointPrompt> sample_correction_points(const BinaryMask& pred, const BinaryMask& gt, int k, Rng& rng);

InteractionSchedule make_schedule(Rng& rng, int num_iterations = 9);

std::string encode_base64(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> decode_base64(const std::string& text);
std::string encode_float_grid(const ag::Tensor& grid);
ag::Tensor decode_float_grid(const std::string& text, int height, int width);

} // namespace sammed::prompt
