#pragma once

// Bbox and k-point interactive evaluation, Dice scoring, grouped
// aggregation, adapter keep/remove comparison and throughput timing.

#include "sammed/dataset.hpp"
#include "sammed/model.hpp"
#include "sammed/prompt_sim.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace sammed::eval {

class EvalError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

enum class PromptMode { bbox, points };
enum class AdapterMode { keep, remove };

struct EvalProtocol {
    PromptMode mode = PromptMode::bbox;
    int num_points = 1; // points mode only: cumulative clicks
    int resolution = 0; // 0 = model input size
    AdapterMode adapters = AdapterMode::keep;
    std::uint64_t seed = 0;

    void validate() const;
    std::string label() const; // "Bbox", "1 pt", "5 pts"
    nlohmann::json to_json() const;
};

PromptMode prompt_mode_from_string(const std::string& s);   // "bbox" | "pt" | "points"
AdapterMode adapter_mode_from_string(const std::string& s); // "keep" | "remove"

// 2|P n G| / (|P| + |G|); 1 when both are empty.
double dice_score(const BinaryMask& pred, const BinaryMask& gt);

struct DiceRow {
    std::string image_id;
    std::string mask_id;
    std::string modality;
    std::string anatomy;
    std::string organ;
    std::string protocol;
    double dice = 0;
};

struct DiceReport {
    std::vector<DiceRow> rows;
    nlohmann::json metadata = nlohmann::json::object();

    double mean() const;
    nlohmann::json to_json() const;
};

enum class AggregateKey { modality, anatomy, organ, overall };
AggregateKey aggregate_key_from_string(const std::string& s);
std::string to_string(AggregateKey key);

struct GroupStat {
    std::string group;
    std::size_t count = 0;
    double mean = 0;
};

struct AggregateTable {
    AggregateKey key = AggregateKey::overall;
    std::vector<GroupStat> groups; // sorted by group name
    double weighted_mean = 0;      // sum(count * mean) / sum(count)
    std::size_t total = 0;

    nlohmann::json to_json() const;
};

// Empty key values are grouped under "unlabeled".
AggregateTable aggregate(const DiceReport& report, AggregateKey key);

// Something that segments one image at a time from prompts.
class Segmenter {
  public:
    virtual ~Segmenter() = default;
    virtual int input_size() const = 0;
    virtual void set_image(const dataset::Sample& sample) = 0;
    virtual model::DecoderOutput predict(const prompt::PromptSet& prompts) = 0;
};

class ModelSegmenter : public Segmenter {
  public:
    explicit ModelSegmenter(const model::ModelState& state) : state_(state) {}
    int input_size() const override { return state_.config.encoder.input_size; }
    void set_image(const dataset::Sample& sample) override;
    model::DecoderOutput predict(const prompt::PromptSet& prompts) override;

  private:
    const model::ModelState& state_;
    model::ImageEmbedding embedding_;
};

// Bbox: one forward with the unjittered tight box. Points: round 1 is a
// random foreground click, each later round adds one error-region click and
// passes the previous round's low-res logits; the candidate is chosen by
// predicted IoU. One row per (image, mask); the final round is scored.
DiceReport evaluate(Segmenter& segmenter, std::span<const dataset::Sample> samples, const EvalProtocol& protocol);
// Applies protocol.adapters (remove_adapters when "remove").
DiceReport evaluate(const model::ModelState& state, std::span<const dataset::Sample> samples,
                    const EvalProtocol& protocol);

struct PairedReport {
    DiceReport keep;
    DiceReport remove;
    std::vector<double> deltas; // keep - remove, aligned with rows

    nlohmann::json to_json() const;
};

PairedReport compare_adapter_modes(const model::ModelState& state, std::span<const dataset::Sample> samples,
                                   EvalProtocol protocol);

struct Throughput {
    double images_per_second = 0;
    double seconds_per_image = 0;
    int resolution = 0;
    int n_timed = 0;
    std::string hardware;

    nlohmann::json to_json() const;
};

std::string hardware_descriptor();

// Mean wall-clock of single-image encode + box decode. A resolution other
// than the state's input size times a freshly initialized model of the same
// configuration at that size.
Throughput measure_throughput(const model::ModelState& state, int resolution, int n_warmup, int n_timed);

// Rows, aggregates by every key, protocol and optional throughput.
nlohmann::json report_document(const DiceReport& report, const EvalProtocol& protocol, const Throughput* fps = nullptr);
void write_json(const nlohmann::json& doc, const std::filesystem::path& path);
// model,resolution,prompt_mode,dice,fps
void write_summary_csv(const std::filesystem::path& path, const std::string& model_name, const EvalProtocol& protocol,
                       const DiceReport& report, double fps, int resolution);
// key,group,count,mean_dice followed by a weighted-average line per key
void write_aggregate_csv(const std::filesystem::path& path, std::span<const AggregateTable> tables);

} // namespace sammed::eval
