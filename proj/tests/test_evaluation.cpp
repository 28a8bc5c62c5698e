#include "doctest.h"
#include "oracles.hpp"

#include "sammed/evaluation.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace sammed;
using namespace sammed::eval;

namespace {

// Answers every prompt with the ground-truth mask it was derived from.
class OracleSegmenter : public Segmenter {
  public:
    int input_size() const override { return 64; }
    void set_image(const dataset::Sample& s) override { sample_ = &s; }
    model::DecoderOutput predict(const prompt::PromptSet& p) override {
        calls.push_back(p);
        const BinaryMask* hit = nullptr;
        for (const auto& m : sample_->masks) {
            if (p.box && prompt::tight_bbox(m.mask) == *p.box) hit = &m.mask;
            if (!p.points.empty() && m.mask.at(p.points[0].y, p.points[0].x)) hit = &m.mask;
        }
        REQUIRE(hit != nullptr);
        model::DecoderOutput out;
        out.mask_logits = ag::Tensor({3, 64, 64}, -10.0);
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < hit->bits.size(); ++i)
                if (hit->bits[i]) out.mask_logits.data[c * 64 * 64 + i] = 10.0;
        out.iou_pred = ag::Tensor({3}, 0.5);
        out.low_res_logits = ag::Tensor({3, 16, 16}, 0.0);
        return out;
    }
    std::vector<prompt::PromptSet> calls;

  private:
    const dataset::Sample* sample_ = nullptr;
};

// Predicts nothing, so every later click is a foreground miss.
class EmptySegmenter : public Segmenter {
  public:
    int input_size() const override { return 64; }
    void set_image(const dataset::Sample&) override {}
    model::DecoderOutput predict(const prompt::PromptSet& p) override {
        calls.push_back(p);
        model::DecoderOutput out;
        out.mask_logits = ag::Tensor({3, 64, 64}, -1.0);
        out.iou_pred = ag::Tensor({3}, 0.1);
        out.low_res_logits = ag::Tensor({3, 16, 16}, -1.0);
        return out;
    }
    std::vector<prompt::PromptSet> calls;
};

DiceReport report_of(std::vector<std::pair<std::string, double>> rows) {
    DiceReport r;
    for (auto& [group, d] : rows) {
        DiceRow row;
        row.modality = group;
        row.dice = d;
        r.rows.push_back(row);
    }
    return r;
}

} // namespace

TEST_CASE("dice_score examples") {
    BinaryMask a(4, 4), b(4, 4);
    CHECK(dice_score(a, b) == 1.0);
    a.at(0, 0) = 1;
    CHECK(dice_score(a, b) == 0.0);
    CHECK(dice_score(a, a) == 1.0);
    b.at(3, 3) = 1;
    CHECK(dice_score(a, b) == 0.0);

    BinaryMask p(4, 4), g(4, 4);
    p.at(0, 0) = p.at(0, 1) = p.at(0, 2) = p.at(0, 3) = 1;
    g.at(0, 0) = g.at(0, 1) = g.at(1, 0) = g.at(1, 1) = 1;
    CHECK(dice_score(p, g) == 0.5);
    CHECK_THROWS_AS(dice_score(p, BinaryMask(3, 4)), EvalError);
}

TEST_CASE("dice_score matches pixel counting and is symmetric") {
    std::mt19937_64 rng(1);
    for (int t = 0; t < 200; ++t) {
        BinaryMask a(16, 16), b(16, 16);
        std::bernoulli_distribution pa(0.1 * (t % 10)), pb(0.05 * (t % 20));
        for (auto& v : a.bits) v = pa(rng);
        for (auto& v : b.bits) v = pb(rng);
        CHECK(std::abs(dice_score(a, b) - oracle::dice(a, b)) <= 1e-12);
        CHECK(dice_score(a, b) == dice_score(b, a));
    }
}

TEST_CASE("aggregate arithmetic") {
    auto one = aggregate(report_of({{"CT", 0.8}, {"CT", 0.6}}), AggregateKey::modality);
    REQUIRE(one.groups.size() == 1);
    CHECK(one.weighted_mean == doctest::Approx(one.groups[0].mean));

    auto two = aggregate(report_of({{"CT", 1.0}, {"MR", 0.5}, {"MR", 0.5}, {"MR", 0.5}}), AggregateKey::modality);
    CHECK(two.weighted_mean == doctest::Approx(0.625).epsilon(1e-15));
    CHECK(two.total == 4);

    auto unl = aggregate(report_of({{"", 0.3}}), AggregateKey::modality);
    CHECK(unl.groups[0].group == "unlabeled");
    CHECK(aggregate(report_of({{"CT", 0.3}}), AggregateKey::overall).groups[0].group == "all");
    CHECK_THROWS(aggregate(DiceReport{}, AggregateKey::overall));
    CHECK_THROWS(aggregate_key_from_string("colour"));
    CHECK(aggregate_key_from_string(to_string(AggregateKey::organ)) == AggregateKey::organ);
}

TEST_CASE("protocol parsing and labels") {
    EvalProtocol p;
    CHECK(p.label() == "Bbox");
    p.mode = prompt_mode_from_string("pt");
    CHECK(p.label() == "1 pt");
    p.num_points = 5;
    CHECK(p.label() == "5 pts");
    p.num_points = 0;
    CHECK_THROWS(p.validate());
    CHECK_THROWS(prompt_mode_from_string("scribble"));
    CHECK(adapter_mode_from_string("remove") == AdapterMode::remove);
}

TEST_CASE("an oracle segmenter scores 1.0 and rows cover every mask") {
    auto samples = dataset::make_synthetic_set(4, 3);
    std::size_t masks = 0;
    for (const auto& s : samples) masks += s.masks.size();
    OracleSegmenter seg;
    for (auto mode : {PromptMode::bbox, PromptMode::points}) {
        EvalProtocol p;
        p.mode = mode;
        p.num_points = 3;
        auto r = evaluate(seg, samples, p);
        CHECK(r.rows.size() == masks);
        CHECK(r.mean() == 1.0);
        CHECK(r.metadata.at("both_empty_dice") == 1.0);
    }
}

TEST_CASE("bbox mode uses the unjittered tight box") {
    auto samples = dataset::make_synthetic_set(2, 4);
    OracleSegmenter seg;
    evaluate(seg, samples, EvalProtocol{});
    std::size_t i = 0;
    for (const auto& s : samples)
        for (const auto& m : s.masks) {
            REQUIRE(i < seg.calls.size());
            CHECK(seg.calls[i].box == prompt::tight_bbox(m.mask));
            CHECK(seg.calls[i].points.empty());
            CHECK_FALSE(seg.calls[i].dense.has_value());
            ++i;
        }
}

TEST_CASE("points mode adds one click per round with the previous logits") {
    auto samples = dataset::make_synthetic_set(1, 5);
    EmptySegmenter seg;
    EvalProtocol p;
    p.mode = PromptMode::points;
    p.num_points = 5;
    evaluate(seg, std::span(samples.data(), 1), p);
    REQUIRE(seg.calls.size() == 5 * samples[0].masks.size());
    const auto& gt = samples[0].masks[0].mask;
    for (std::size_t r = 0; r < 5; ++r) {
        const auto& c = seg.calls[r];
        CHECK(c.points.size() == r + 1);
        CHECK_FALSE(c.box.has_value());
        CHECK(c.dense.has_value() == (r > 0));
        for (const auto& pt : c.points) {
            CHECK(pt.label == prompt::PointLabel::foreground);
            CHECK(gt.at(pt.y, pt.x) == 1);
        }
        if (r > 0) CHECK(std::vector(c.points.begin(), c.points.end() - 1) == seg.calls[r - 1].points);
    }

    // k = 1 is a single round
    EmptySegmenter one;
    p.num_points = 1;
    evaluate(one, std::span(samples.data(), 1), p);
    CHECK(one.calls.size() == samples[0].masks.size());
}

TEST_CASE("evaluation is deterministic and keep/remove pairs match for identity adapters") {
    auto state = model::init_model(model::ModelConfig::toy());
    auto samples = dataset::make_synthetic_set(3, 6);
    EvalProtocol p;
    p.mode = PromptMode::points;
    p.num_points = 3;
    p.seed = 9;
    auto a = evaluate(state, samples, p), b = evaluate(state, samples, p);
    REQUIRE(a.rows.size() == b.rows.size());
    for (std::size_t i = 0; i < a.rows.size(); ++i) CHECK(a.rows[i].dice == b.rows[i].dice);
    for (const auto& r : a.rows) {
        CHECK(r.dice >= 0.0);
        CHECK(r.dice <= 1.0);
    }

    auto paired = compare_adapter_modes(state, samples, p);
    CHECK(paired.deltas.size() == paired.keep.rows.size());
    for (double d : paired.deltas) CHECK(d == 0.0);
    auto j = paired.to_json();
    CHECK(j.at("aggregates").at("overall").contains("keep"));
    CHECK(j.at("aggregates").at("overall").contains("remove"));

    auto big = dataset::make_synthetic_set(1, 7, {.size = 48});
    CHECK_THROWS_AS(evaluate(state, big, p), EvalError);
}

TEST_CASE("throughput and report files") {
    auto state = model::init_model(model::ModelConfig::toy());
    auto t = measure_throughput(state, 64, 1, 1);
    CHECK(t.images_per_second > 0);
    CHECK(t.n_timed == 1);
    CHECK_FALSE(t.hardware.empty());
    CHECK(measure_throughput(state, 128, 0, 1).resolution == 128);

    auto samples = dataset::make_synthetic_set(2, 8);
    EvalProtocol p;
    auto r = evaluate(state, samples, p);
    const auto dir = std::filesystem::temp_directory_path() / "sammed_test_eval";
    std::filesystem::create_directories(dir);
    write_json(report_document(r, p, &t), dir / "r.json");
    std::ifstream in(dir / "r.json");
    auto doc = nlohmann::json::parse(in);
    CHECK(doc.at("rows").size() == r.rows.size());

    write_summary_csv(dir / "s.csv", "toy", p, r, t.images_per_second, 64);
    std::ifstream s(dir / "s.csv");
    std::string header, line;
    std::getline(s, header);
    std::getline(s, line);
    CHECK(header == "model,resolution,prompt_mode,dice,fps");
    CHECK(line.rfind("toy,64,Bbox,", 0) == 0);

    std::vector<AggregateTable> tables{aggregate(r, AggregateKey::modality), aggregate(r, AggregateKey::overall)};
    write_aggregate_csv(dir / "a.csv", tables);
    std::ifstream a(dir / "a.csv");
    std::stringstream all;
    all << a.rdbuf();
    CHECK(all.str().rfind("key,group,count,mean_dice", 0) == 0);
    CHECK(all.str().find("weighted_average") != std::string::npos);
}
