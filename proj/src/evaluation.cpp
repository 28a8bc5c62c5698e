#include "sammed/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <map>
#include <random>
#include <thread>

namespace sammed::eval {

void EvalProtocol::validate() const {
    if (mode == PromptMode::points && (num_points < 1 || num_points > 99))
        throw EvalError("num_points must lie in [1, 99]");
    if (resolution < 0) throw EvalError("resolution must be >= 0");
}

std::string EvalProtocol::label() const {
    if (mode == PromptMode::bbox) return "Bbox";
    return std::to_string(num_points) + (num_points == 1 ? " pt" : " pts");
}

nlohmann::json EvalProtocol::to_json() const {
    return {{"mode", mode == PromptMode::bbox ? "bbox" : "points"},
            {"num_points", num_points},
            {"resolution", resolution},
            {"adapters", adapters == AdapterMode::keep ? "keep" : "remove"},
            {"seed", seed},
            {"label", label()}};
}

PromptMode prompt_mode_from_string(const std::string& s) {
    if (s == "bbox") return PromptMode::bbox;
    if (s == "pt" || s == "points") return PromptMode::points;
    throw EvalError("unknown prompt mode '" + s + "' (expected bbox or pt)");
}

AdapterMode adapter_mode_from_string(const std::string& s) {
    if (s == "keep") return AdapterMode::keep;
    if (s == "remove") return AdapterMode::remove;
    throw EvalError("unknown adapter mode '" + s + "' (expected keep or remove)");
}

double dice_score(const BinaryMask& pred, const BinaryMask& gt) {
    if (!pred.same_shape(gt)) throw EvalError("dice_score: shape mismatch");
    std::size_t inter = 0, p = 0, g = 0;
    for (std::size_t i = 0; i < pred.bits.size(); ++i) {
        const bool a = pred.bits[i] != 0, b = gt.bits[i] != 0;
        inter += a && b;
        p += a;
        g += b;
    }
    if (p + g == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(p + g);
}

double DiceReport::mean() const {
    if (rows.empty()) return 0.0;
    double s = 0;
    for (const auto& r : rows) s += r.dice;
    return s / static_cast<double>(rows.size());
}

nlohmann::json DiceReport::to_json() const {
    nlohmann::json rs = nlohmann::json::array();
    for (const auto& r : rows)
        rs.push_back({{"image_id", r.image_id},
                      {"mask_id", r.mask_id},
                      {"modality", r.modality},
                      {"anatomy", r.anatomy},
                      {"organ", r.organ},
                      {"protocol", r.protocol},
                      {"dice", r.dice}});
    return {{"rows", rs}, {"mean_dice", mean()}, {"metadata", metadata}};
}

AggregateKey aggregate_key_from_string(const std::string& s) {
    for (auto k : {AggregateKey::modality, AggregateKey::anatomy, AggregateKey::organ, AggregateKey::overall})
        if (to_string(k) == s) return k;
    throw EvalError("unknown aggregation key '" + s + "'");
}

std::string to_string(AggregateKey key) {
    switch (key) {
    case AggregateKey::modality: return "modality";
    case AggregateKey::anatomy: return "anatomy";
    case AggregateKey::organ: return "organ";
    case AggregateKey::overall: return "overall";
    }
    return "?";
}

nlohmann::json AggregateTable::to_json() const {
    nlohmann::json gs = nlohmann::json::array();
    for (const auto& g : groups) gs.push_back({{"group", g.group}, {"count", g.count}, {"mean_dice", g.mean}});
    return {{"key", to_string(key)}, {"groups", gs}, {"weighted_mean", weighted_mean}, {"total", total}};
}

AggregateTable aggregate(const DiceReport& report, AggregateKey key) {
    if (report.rows.empty()) throw EvalError("aggregate: empty report");
    std::map<std::string, std::pair<std::size_t, double>> acc;
    for (const auto& r : report.rows) {
        std::string g;
        switch (key) {
        case AggregateKey::modality: g = r.modality; break;
        case AggregateKey::anatomy: g = r.anatomy; break;
        case AggregateKey::organ: g = r.organ; break;
        case AggregateKey::overall: g = "all"; break;
        }
        if (g.empty()) g = "unlabeled";
        auto& [n, s] = acc[g];
        ++n;
        s += r.dice;
    }
    AggregateTable t;
    t.key = key;
    double weighted = 0;
    for (const auto& [g, ns] : acc) {
        const double mean = ns.second / static_cast<double>(ns.first);
        t.groups.push_back({g, ns.first, mean});
        weighted += static_cast<double>(ns.first) * mean;
        t.total += ns.first;
    }
    t.weighted_mean = weighted / static_cast<double>(t.total);
    return t;
}

// ---------------------------------------------------------------------------

void ModelSegmenter::set_image(const dataset::Sample& sample) {
    ag::NoGradGuard no_grad;
    embedding_ = model::encode_image(sample.image, state_);
}

model::DecoderOutput ModelSegmenter::predict(const prompt::PromptSet& prompts) {
    return model::predict(embedding_, prompts, state_);
}

namespace {

prompt::Rng mask_rng(std::uint64_t seed, const std::string& image_id, const std::string& mask_id) {
    std::vector<std::uint32_t> words{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
    for (char c : image_id + "/" + mask_id) words.push_back(static_cast<unsigned char>(c));
    std::seed_seq seq(words.begin(), words.end());
    return prompt::Rng(seq);
}

BinaryMask run_points(Segmenter& seg, const BinaryMask& gt, int rounds, prompt::Rng& rng) {
    std::vector<int> fg;
    for (std::size_t i = 0; i < gt.bits.size(); ++i)
        if (gt.bits[i]) fg.push_back(static_cast<int>(i));
    std::uniform_int_distribution<std::size_t> pick(0, fg.size() - 1);
    const int first = fg[pick(rng)];

    prompt::PromptSet prompts;
    prompts.points.push_back({first % gt.width, first / gt.width, prompt::PointLabel::foreground});
    auto out = seg.predict(prompts);
    int best = out.best_by_iou_pred();
    BinaryMask pred = out.binary_mask(best);
    for (int round = 2; round <= rounds; ++round) {
        auto extra = prompt::sample_correction_points(pred, gt, 1, rng);
        if (extra.empty()) break;
        prompts.points.push_back(extra[0]);
        prompts.dense = prompt::DensePrompt{out.low_res(best)};
        out = seg.predict(prompts);
        best = out.best_by_iou_pred();
        pred = out.binary_mask(best);
    }
    return pred;
}

} // namespace

DiceReport evaluate(Segmenter& seg, std::span<const dataset::Sample> samples, const EvalProtocol& protocol) {
    protocol.validate();
    if (samples.empty()) throw EvalError("evaluate: empty split");
    const int size = seg.input_size();
    if (protocol.resolution != 0 && protocol.resolution != size)
        throw EvalError("protocol resolution " + std::to_string(protocol.resolution) + " does not match model input " +
                        std::to_string(size));
    DiceReport report;
    report.metadata = {{"protocol", protocol.to_json()}, {"both_empty_dice", 1.0}, {"threshold_logit", 0.0}};
    for (const auto& s : samples) {
        if (s.image.height != size || s.image.width != size)
            throw EvalError("image " + s.image_id + " is " + std::to_string(s.image.height) + "x" +
                            std::to_string(s.image.width) + ", model expects " + std::to_string(size));
        seg.set_image(s);
        for (const auto& m : s.masks) {
            BinaryMask pred;
            if (m.mask.empty()) {
                pred = BinaryMask(m.mask.height, m.mask.width);
            } else if (protocol.mode == PromptMode::bbox) {
                prompt::PromptSet ps;
                ps.box = prompt::tight_bbox(m.mask);
                auto out = seg.predict(ps);
                pred = out.binary_mask(out.best_by_iou_pred());
            } else {
                auto rng = mask_rng(protocol.seed, s.image_id, m.mask_id);
                pred = run_points(seg, m.mask, protocol.num_points, rng);
            }
            report.rows.push_back(
                {s.image_id, m.mask_id, s.modality, s.anatomy, s.organ, protocol.label(), dice_score(pred, m.mask)});
        }
    }
    return report;
}

DiceReport evaluate(const model::ModelState& state, std::span<const dataset::Sample> samples,
                    const EvalProtocol& protocol) {
    if (protocol.adapters == AdapterMode::remove && state.config.encoder.adapters_enabled) {
        const auto stripped = model::remove_adapters(state);
        ModelSegmenter seg(stripped);
        return evaluate(seg, samples, protocol);
    }
    ModelSegmenter seg(state);
    return evaluate(seg, samples, protocol);
}

nlohmann::json PairedReport::to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < keep.rows.size(); ++i)
        rows.push_back({{"image_id", keep.rows[i].image_id},
                        {"mask_id", keep.rows[i].mask_id},
                        {"dice_keep", keep.rows[i].dice},
                        {"dice_remove", remove.rows[i].dice},
                        {"delta", deltas[i]}});
    nlohmann::json aggregates = nlohmann::json::object();
    for (auto key : {AggregateKey::modality, AggregateKey::anatomy, AggregateKey::organ, AggregateKey::overall})
        aggregates[to_string(key)] = {{"keep", aggregate(keep, key).to_json()},
                                      {"remove", aggregate(remove, key).to_json()}};
    return {{"rows", rows}, {"aggregates", aggregates}};
}

PairedReport compare_adapter_modes(const model::ModelState& state, std::span<const dataset::Sample> samples,
                                   EvalProtocol protocol) {
    if (!state.config.encoder.adapters_enabled) throw EvalError("compare_adapter_modes: state has no adapters");
    PairedReport p;
    protocol.adapters = AdapterMode::keep;
    p.keep = evaluate(state, samples, protocol);
    protocol.adapters = AdapterMode::remove;
    p.remove = evaluate(state, samples, protocol);
    for (std::size_t i = 0; i < p.keep.rows.size(); ++i) p.deltas.push_back(p.keep.rows[i].dice - p.remove.rows[i].dice);
    return p;
}

// ---------------------------------------------------------------------------

nlohmann::json Throughput::to_json() const {
    return {{"images_per_second", images_per_second},
            {"seconds_per_image", seconds_per_image},
            {"resolution", resolution},
            {"n_timed", n_timed},
            {"hardware", hardware}};
}

std::string hardware_descriptor() {
    std::string cpu = "unknown cpu";
    std::ifstream in("/proc/cpuinfo");
    for (std::string line; std::getline(in, line);) {
        if (line.rfind("model name", 0) == 0) {
            auto pos = line.find(':');
            if (pos != std::string::npos) cpu = line.substr(pos + 2);
            break;
        }
    }
    return cpu + ", " + std::to_string(std::thread::hardware_concurrency()) + " hw threads, single-threaded float64";
}

Throughput measure_throughput(const model::ModelState& state, int resolution, int n_warmup, int n_timed) {
    if (n_timed < 1) throw EvalError("n_timed must be >= 1");
    if (n_warmup < 0) throw EvalError("n_warmup must be >= 0");
    const model::ModelState* use = &state;
    model::ModelState resized;
    if (resolution != state.config.encoder.input_size) {
        auto cfg = state.config;
        cfg.encoder.input_size = resolution;
        resized = model::init_model(cfg);
        use = &resized;
    }
    Image img(resolution, resolution, 1);
    std::mt19937_64 rng(0);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng() & 0xFF);
    prompt::PromptSet ps;
    ps.box = prompt::BoxPrompt{resolution / 4, resolution / 4, 3 * resolution / 4, 3 * resolution / 4};

    ag::NoGradGuard no_grad;
    auto once = [&] {
        auto emb = model::encode_image(img, *use);
        return model::predict(emb, ps, *use).iou_pred[0];
    };
    volatile double sink = 0;
    for (int i = 0; i < n_warmup; ++i) sink = sink + once();
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < n_timed; ++i) sink = sink + once();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    Throughput t;
    t.seconds_per_image = secs / n_timed;
    t.images_per_second = t.seconds_per_image > 0 ? 1.0 / t.seconds_per_image : 0.0;
    t.resolution = resolution;
    t.n_timed = n_timed;
    t.hardware = hardware_descriptor();
    return t;
}

nlohmann::json report_document(const DiceReport& report, const EvalProtocol& protocol, const Throughput* fps) {
    nlohmann::json doc = report.to_json();
    doc["protocol"] = protocol.to_json();
    nlohmann::json aggs = nlohmann::json::object();
    for (auto key : {AggregateKey::modality, AggregateKey::anatomy, AggregateKey::organ, AggregateKey::overall})
        aggs[to_string(key)] = aggregate(report, key).to_json();
    doc["aggregates"] = aggs;
    if (fps) doc["throughput"] = fps->to_json();
    return doc;
}

void write_json(const nlohmann::json& doc, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw EvalError("cannot write " + path.string());
    out << doc.dump(2) << '\n';
}

void write_summary_csv(const std::filesystem::path& path, const std::string& model_name, const EvalProtocol& protocol,
                       const DiceReport& report, double fps, int resolution) {
    std::ofstream out(path);
    if (!out) throw EvalError("cannot write " + path.string());
    out << "model,resolution,prompt_mode,dice,fps\n";
    out << model_name << ',' << resolution << ',' << protocol.label() << ',' << report.mean() << ',' << fps << '\n';
}

void write_aggregate_csv(const std::filesystem::path& path, std::span<const AggregateTable> tables) {
    std::ofstream out(path);
    if (!out) throw EvalError("cannot write " + path.string());
    out << "key,group,count,mean_dice\n";
    for (const auto& t : tables) {
        for (const auto& g : t.groups) out << to_string(t.key) << ',' << g.group << ',' << g.count << ',' << g.mean << '\n';
        out << to_string(t.key) << ",weighted_average," << t.total << ',' << t.weighted_mean << '\n';
    }
}

} // namespace sammed::eval
