// Command-line front end: preprocess, train, eval, serve, synth.

#include "sammed/data_engine.hpp"
#include "sammed/dataset.hpp"
#include "sammed/evaluation.hpp"
#include "sammed/model.hpp"
#include "sammed/service.hpp"
#include "sammed/training.hpp"

#include <csignal>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "httplib.h"

using namespace sammed;

namespace {

nlohmann::json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    return nlohmann::json::parse(in);
}

httplib::Server* g_server = nullptr;

void stop_server(int) {
    if (g_server) g_server->stop();
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"sammed: curation, training, evaluation and serving of a promptable medical segmentation model"};
    app.require_subcommand(1);

    // preprocess
    auto* pre = app.add_subcommand("preprocess", "curate volumes and images into a 2D image/mask dataset");
    std::string pre_in, pre_out, pre_axes = "xyz";
    int pre_size = 256, pre_min_area = 100, pre_workers = 1;
    std::uint64_t pre_seed = 0;
    double pre_ratio = 0.8;
    bool pre_four = false;
    pre->add_option("--in", pre_in, "directory of JSON sidecars")->required();
    pre->add_option("--out", pre_out, "output directory")->required();
    pre->add_option("--size", pre_size, "target size")->capture_default_str();
    pre->add_option("--min-area", pre_min_area, "minimum area at the target size")->capture_default_str();
    pre->add_option("--axes", pre_axes, "slicing axes, subset of xyz")->capture_default_str();
    pre->add_option("--seed", pre_seed, "split seed")->capture_default_str();
    pre->add_option("--ratio", pre_ratio, "train fraction")->capture_default_str();
    pre->add_option("--workers", pre_workers, "volumes curated concurrently")->capture_default_str();
    pre->add_flag("--four-connected", pre_four, "split components with 4-connectivity");

    // synth
    auto* syn = app.add_subcommand("synth", "write a synthetic curated dataset of shape images");
    std::string syn_out;
    std::size_t syn_count = 20;
    int syn_size = 64;
    std::uint64_t syn_seed = 0;
    syn->add_option("--out", syn_out, "output directory")->required();
    syn->add_option("--count", syn_count, "number of images")->capture_default_str();
    syn->add_option("--size", syn_size, "image size")->capture_default_str();
    syn->add_option("--seed", syn_seed, "seed")->capture_default_str();

    // train
    auto* tr = app.add_subcommand("train", "simulated-interaction fine-tuning");
    std::string tr_manifest, tr_config, tr_out, tr_resume;
    int tr_max_steps = 0;
    tr->add_option("--manifest", tr_manifest, "manifest.json")->required();
    tr->add_option("--config", tr_config, "training config JSON (TrainConfig fields, optional \"model\")");
    tr->add_option("--out", tr_out, "output directory")->required();
    tr->add_option("--resume", tr_resume, "checkpoint to resume from");
    tr->add_option("--max-steps", tr_max_steps, "stop after this many steps");

    // eval
    auto* ev = app.add_subcommand("eval", "Dice evaluation under bbox or point protocols");
    std::string ev_ckpt, ev_manifest, ev_mode = "bbox", ev_adapters = "keep", ev_out = "report.json", ev_split = "test";
    int ev_points = 1, ev_fps_timed = 5;
    std::uint64_t ev_seed = 0;
    bool ev_compare = false;
    ev->add_option("--ckpt", ev_ckpt, "checkpoint")->required();
    ev->add_option("--manifest", ev_manifest, "manifest.json")->required();
    ev->add_option("--mode", ev_mode, "bbox | pt")->capture_default_str();
    ev->add_option("--points", ev_points, "clicks in pt mode")->capture_default_str();
    ev->add_option("--adapters", ev_adapters, "keep | remove")->capture_default_str();
    ev->add_option("--seed", ev_seed, "prompt seed")->capture_default_str();
    ev->add_option("--split", ev_split, "train | test | holdout | all")->capture_default_str();
    ev->add_option("--out", ev_out, "report path (.json); CSV tables are written next to it")->capture_default_str();
    ev->add_option("--fps-runs", ev_fps_timed, "timed forwards for the FPS column")->capture_default_str();
    ev->add_flag("--compare-adapters", ev_compare, "also write a keep/remove paired report");

    // serve
    auto* sv = app.add_subcommand("serve", "session-based HTTP inference");
    std::string sv_ckpt, sv_host = "127.0.0.1";
    int sv_port = 8080;
    std::size_t sv_max_sessions = 64;
    double sv_ttl = 3600;
    sv->add_option("--ckpt", sv_ckpt, "checkpoint")->required();
    sv->add_option("--host", sv_host, "bind address")->capture_default_str();
    sv->add_option("--port", sv_port, "port")->capture_default_str();
    sv->add_option("--max-sessions", sv_max_sessions, "session cap (LRU eviction)")->capture_default_str();
    sv->add_option("--ttl", sv_ttl, "idle session lifetime in seconds")->capture_default_str();

    // init
    auto* in = app.add_subcommand("init", "write a freshly initialized checkpoint");
    std::string in_config, in_out;
    bool in_toy = false;
    in->add_option("--config", in_config, "model config JSON");
    in->add_flag("--toy", in_toy, "64px, patch 16, C=32, depth 2");
    in->add_option("--out", in_out, "checkpoint path")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*pre) {
            data::CurationConfig cfg;
            cfg.target_size = pre_size;
            cfg.min_area_pixels = pre_min_area;
            cfg.axes = pre_axes;
            cfg.seed = pre_seed;
            cfg.train_ratio = pre_ratio;
            cfg.workers = pre_workers;
            if (pre_four) cfg.connectivity = data::Connectivity::four;
            const auto summary = data::curate_directory(pre_in, pre_out, cfg);
            std::cout << "images " << summary.manifest.records.size() << ", masks " << summary.manifest.mask_count()
                      << ", slices seen " << summary.slices_seen << ", aspect-discarded "
                      << summary.slices_discarded_aspect << ", small masks discarded " << summary.masks_discarded_small
                      << '\n';
        } else if (*syn) {
            dataset::SyntheticOptions opt;
            opt.size = syn_size;
            const auto samples = dataset::make_synthetic_set(syn_count, syn_seed, opt);
            const auto m = dataset::write_curated(samples, syn_out, syn_seed);
            std::cout << "wrote " << m.records.size() << " images, " << m.mask_count() << " masks to " << syn_out << '\n';
        } else if (*in) {
            model::ModelConfig cfg = in_toy ? model::ModelConfig::toy() : model::ModelConfig{};
            if (!in_config.empty()) cfg = model::ModelConfig::from_json(read_json(in_config), cfg);
            model::save_checkpoint(model::init_model(cfg), in_out);
        } else if (*tr) {
            nlohmann::json j = tr_config.empty() ? nlohmann::json::object() : read_json(tr_config);
            model::ModelConfig mcfg = model::ModelConfig::toy();
            if (j.contains("model")) mcfg = model::ModelConfig::from_json(j.at("model"), mcfg);
            const auto tcfg = train::TrainConfig::from_json(j);
            const auto manifest = data::DatasetManifest::load(tr_manifest);
            auto state = model::init_model(mcfg);
            train::TrainOptions opt;
            opt.out_dir = tr_out;
            opt.resume = tr_resume;
            opt.max_steps = tr_max_steps;
            opt.verbose = true;
            const auto summary = train::run_training(manifest, state, tcfg, opt);
            model::save_checkpoint(state, std::filesystem::path(tr_out) / "final.ckpt");
            std::cout << "steps " << summary.steps << ", final loss "
                      << (summary.step_losses.empty() ? 0.0 : summary.step_losses.back()) << '\n';
        } else if (*ev) {
            const auto state = model::load_checkpoint(ev_ckpt);
            const auto manifest = data::DatasetManifest::load(ev_manifest);
            std::optional<data::Split> split;
            if (ev_split != "all") split = data::split_from_string(ev_split);
            const auto samples = dataset::load_samples(manifest, split);
            eval::EvalProtocol protocol;
            protocol.mode = eval::prompt_mode_from_string(ev_mode);
            protocol.num_points = ev_points;
            protocol.adapters = eval::adapter_mode_from_string(ev_adapters);
            protocol.seed = ev_seed;
            const auto report = eval::evaluate(state, samples, protocol);
            const int res = state.config.encoder.input_size;
            const auto fps = eval::measure_throughput(state, res, 1, ev_fps_timed);
            const std::filesystem::path out(ev_out);
            eval::write_json(eval::report_document(report, protocol, &fps), out);
            auto stem = out;
            stem.replace_extension();
            eval::write_summary_csv(stem.string() + "_summary.csv", "sammed", protocol, report, fps.images_per_second, res);
            std::vector<eval::AggregateTable> tables;
            for (auto key : {eval::AggregateKey::modality, eval::AggregateKey::anatomy, eval::AggregateKey::organ,
                             eval::AggregateKey::overall})
                tables.push_back(eval::aggregate(report, key));
            eval::write_aggregate_csv(stem.string() + "_aggregates.csv", tables);
            if (ev_compare) {
                const auto paired = eval::compare_adapter_modes(state, samples, protocol);
                eval::write_json(paired.to_json(), stem.string() + "_adapters.json");
            }
            std::cout << protocol.label() << " mean Dice " << report.mean() << " over " << report.rows.size()
                      << " masks, " << fps.images_per_second << " img/s\n";
        } else if (*sv) {
            service::ServiceConfig cfg;
            cfg.max_sessions = sv_max_sessions;
            cfg.ttl_seconds = sv_ttl;
            service::InferenceService svc(model::load_checkpoint(sv_ckpt), cfg);
            httplib::Server server;
            service::mount_routes(server, svc);
            g_server = &server;
            std::signal(SIGINT, stop_server);
            std::signal(SIGTERM, stop_server);
            std::cout << "listening on " << sv_host << ':' << sv_port << std::endl;
            if (!server.listen(sv_host, sv_port)) {
                std::cerr << "error: cannot bind " << sv_host << ':' << sv_port << '\n';
                return 1;
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
