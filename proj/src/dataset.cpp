#include "sammed/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

namespace sammed::dataset {

std::vector<Sample> load_samples(const data::DatasetManifest& manifest, std::optional<data::Split> split) {
    std::vector<Sample> out;
    for (const auto& rec : manifest.records) {
        if (split && rec.split != *split) continue;
        Sample s;
        s.image_id = rec.image_id;
        s.image = read_png(manifest.root / rec.image_path);
        s.modality = rec.modality;
        s.anatomy = rec.anatomy;
        s.organ = rec.organ;
        for (const auto& m : rec.masks) {
            BinaryMask mask = read_mask_png(manifest.root / m.path);
            if (mask.height != s.image.height || mask.width != s.image.width)
                throw data::CurationError("mask " + m.mask_id + " does not match image " + rec.image_id);
            s.masks.push_back({m.mask_id, m.label, std::move(mask)});
        }
        out.push_back(std::move(s));
    }
    return out;
}

namespace {

struct Shape {
    bool ellipse;
    double cx, cy, rx, ry;

    bool contains(int x, int y) const {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        if (ellipse) return (dx * dx) / (rx * rx) + (dy * dy) / (ry * ry) <= 1.0;
        return std::abs(dx) <= rx && std::abs(dy) <= ry;
    }
};

} // namespace

Sample make_synthetic_sample(std::uint64_t seed, const SyntheticOptions& o) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> count_dist(o.min_masks, o.max_masks);
    std::uniform_real_distribution<double> extent(o.min_extent / 2.0, o.max_extent / 2.0);
    std::bernoulli_distribution coin(0.5);
    std::normal_distribution<double> noise(0.0, o.noise_stddev);
    std::uniform_int_distribution<int> background(20, 60);

    const int n = o.size;
    const int wanted = count_dist(rng);
    std::vector<BinaryMask> masks;
    BinaryMask occupied(n, n);
    for (int attempt = 0; attempt < 200 && static_cast<int>(masks.size()) < wanted; ++attempt) {
        Shape sh{coin(rng), 0, 0, extent(rng), extent(rng)};
        std::uniform_real_distribution<double> cx(sh.rx + 1, n - sh.rx - 1), cy(sh.ry + 1, n - sh.ry - 1);
        sh.cx = cx(rng);
        sh.cy = cy(rng);
        BinaryMask m(n, n);
        bool clash = false;
        for (int y = 0; y < n && !clash; ++y)
            for (int x = 0; x < n; ++x)
                if (sh.contains(x, y)) {
                    // one pixel of clearance keeps shapes separate components
                    for (int yy = std::max(0, y - 1); yy <= std::min(n - 1, y + 1) && !clash; ++yy)
                        for (int xx = std::max(0, x - 1); xx <= std::min(n - 1, x + 1); ++xx)
                            if (occupied.at(yy, xx)) clash = true;
                    m.at(y, x) = 1;
                }
        if (clash || m.area() < 16) continue;
        for (std::size_t i = 0; i < m.bits.size(); ++i) occupied.bits[i] |= m.bits[i];
        masks.push_back(std::move(m));
    }

    Sample s;
    s.image_id = "syn_" + std::to_string(seed);
    s.image = Image(n, n, 1);
    const int bg = background(rng);
    std::uniform_int_distribution<int> fg(110, 240);
    std::vector<int> level(masks.size());
    for (auto& l : level) l = fg(rng);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            double v = bg;
            for (std::size_t k = 0; k < masks.size(); ++k)
                if (masks[k].at(y, x)) v = level[k];
            v += noise(rng);
            s.image.at(y, x) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
    s.modality = coin(rng) ? "CT" : "MR";
    s.anatomy = "abdomen";
    s.organ = "phantom";
    for (std::size_t k = 0; k < masks.size(); ++k) {
        char id[16];
        std::snprintf(id, sizeof id, "_c1_%03zu", k);
        s.masks.push_back({s.image_id + id, "phantom", std::move(masks[k])});
    }
    return s;
}

std::vector<Sample> make_synthetic_set(std::size_t count, std::uint64_t seed, const SyntheticOptions& options) {
    std::vector<Sample> out;
    out.reserve(count);
    std::mt19937_64 seeds(seed);
    for (std::size_t i = 0; i < count; ++i) {
        Sample s = make_synthetic_sample(seeds(), options);
        char id[24];
        std::snprintf(id, sizeof id, "syn_%04zu", i);
        const std::string old_id = s.image_id;
        s.image_id = id;
        for (auto& m : s.masks) m.mask_id = s.image_id + m.mask_id.substr(old_id.size());
        out.push_back(std::move(s));
    }
    return out;
}

data::DatasetManifest write_curated(const std::vector<Sample>& samples, const std::filesystem::path& out_dir,
                                    std::uint64_t seed, double ratio) {
    data::DatasetManifest manifest;
    manifest.root = out_dir;
    for (const auto& s : samples) {
        data::ManifestRecord rec;
        rec.image_id = s.image_id;
        rec.image_path = "images/" + s.image_id + ".png";
        rec.modality = s.modality;
        rec.anatomy = s.anatomy;
        rec.organ = s.organ;
        std::filesystem::create_directories(out_dir / "images");
        std::filesystem::create_directories(out_dir / "masks" / s.image_id);
        write_png(out_dir / rec.image_path, s.image);
        for (const auto& m : s.masks) {
            data::MaskRecord mr{m.mask_id, "masks/" + s.image_id + "/" + m.mask_id + ".png", m.label, false};
            write_mask_png(out_dir / mr.path, m.mask);
            rec.masks.push_back(std::move(mr));
        }
        manifest.records.push_back(std::move(rec));
    }
    if (manifest.records.size() >= 2) manifest = data::split_train_test(manifest, seed, ratio);
    manifest.save(out_dir / "manifest.json");
    std::ofstream stats(out_dir / "stats.json");
    stats << data::compute_stats(manifest).to_json().dump(2) << '\n';
    return manifest;
}

} // namespace sammed::dataset
