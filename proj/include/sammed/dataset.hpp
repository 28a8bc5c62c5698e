#pragma once

// In-memory samples loaded from a curated manifest, plus a generator of
// synthetic shape images used for smoke runs and overfit checks.

#include "sammed/data_engine.hpp"
#include "sammed/image.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace sammed::dataset {

struct LabeledMask {
    std::string mask_id;
    std::string label;
    BinaryMask mask;
};

struct Sample {
    std::string image_id;
    Image image;
    std::vector<LabeledMask> masks;
    std::string modality;
    std::string anatomy;
    std::string organ;
};

// Loads every record of the split (all records when split is empty).
std::vector<Sample> load_samples(const data::DatasetManifest& manifest, std::optional<data::Split> split);

struct SyntheticOptions {
    int size = 64;
    int min_masks = 1;
    int max_masks = 3;
    int min_extent = 10; // smallest shape diameter in pixels
    int max_extent = 28;
    double noise_stddev = 6.0;
};

// Grayscale image with 1..3 non-overlapping ellipses or rectangles of
// distinct intensity on a noisy background; one mask per shape.
Sample make_synthetic_sample(std::uint64_t seed, const SyntheticOptions& options = {});
std::vector<Sample> make_synthetic_set(std::size_t count, std::uint64_t seed, const SyntheticOptions& options = {});

// Writes samples in the curated layout (images/, masks/, manifest.json,
// stats.json) with an 80/20 split under the seed.
data::DatasetManifest write_curated(const std::vector<Sample>& samples, const std::filesystem::path& out_dir,
                                    std::uint64_t seed, double ratio = 0.8);

} // namespace sammed::dataset
