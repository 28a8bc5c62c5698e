#pragma once

// Curation of 3D volumes and 2D images into a 2D image/mask dataset:
// intensity normalization, slicing, per-class connected-component masks,
// small-target filtering, resizing and train/test splitting.

#include "sammed/image.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace sammed::data {

class CurationError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

enum class Axis { x, y, z, native2d };
enum class Connectivity { four, eight };
enum class Split { train, test, holdout };

std::string to_string(Axis axis);
std::string to_string(Split split);
Split split_from_string(const std::string& s);

// The ten imaging-modality labels used for tagging and statistics.
const std::vector<std::string>& modality_labels();
// Anatomical structure categories used for tagging and statistics.
const std::vector<std::string>& anatomy_labels();
bool is_known_modality(const std::string& modality);

// Voxel (i, j, k) lives at voxels[(i * dims[1] + j) * dims[2] + k].
template <typename T>
struct Grid3D {
    std::array<int, 3> dims{1, 1, 1};
    std::vector<T> voxels;

    Grid3D() = default;
    explicit Grid3D(std::array<int, 3> d, T fill = T{})
        : dims(d), voxels(static_cast<std::size_t>(d[0]) * d[1] * d[2], fill) {}

    T& at(int i, int j, int k) { return voxels[(static_cast<std::size_t>(i) * dims[1] + j) * dims[2] + k]; }
    T at(int i, int j, int k) const { return voxels[(static_cast<std::size_t>(i) * dims[1] + j) * dims[2] + k]; }
};

struct Volume3D {
    std::string name;
    Grid3D<double> grid;
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::string modality = "CT";
};

using LabelVolume = Grid3D<std::int32_t>;

struct Slice2D {
    Image pixels; // single channel
    Axis source_axis = Axis::native2d;
    int source_index = 0;
    std::string image_id;
};

struct MaskInstance {
    BinaryMask bitmap;
    std::string class_label;
    int component_index = 0;
    std::string image_id;
    std::string mask_id;
    bool is_union = false;
};

struct CurationConfig {
    int target_size = 256;
    int min_area_pixels = 100;
    Connectivity connectivity = Connectivity::eight;
    std::string axes = "xyz";
    std::uint64_t seed = 0;
    double train_ratio = 0.8;
    int workers = 1;

    void validate() const;
};

// Min-max rescale to integers in [0, 255], rounding half away from zero.
// A constant volume maps to all zeros.
Volume3D normalize_volume(const Volume3D& volume);

// Aspect rule: a slice of shape h x w is kept iff min(h, w) >= max(h, w) / 2.
bool keep_slice_shape(int h, int w);
std::array<int, 2> slice_shape(const std::array<int, 3>& dims, Axis axis);
std::vector<Axis> parse_axes(const std::string& axes);

Image volume_slice(const Volume3D& normalized, Axis axis, int index);
LabelMap label_slice(const LabelVolume& labels, Axis axis, int index);

// One slice per index along every enabled axis, minus aspect-rule discards.
// The volume must already hold integer intensities in [0, 255].
std::vector<Slice2D> extract_slices(const Volume3D& normalized, const CurationConfig& config);

// Connected components of a binary mask in raster order of first pixel.
std::vector<BinaryMask> connected_components(const BinaryMask& mask, Connectivity connectivity);

// One mask per (class, connected component); plus a union mask when two or
// more classes are present and their union is a single component.
std::vector<MaskInstance> split_mask(const LabelMap& label_map, const CurationConfig& config,
                                     const std::string& image_id = "");

// Keep iff area / (h * w) > min_area / target_size^2, compared exactly.
bool filter_small(const BinaryMask& mask, int image_h, int image_w, int min_area_pixels = 100, int target_size = 256);

// Geometry applied by resize_sample and its inverse on continuous pixel
// coordinates (pixel centers at integer positions).
struct SampleTransform {
    enum class Kind { identity, pad, resize };
    Kind kind = Kind::identity;
    int original_h = 0;
    int original_w = 0;
    int target = 0;
    int pad_top = 0;
    int pad_left = 0;

    std::array<double, 2> to_model(double x, double y) const;
    std::array<double, 2> to_original(double x, double y) const;

    nlohmann::json to_json() const;
    static SampleTransform from_json(const nlohmann::json& j);
};

SampleTransform make_transform(int h, int w, int target);

Image resize_image(const Image& image, const SampleTransform& transform);
BinaryMask resize_mask(const BinaryMask& mask, const SampleTransform& transform);
// Resamples a mask from model space back onto the original raster.
BinaryMask mask_to_original(const BinaryMask& model_mask, const SampleTransform& transform);

struct ResizedSample {
    Image image;
    std::vector<MaskInstance> masks; // survivors, in input order
    std::vector<std::string> dropped_mask_ids;
    SampleTransform transform;
};

// Zero-pads symmetrically when both edges are below target (extra pixel on
// the bottom/right), bilinear-resizes otherwise. Masks use nearest sampling.
ResizedSample resize_sample(const Image& image, const std::vector<MaskInstance>& masks, int target);

struct MaskRecord {
    std::string mask_id;
    std::string path;
    std::string label;
    bool is_union = false;
};

struct ManifestRecord {
    std::string image_id;
    std::string image_path;
    std::vector<MaskRecord> masks;
    std::string modality;
    std::string anatomy;
    std::string organ;
    Split split = Split::train;
};

struct DatasetManifest {
    std::vector<ManifestRecord> records;
    std::filesystem::path root; // directory that relative paths resolve against

    std::map<std::string, std::size_t> modality_counts() const;
    std::map<std::string, std::size_t> anatomy_counts() const;
    std::size_t mask_count() const;

    nlohmann::json to_json() const;
    static DatasetManifest from_json(const nlohmann::json& j, std::filesystem::path root = {});
    static DatasetManifest load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;
};

// Assigns train/test by shuffling image ids under the seed; records already
// tagged holdout are left alone. |train| = round(ratio * N).
DatasetManifest split_train_test(const DatasetManifest& manifest, std::uint64_t seed, double ratio);

struct CountPair {
    std::size_t images = 0;
    std::size_t masks = 0;
};

struct DatasetStats {
    std::map<std::string, CountPair> by_modality;
    std::map<std::string, CountPair> by_anatomy;
    CountPair total;

    nlohmann::json to_json() const;
};

DatasetStats compute_stats(const DatasetManifest& manifest);

// ---------------------------------------------------------------------------
// Raw input containers (JSON sidecar + raw array / PNG)

struct SourceItem {
    std::string name;
    std::string modality;
    std::string anatomy;
    std::string organ;
    std::map<int, std::string> class_names;
    bool is_volume = true;
    Volume3D volume;      // is_volume
    LabelVolume labels3d; // is_volume
    Image image;          // !is_volume
    LabelMap labels2d;    // !is_volume
};

// Sidecar schema:
// {"kind": "volume"|"image", "name", "modality", "anatomy", "organ",
//  "classes": {"1": "liver"}, volume: "data", "dtype", "shape": [d0,d1,d2],
//  "spacing", "labels", "label_dtype"; image: "image" (PNG) or "data" +
//  "dtype" + "shape": [h,w], and "labels" (PNG or raw with "label_dtype").}
SourceItem load_source(const std::filesystem::path& sidecar);

template <typename T>
void write_raw(const std::filesystem::path& path, const std::vector<T>& values) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CurationError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(T)));
}

// Native 2D arrays must already lie in [0, 255].
Image native_image_from_values(const std::vector<double>& values, int h, int w, const std::string& name);

struct CurationSummary {
    DatasetManifest manifest;
    DatasetStats stats;
    std::size_t slices_seen = 0;
    std::size_t slices_discarded_aspect = 0;
    std::size_t masks_discarded_small = 0;
    std::size_t masks_dropped_resize = 0;
};

// Curates one source into records (image ids are name-prefixed) and writes
// images/ and masks/ beneath out_dir.
std::vector<ManifestRecord> curate_source(const SourceItem& item, const CurationConfig& config,
                                          const std::filesystem::path& out_dir, CurationSummary* summary = nullptr);

// Full pipeline over every *.json sidecar in in_dir; writes manifest.json
// and stats.json to out_dir.
CurationSummary curate_directory(const std::filesystem::path& in_dir, const std::filesystem::path& out_dir,
                                 const CurationConfig& config);

} // namespace sammed::data
