#include "sammed/data_engine.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <iostream>
#include <iterator>
#include <limits>
#include <numeric>
#include <queue>
#include <random>
#include <set>
#include <sstream>

namespace sammed::data {

namespace {

std::string zero_pad(int value, int width) {
    std::string s = std::to_string(value);
    if (static_cast<int>(s.size()) < width) s.insert(0, static_cast<std::size_t>(width) - s.size(), '0');
    return s;
}

void warn(const std::string& msg) { std::cerr << "[data_engine] warning: " << msg << '\n'; }

double bilinear_sample(const Image& img, int c, double sy, double sx) {
    const auto axis = [](double s, int n, int& i0, int& i1, double& f) {
        if (s < 0) s = 0;
        i0 = static_cast<int>(std::floor(s));
        if (i0 > n - 1) i0 = n - 1;
        i1 = std::min(i0 + 1, n - 1);
        f = s - i0;
    };
    int y0, y1, x0, x1;
    double fy, fx;
    axis(sy, img.height, y0, y1, fy);
    axis(sx, img.width, x0, x1, fx);
    const double top = img.at(y0, x0, c) * (1 - fx) + img.at(y0, x1, c) * fx;
    const double bot = img.at(y1, x0, c) * (1 - fx) + img.at(y1, x1, c) * fx;
    return top * (1 - fy) + bot * fy;
}

int nearest_index(int dst, int in, int out) {
    const int s = static_cast<int>(std::floor((dst + 0.5) * in / static_cast<double>(out)));
    return std::clamp(s, 0, in - 1);
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CurationError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

template <typename T>
std::vector<double> decode_as(const std::vector<std::uint8_t>& bytes) {
    std::vector<double> out(bytes.size() / sizeof(T));
    for (std::size_t i = 0; i < out.size(); ++i) {
        T v;
        std::memcpy(&v, bytes.data() + i * sizeof(T), sizeof(T));
        out[i] = static_cast<double>(v);
    }
    return out;
}

std::vector<double> read_raw_values(const std::filesystem::path& path, const std::string& dtype, std::size_t expected) {
    auto bytes = read_bytes(path);
    std::vector<double> values;
    if (dtype == "uint8") values = decode_as<std::uint8_t>(bytes);
    else if (dtype == "int8") values = decode_as<std::int8_t>(bytes);
    else if (dtype == "uint16") values = decode_as<std::uint16_t>(bytes);
    else if (dtype == "int16") values = decode_as<std::int16_t>(bytes);
    else if (dtype == "uint32") values = decode_as<std::uint32_t>(bytes);
    else if (dtype == "int32") values = decode_as<std::int32_t>(bytes);
    else if (dtype == "float32") values = decode_as<float>(bytes);
    else if (dtype == "float64") values = decode_as<double>(bytes);
    else throw CurationError("unsupported dtype '" + dtype + "' for " + path.string());
    if (values.size() != expected)
        throw CurationError(path.string() + ": expected " + std::to_string(expected) + " values, found " +
                            std::to_string(values.size()));
    return values;
}

} // namespace

std::string to_string(Axis axis) {
    switch (axis) {
    case Axis::x: return "x";
    case Axis::y: return "y";
    case Axis::z: return "z";
    case Axis::native2d: return "2d";
    }
    return "?";
}

std::string to_string(Split split) {
    switch (split) {
    case Split::train: return "train";
    case Split::test: return "test";
    case Split::holdout: return "holdout";
    }
    return "?";
}

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "test") return Split::test;
    if (s == "holdout") return Split::holdout;
    throw CurationError("unknown split '" + s + "'");
}

const std::vector<std::string>& modality_labels() {
    static const std::vector<std::string> labels{"CT",         "MR",     "PET",          "US",
                                                 "X-ray",      "endoscopy", "dermoscopy", "fundus",
                                                 "histopathology", "microscopy"};
    return labels;
}

const std::vector<std::string>& anatomy_labels() {
    static const std::vector<std::string> labels{"head_and_neck", "thorax", "abdomen", "pelvis", "lesions"};
    return labels;
}

bool is_known_modality(const std::string& modality) {
    const auto& m = modality_labels();
    return std::find(m.begin(), m.end(), modality) != m.end();
}

void CurationConfig::validate() const {
    if (target_size < 16) throw CurationError("target_size must be >= 16");
    if (min_area_pixels < 1) throw CurationError("min_area_pixels must be >= 1");
    if (!(train_ratio > 0 && train_ratio < 1)) throw CurationError("train ratio must lie in (0, 1)");
    parse_axes(axes);
}

// ---------------------------------------------------------------------------

Volume3D normalize_volume(const Volume3D& volume) {
    const auto& v = volume.grid.voxels;
    if (v.empty()) throw CurationError("volume '" + volume.name + "' is empty");
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (double x : v) {
        if (!std::isfinite(x)) throw CurationError("volume '" + volume.name + "' contains a non-finite voxel");
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    Volume3D out = volume;
    if (hi == lo) {
        std::fill(out.grid.voxels.begin(), out.grid.voxels.end(), 0.0);
        return out;
    }
    const double range = hi - lo;
    for (double& x : out.grid.voxels) x = std::round(255.0 * (x - lo) / range);
    return out;
}

bool keep_slice_shape(int h, int w) { return 2 * std::min(h, w) >= std::max(h, w); }

std::array<int, 2> slice_shape(const std::array<int, 3>& dims, Axis axis) {
    switch (axis) {
    case Axis::x: return {dims[1], dims[2]};
    case Axis::y: return {dims[0], dims[2]};
    case Axis::z: return {dims[0], dims[1]};
    default: throw CurationError("slice_shape: native2d has no slicing axis");
    }
}

std::vector<Axis> parse_axes(const std::string& axes) {
    std::vector<Axis> out;
    for (char c : axes) {
        Axis a;
        if (c == 'x') a = Axis::x;
        else if (c == 'y') a = Axis::y;
        else if (c == 'z') a = Axis::z;
        else throw CurationError(std::string("unknown axis '") + c + "'");
        if (std::find(out.begin(), out.end(), a) == out.end()) out.push_back(a);
    }
    if (out.empty()) throw CurationError("no slicing axes enabled");
    return out;
}

namespace {

template <typename T, typename F>
void for_slice(const Grid3D<T>& g, Axis axis, int index, F&& f) {
    const auto [h, w] = slice_shape(g.dims, axis);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            switch (axis) {
            case Axis::x: f(r, c, g.at(index, r, c)); break;
            case Axis::y: f(r, c, g.at(r, index, c)); break;
            default: f(r, c, g.at(r, c, index)); break;
            }
        }
}

int axis_length(const std::array<int, 3>& dims, Axis axis) {
    return axis == Axis::x ? dims[0] : axis == Axis::y ? dims[1] : dims[2];
}

} // namespace

Image volume_slice(const Volume3D& normalized, Axis axis, int index) {
    const auto [h, w] = slice_shape(normalized.grid.dims, axis);
    Image img(h, w, 1);
    for_slice(normalized.grid, axis, index, [&](int r, int c, double v) {
        if (!(v >= 0 && v <= 255) || v != std::floor(v))
            throw CurationError("volume '" + normalized.name + "' is not normalized to 8-bit integers");
        img.at(r, c) = static_cast<std::uint8_t>(v);
    });
    return img;
}

LabelMap label_slice(const LabelVolume& labels, Axis axis, int index) {
    const auto [h, w] = slice_shape(labels.dims, axis);
    LabelMap map(h, w);
    for_slice(labels, axis, index, [&](int r, int c, std::int32_t v) { map.at(r, c) = v; });
    return map;
}

std::vector<Slice2D> extract_slices(const Volume3D& normalized, const CurationConfig& config) {
    std::vector<Slice2D> out;
    for (Axis axis : parse_axes(config.axes)) {
        const auto [h, w] = slice_shape(normalized.grid.dims, axis);
        if (!keep_slice_shape(h, w)) continue;
        const int n = axis_length(normalized.grid.dims, axis);
        for (int i = 0; i < n; ++i) {
            Slice2D s;
            s.pixels = volume_slice(normalized, axis, i);
            s.source_axis = axis;
            s.source_index = i;
            s.image_id = normalized.name + "_" + to_string(axis) + zero_pad(i, 4);
            out.push_back(std::move(s));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

std::vector<BinaryMask> connected_components(const BinaryMask& mask, Connectivity connectivity) {
    const int h = mask.height, w = mask.width;
    std::vector<int> comp(static_cast<std::size_t>(h) * w, -1);
    std::vector<BinaryMask> out;
    std::vector<std::pair<int, int>> stack;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::size_t idx = static_cast<std::size_t>(y) * w + x;
            if (!mask.bits[idx] || comp[idx] >= 0) continue;
            const int id = static_cast<int>(out.size());
            BinaryMask m(h, w);
            comp[idx] = id;
            stack.assign(1, {y, x});
            while (!stack.empty()) {
                auto [cy, cx] = stack.back();
                stack.pop_back();
                m.at(cy, cx) = 1;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        if (dy == 0 && dx == 0) continue;
                        if (connectivity == Connectivity::four && dy != 0 && dx != 0) continue;
                        const int ny = cy + dy, nx = cx + dx;
                        if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                        const std::size_t n = static_cast<std::size_t>(ny) * w + nx;
                        if (mask.bits[n] && comp[n] < 0) {
                            comp[n] = id;
                            stack.emplace_back(ny, nx);
                        }
                    }
            }
            out.push_back(std::move(m));
        }
    return out;
}

std::vector<MaskInstance> split_mask(const LabelMap& label_map, const CurationConfig& config,
                                     const std::string& image_id) {
    std::set<std::int32_t> classes;
    for (auto v : label_map.labels)
        if (v != 0) classes.insert(v);

    std::vector<MaskInstance> out;
    for (auto cls : classes) {
        BinaryMask m(label_map.height, label_map.width);
        for (std::size_t i = 0; i < m.bits.size(); ++i) m.bits[i] = label_map.labels[i] == cls;
        auto comps = connected_components(m, config.connectivity);
        for (std::size_t k = 0; k < comps.size(); ++k) {
            MaskInstance inst;
            inst.bitmap = std::move(comps[k]);
            inst.class_label = std::to_string(cls);
            inst.component_index = static_cast<int>(k);
            inst.image_id = image_id;
            inst.mask_id = image_id + "_c" + inst.class_label + "_" + zero_pad(static_cast<int>(k), 3);
            out.push_back(std::move(inst));
        }
    }
    if (classes.size() >= 2) {
        BinaryMask u(label_map.height, label_map.width);
        for (std::size_t i = 0; i < u.bits.size(); ++i) u.bits[i] = label_map.labels[i] != 0;
        auto comps = connected_components(u, config.connectivity);
        if (comps.size() == 1) {
            MaskInstance inst;
            inst.bitmap = std::move(comps[0]);
            inst.class_label = "union";
            inst.component_index = 0;
            inst.image_id = image_id;
            inst.mask_id = image_id + "_union";
            inst.is_union = true;
            out.push_back(std::move(inst));
        }
    }
    return out;
}

bool filter_small(const BinaryMask& mask, int image_h, int image_w, int min_area_pixels, int target_size) {
    if (mask.height != image_h || mask.width != image_w) throw CurationError("filter_small: mask not aligned to image");
    const std::uint64_t area = mask.area();
    const std::uint64_t target_sq = static_cast<std::uint64_t>(target_size) * target_size;
    const std::uint64_t pixels = static_cast<std::uint64_t>(image_h) * image_w;
    return area * target_sq > static_cast<std::uint64_t>(min_area_pixels) * pixels;
}

// ---------------------------------------------------------------------------

SampleTransform make_transform(int h, int w, int target) {
    if (target < 16) throw CurationError("resize target must be >= 16");
    SampleTransform t;
    t.original_h = h;
    t.original_w = w;
    t.target = target;
    if (h == target && w == target) {
        t.kind = SampleTransform::Kind::identity;
    } else if (h < target && w < target) {
        t.kind = SampleTransform::Kind::pad;
        t.pad_top = (target - h) / 2;
        t.pad_left = (target - w) / 2;
    } else {
        t.kind = SampleTransform::Kind::resize;
    }
    return t;
}

std::array<double, 2> SampleTransform::to_model(double x, double y) const {
    switch (kind) {
    case Kind::identity: return {x, y};
    case Kind::pad: return {x + pad_left, y + pad_top};
    case Kind::resize:
        return {(x + 0.5) * target / static_cast<double>(original_w) - 0.5,
                (y + 0.5) * target / static_cast<double>(original_h) - 0.5};
    }
    return {x, y};
}

std::array<double, 2> SampleTransform::to_original(double x, double y) const {
    switch (kind) {
    case Kind::identity: return {x, y};
    case Kind::pad: return {x - pad_left, y - pad_top};
    case Kind::resize:
        return {(x + 0.5) * original_w / static_cast<double>(target) - 0.5,
                (y + 0.5) * original_h / static_cast<double>(target) - 0.5};
    }
    return {x, y};
}

nlohmann::json SampleTransform::to_json() const {
    const char* k = kind == Kind::identity ? "identity" : kind == Kind::pad ? "pad" : "resize";
    return {{"kind", k},         {"original_h", original_h}, {"original_w", original_w},
            {"target", target},  {"pad_top", pad_top},       {"pad_left", pad_left}};
}

SampleTransform SampleTransform::from_json(const nlohmann::json& j) {
    SampleTransform t;
    const auto k = j.at("kind").get<std::string>();
    t.kind = k == "identity" ? Kind::identity : k == "pad" ? Kind::pad : Kind::resize;
    t.original_h = j.at("original_h");
    t.original_w = j.at("original_w");
    t.target = j.at("target");
    t.pad_top = j.value("pad_top", 0);
    t.pad_left = j.value("pad_left", 0);
    return t;
}

Image resize_image(const Image& image, const SampleTransform& t) {
    if (image.height != t.original_h || image.width != t.original_w)
        throw CurationError("resize_image: image does not match transform");
    switch (t.kind) {
    case SampleTransform::Kind::identity: return image;
    case SampleTransform::Kind::pad: {
        Image out(t.target, t.target, image.channels, 0);
        for (int y = 0; y < image.height; ++y)
            for (int x = 0; x < image.width; ++x)
                for (int c = 0; c < image.channels; ++c) out.at(y + t.pad_top, x + t.pad_left, c) = image.at(y, x, c);
        return out;
    }
    case SampleTransform::Kind::resize: {
        Image out(t.target, t.target, image.channels);
        const double sy = static_cast<double>(image.height) / t.target;
        const double sx = static_cast<double>(image.width) / t.target;
        for (int y = 0; y < t.target; ++y)
            for (int x = 0; x < t.target; ++x)
                for (int c = 0; c < image.channels; ++c) {
                    const double v = bilinear_sample(image, c, (y + 0.5) * sy - 0.5, (x + 0.5) * sx - 0.5);
                    out.at(y, x, c) = static_cast<std::uint8_t>(std::clamp<long>(std::lround(v), 0, 255));
                }
        return out;
    }
    }
    return image;
}

BinaryMask resize_mask(const BinaryMask& mask, const SampleTransform& t) {
    if (mask.height != t.original_h || mask.width != t.original_w)
        throw CurationError("resize_mask: mask does not match transform");
    switch (t.kind) {
    case SampleTransform::Kind::identity: return mask;
    case SampleTransform::Kind::pad: {
        BinaryMask out(t.target, t.target);
        for (int y = 0; y < mask.height; ++y)
            for (int x = 0; x < mask.width; ++x) out.at(y + t.pad_top, x + t.pad_left) = mask.at(y, x);
        return out;
    }
    case SampleTransform::Kind::resize: {
        BinaryMask out(t.target, t.target);
        for (int y = 0; y < t.target; ++y) {
            const int sy = nearest_index(y, mask.height, t.target);
            for (int x = 0; x < t.target; ++x) out.at(y, x) = mask.at(sy, nearest_index(x, mask.width, t.target));
        }
        return out;
    }
    }
    return mask;
}

BinaryMask mask_to_original(const BinaryMask& model_mask, const SampleTransform& t) {
    if (model_mask.height != t.target || model_mask.width != t.target)
        throw CurationError("mask_to_original: mask is not at model resolution");
    switch (t.kind) {
    case SampleTransform::Kind::identity: return model_mask;
    case SampleTransform::Kind::pad: {
        BinaryMask out(t.original_h, t.original_w);
        for (int y = 0; y < t.original_h; ++y)
            for (int x = 0; x < t.original_w; ++x) out.at(y, x) = model_mask.at(y + t.pad_top, x + t.pad_left);
        return out;
    }
    case SampleTransform::Kind::resize: {
        BinaryMask out(t.original_h, t.original_w);
        for (int y = 0; y < t.original_h; ++y) {
            const int sy = nearest_index(y, t.target, t.original_h);
            for (int x = 0; x < t.original_w; ++x) out.at(y, x) = model_mask.at(sy, nearest_index(x, t.target, t.original_w));
        }
        return out;
    }
    }
    return model_mask;
}

ResizedSample resize_sample(const Image& image, const std::vector<MaskInstance>& masks, int target) {
    ResizedSample out;
    out.transform = make_transform(image.height, image.width, target);
    out.image = resize_image(image, out.transform);
    for (const auto& m : masks) {
        MaskInstance r = m;
        r.bitmap = resize_mask(m.bitmap, out.transform);
        if (r.bitmap.empty()) {
            warn("mask '" + m.mask_id + "' is empty after resize; dropped");
            out.dropped_mask_ids.push_back(m.mask_id);
            continue;
        }
        out.masks.push_back(std::move(r));
    }
    return out;
}

// ---------------------------------------------------------------------------

std::map<std::string, std::size_t> DatasetManifest::modality_counts() const {
    std::map<std::string, std::size_t> out;
    for (const auto& m : modality_labels()) out[m] = 0;
    for (const auto& r : records) ++out[r.modality];
    return out;
}

std::map<std::string, std::size_t> DatasetManifest::anatomy_counts() const {
    std::map<std::string, std::size_t> out;
    for (const auto& a : anatomy_labels()) out[a] = 0;
    for (const auto& r : records) ++out[r.anatomy];
    return out;
}

std::size_t DatasetManifest::mask_count() const {
    std::size_t n = 0;
    for (const auto& r : records) n += r.masks.size();
    return n;
}

nlohmann::json DatasetManifest::to_json() const {
    nlohmann::json recs = nlohmann::json::array();
    for (const auto& r : records) {
        nlohmann::json masks = nlohmann::json::array();
        for (const auto& m : r.masks)
            masks.push_back({{"mask_id", m.mask_id}, {"path", m.path}, {"label", m.label}, {"union", m.is_union}});
        recs.push_back({{"image_id", r.image_id},
                        {"image_path", r.image_path},
                        {"masks", masks},
                        {"modality", r.modality},
                        {"anatomy", r.anatomy},
                        {"organ", r.organ},
                        {"split", to_string(r.split)}});
    }
    return {{"version", 1},
            {"records", recs},
            {"counts", {{"modality", modality_counts()}, {"anatomy", anatomy_counts()}}}};
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j, std::filesystem::path root) {
    DatasetManifest m;
    m.root = std::move(root);
    for (const auto& r : j.at("records")) {
        ManifestRecord rec;
        rec.image_id = r.at("image_id");
        rec.image_path = r.at("image_path");
        rec.modality = r.value("modality", "");
        rec.anatomy = r.value("anatomy", "");
        rec.organ = r.value("organ", "");
        rec.split = split_from_string(r.value("split", "train"));
        for (const auto& mk : r.at("masks")) {
            MaskRecord mr;
            mr.mask_id = mk.at("mask_id");
            mr.path = mk.at("path");
            mr.label = mk.value("label", "");
            mr.is_union = mk.value("union", false);
            rec.masks.push_back(std::move(mr));
        }
        m.records.push_back(std::move(rec));
    }
    return m;
}

DatasetManifest DatasetManifest::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw CurationError("cannot open manifest " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw CurationError("malformed manifest " + path.string() + ": " + e.what());
    }
    return from_json(j, path.parent_path());
}

void DatasetManifest::save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw CurationError("cannot write manifest " + path.string());
    out << to_json().dump(2) << '\n';
}

DatasetManifest split_train_test(const DatasetManifest& manifest, std::uint64_t seed, double ratio) {
    if (!(ratio > 0 && ratio < 1)) throw CurationError("split ratio must lie in (0, 1)");
    std::vector<std::string> ids;
    for (const auto& r : manifest.records)
        if (r.split != Split::holdout) ids.push_back(r.image_id);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    if (ids.size() < 2) throw CurationError("need at least 2 images to split");

    std::mt19937_64 rng(seed);
    std::shuffle(ids.begin(), ids.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(ids.size())));
    std::set<std::string> train(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));

    DatasetManifest out = manifest;
    for (auto& r : out.records)
        if (r.split != Split::holdout) r.split = train.count(r.image_id) ? Split::train : Split::test;
    return out;
}

nlohmann::json DatasetStats::to_json() const {
    auto table = [](const std::map<std::string, CountPair>& m) {
        nlohmann::json j = nlohmann::json::object();
        for (const auto& [k, v] : m) j[k] = {{"images", v.images}, {"masks", v.masks}};
        return j;
    };
    return {{"modality", table(by_modality)},
            {"anatomy", table(by_anatomy)},
            {"total", {{"images", total.images}, {"masks", total.masks}}}};
}

DatasetStats compute_stats(const DatasetManifest& manifest) {
    if (manifest.records.empty()) throw CurationError("compute_stats: manifest is empty");
    DatasetStats s;
    for (const auto& m : modality_labels()) s.by_modality[m] = {};
    for (const auto& a : anatomy_labels()) s.by_anatomy[a] = {};
    for (const auto& r : manifest.records) {
        auto& mod = s.by_modality[r.modality.empty() ? "unlabeled" : r.modality];
        auto& ana = s.by_anatomy[r.anatomy.empty() ? "unlabeled" : r.anatomy];
        mod.images += 1;
        mod.masks += r.masks.size();
        ana.images += 1;
        ana.masks += r.masks.size();
        s.total.images += 1;
        s.total.masks += r.masks.size();
    }
    return s;
}

// ---------------------------------------------------------------------------

Image native_image_from_values(const std::vector<double>& values, int h, int w, const std::string& name) {
    if (values.size() != static_cast<std::size_t>(h) * w) throw CurationError(name + ": shape/value count mismatch");
    Image img(h, w, 1);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double v = values[i];
        if (!std::isfinite(v) || v < 0 || v > 255)
            throw CurationError(name + ": pixel value " + std::to_string(v) + " outside [0, 255]");
        img.pixels[i] = static_cast<std::uint8_t>(std::lround(v));
    }
    return img;
}

SourceItem load_source(const std::filesystem::path& sidecar) {
    std::ifstream in(sidecar);
    if (!in) throw CurationError("cannot open sidecar " + sidecar.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw CurationError("malformed sidecar " + sidecar.string() + ": " + e.what());
    }
    const auto dir = sidecar.parent_path();
    SourceItem item;
    item.name = j.value("name", sidecar.stem().string());
    item.modality = j.value("modality", "");
    if (!is_known_modality(item.modality))
        throw CurationError(sidecar.string() + ": unknown modality '" + item.modality + "'");
    item.anatomy = j.value("anatomy", "");
    item.organ = j.value("organ", "");
    if (j.contains("classes"))
        for (const auto& [k, v] : j.at("classes").items()) item.class_names[std::stoi(k)] = v.get<std::string>();

    const auto kind = j.value("kind", "volume");
    if (kind == "volume") {
        item.is_volume = true;
        const auto shape = j.at("shape").get<std::array<int, 3>>();
        for (int d : shape)
            if (d < 1) throw CurationError(sidecar.string() + ": volume dimensions must be >= 1");
        const std::size_t n = static_cast<std::size_t>(shape[0]) * shape[1] * shape[2];
        item.volume.name = item.name;
        item.volume.modality = item.modality;
        item.volume.grid.dims = shape;
        item.volume.grid.voxels = read_raw_values(dir / j.at("data").get<std::string>(), j.value("dtype", "float32"), n);
        if (j.contains("spacing")) item.volume.spacing = j.at("spacing").get<std::array<double, 3>>();
        for (double s : item.volume.spacing)
            if (!(s > 0)) throw CurationError(sidecar.string() + ": spacing must be positive");
        item.labels3d.dims = shape;
        const auto lv = read_raw_values(dir / j.at("labels").get<std::string>(), j.value("label_dtype", "uint8"), n);
        item.labels3d.voxels.resize(n);
        for (std::size_t i = 0; i < n; ++i) item.labels3d.voxels[i] = static_cast<std::int32_t>(lv[i]);
    } else if (kind == "image") {
        item.is_volume = false;
        if (j.contains("image")) {
            item.image = to_grayscale(read_png(dir / j.at("image").get<std::string>()));
        } else {
            const auto shape = j.at("shape").get<std::array<int, 2>>();
            const auto values = read_raw_values(dir / j.at("data").get<std::string>(), j.value("dtype", "uint8"),
                                                static_cast<std::size_t>(shape[0]) * shape[1]);
            item.image = native_image_from_values(values, shape[0], shape[1], item.name);
        }
        const auto labels = j.at("labels").get<std::string>();
        if (std::filesystem::path(labels).extension() == ".png") {
            item.labels2d = read_label_png(dir / labels);
        } else {
            const auto lv = read_raw_values(dir / labels, j.value("label_dtype", "uint8"),
                                            static_cast<std::size_t>(item.image.height) * item.image.width);
            item.labels2d = LabelMap(item.image.height, item.image.width);
            for (std::size_t i = 0; i < lv.size(); ++i) item.labels2d.labels[i] = static_cast<std::int32_t>(lv[i]);
        }
        if (item.labels2d.height != item.image.height || item.labels2d.width != item.image.width)
            throw CurationError(sidecar.string() + ": label map does not match image size");
    } else {
        throw CurationError(sidecar.string() + ": unknown kind '" + kind + "'");
    }
    return item;
}

namespace {

std::optional<ManifestRecord> curate_image(const SourceItem& item, const Image& image, const LabelMap& labels,
                                           const std::string& image_id, const CurationConfig& config,
                                           const std::filesystem::path& out_dir, CurationSummary* summary) {
    auto masks = split_mask(labels, config, image_id);
    std::vector<MaskInstance> kept;
    for (auto& m : masks) {
        if (filter_small(m.bitmap, image.height, image.width, config.min_area_pixels, config.target_size)) {
            kept.push_back(std::move(m));
        } else if (summary) {
            ++summary->masks_discarded_small;
        }
    }
    if (kept.empty()) return std::nullopt;
    auto resized = resize_sample(image, kept, config.target_size);
    if (summary) summary->masks_dropped_resize += resized.dropped_mask_ids.size();
    if (resized.masks.empty()) return std::nullopt;

    ManifestRecord rec;
    rec.image_id = image_id;
    rec.image_path = "images/" + image_id + ".png";
    rec.modality = item.modality;
    rec.anatomy = item.anatomy;
    rec.organ = item.organ;
    write_png(out_dir / rec.image_path, resized.image);
    for (const auto& m : resized.masks) {
        MaskRecord mr;
        mr.mask_id = m.mask_id;
        mr.path = "masks/" + image_id + "/" + m.mask_id + ".png";
        mr.is_union = m.is_union;
        if (m.is_union) {
            mr.label = "union";
        } else {
            const int cls = std::stoi(m.class_label);
            auto it = item.class_names.find(cls);
            mr.label = it != item.class_names.end() ? it->second : m.class_label;
        }
        write_mask_png(out_dir / mr.path, m.bitmap);
        rec.masks.push_back(std::move(mr));
    }
    return rec;
}

} // namespace

std::vector<ManifestRecord> curate_source(const SourceItem& item, const CurationConfig& config,
                                          const std::filesystem::path& out_dir, CurationSummary* summary) {
    std::vector<ManifestRecord> out;
    if (!item.is_volume) {
        if (summary) ++summary->slices_seen;
        auto rec = curate_image(item, item.image, item.labels2d, item.name + "_2d", config, out_dir, summary);
        if (rec) out.push_back(std::move(*rec));
        return out;
    }
    const Volume3D normalized = normalize_volume(item.volume);
    for (Axis axis : parse_axes(config.axes)) {
        const auto [h, w] = slice_shape(normalized.grid.dims, axis);
        const int n = axis_length(normalized.grid.dims, axis);
        if (summary) summary->slices_seen += static_cast<std::size_t>(n);
        if (!keep_slice_shape(h, w)) {
            if (summary) summary->slices_discarded_aspect += static_cast<std::size_t>(n);
            continue;
        }
        for (int i = 0; i < n; ++i) {
            const std::string id = item.name + "_" + to_string(axis) + zero_pad(i, 4);
            auto rec = curate_image(item, volume_slice(normalized, axis, i), label_slice(item.labels3d, axis, i), id,
                                    config, out_dir, summary);
            if (rec) out.push_back(std::move(*rec));
        }
    }
    return out;
}

CurationSummary curate_directory(const std::filesystem::path& in_dir, const std::filesystem::path& out_dir,
                                 const CurationConfig& config) {
    config.validate();
    std::vector<std::filesystem::path> sidecars;
    for (const auto& e : std::filesystem::directory_iterator(in_dir))
        if (e.is_regular_file() && e.path().extension() == ".json") sidecars.push_back(e.path());
    std::sort(sidecars.begin(), sidecars.end());
    if (sidecars.empty()) throw CurationError("no *.json sidecars found in " + in_dir.string());
    std::filesystem::create_directories(out_dir);

    // Sources are independent; each worker fills its own summary and the
    // results are merged in sidecar order.
    struct Partial {
        std::vector<ManifestRecord> records;
        CurationSummary summary;
    };
    auto work = [&](const std::filesystem::path& p) {
        Partial part;
        part.records = curate_source(load_source(p), config, out_dir, &part.summary);
        return part;
    };
    std::vector<Partial> partials(sidecars.size());
    const std::size_t workers = static_cast<std::size_t>(std::max(1, config.workers));
    for (std::size_t start = 0; start < sidecars.size(); start += workers) {
        std::vector<std::future<Partial>> futures;
        const std::size_t end = std::min(sidecars.size(), start + workers);
        for (std::size_t i = start; i < end; ++i)
            futures.push_back(std::async(workers > 1 ? std::launch::async : std::launch::deferred, work, sidecars[i]));
        for (std::size_t i = start; i < end; ++i) partials[i] = futures[i - start].get();
    }

    CurationSummary summary;
    for (auto& p : partials) {
        for (auto& r : p.records) summary.manifest.records.push_back(std::move(r));
        summary.slices_seen += p.summary.slices_seen;
        summary.slices_discarded_aspect += p.summary.slices_discarded_aspect;
        summary.masks_discarded_small += p.summary.masks_discarded_small;
        summary.masks_dropped_resize += p.summary.masks_dropped_resize;
    }
    if (summary.manifest.records.empty()) throw CurationError("curation produced no images with valid masks");
    summary.manifest.root = out_dir;
    if (summary.manifest.records.size() >= 2)
        summary.manifest = split_train_test(summary.manifest, config.seed, config.train_ratio);
    summary.stats = compute_stats(summary.manifest);
    summary.manifest.save(out_dir / "manifest.json");
    std::ofstream stats(out_dir / "stats.json");
    stats << summary.stats.to_json().dump(2) << '\n';
    return summary;
}

} // namespace sammed::data
