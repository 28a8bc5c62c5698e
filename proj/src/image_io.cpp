#include "sammed/image.hpp"

#include <png.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <memory>

namespace sammed {

std::size_t BinaryMask::area() const {
    std::size_t n = 0;
    for (auto b : bits) n += b != 0;
    return n;
}

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ImageIoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct PngWriteState {
    std::vector<std::uint8_t>* out;
};

void png_write_to_vector(png_structp png, png_bytep data, png_size_t length) {
    auto* state = static_cast<PngWriteState*>(png_get_io_ptr(png));
    state->out->insert(state->out->end(), data, data + length);
}

void png_flush_noop(png_structp) {}

[[noreturn]] void png_error_throw(png_structp, png_const_charp msg) { throw ImageIoError(std::string("png: ") + msg); }

void png_warning_ignore(png_structp, png_const_charp) {}

// Low-level writer; bit_depth 1 packs 0/1 samples eight to a byte.
std::vector<std::uint8_t> encode_png_raw(int width, int height, int color_type, int bit_depth,
                                         const std::vector<std::vector<std::uint8_t>>& rows) {
    std::vector<std::uint8_t> out;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_throw, png_warning_ignore);
    if (!png) throw ImageIoError("png: cannot create write struct");
    png_infop info = png_create_info_struct(png);
    struct Cleanup {
        png_structp* p;
        png_infop* i;
        ~Cleanup() { png_destroy_write_struct(p, i); }
    } cleanup{&png, &info};
    PngWriteState state{&out};
    png_set_write_fn(png, &state, png_write_to_vector, png_flush_noop);
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth, color_type,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (const auto& row : rows) png_write_row(png, const_cast<png_bytep>(row.data()));
    png_write_end(png, nullptr);
    return out;
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ImageIoError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

} // namespace

Image decode_png(std::span<const std::uint8_t> bytes) {
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
        throw ImageIoError(std::string("png decode failed: ") + img.message);
    const bool color = (img.format & PNG_FORMAT_FLAG_COLOR) != 0;
    img.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    Image out(static_cast<int>(img.height), static_cast<int>(img.width), color ? 3 : 1);
    if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
        std::string msg = img.message;
        png_image_free(&img);
        throw ImageIoError("png decode failed: " + msg);
    }
    return out;
}

Image read_png(const std::filesystem::path& path) {
    auto bytes = read_file(path);
    try {
        return decode_png(bytes);
    } catch (const ImageIoError& e) {
        throw ImageIoError(path.string() + ": " + e.what());
    }
}

std::vector<std::uint8_t> encode_png(const Image& image) {
    if (image.channels != 1 && image.channels != 3) throw ImageIoError("png encode: only 1 or 3 channels supported");
    std::vector<std::vector<std::uint8_t>> rows(image.height);
    const std::size_t stride = static_cast<std::size_t>(image.width) * image.channels;
    for (int y = 0; y < image.height; ++y)
        rows[y].assign(image.pixels.begin() + static_cast<std::ptrdiff_t>(y * stride),
                       image.pixels.begin() + static_cast<std::ptrdiff_t>((y + 1) * stride));
    return encode_png_raw(image.width, image.height, image.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, 8,
                          rows);
}

void write_png(const std::filesystem::path& path, const Image& image) { write_file(path, encode_png(image)); }

void write_mask_png(const std::filesystem::path& path, const BinaryMask& mask) {
    std::vector<std::vector<std::uint8_t>> rows(mask.height);
    for (int y = 0; y < mask.height; ++y) {
        auto& row = rows[y];
        row.assign((mask.width + 7) / 8, 0);
        for (int x = 0; x < mask.width; ++x)
            if (mask.at(y, x)) row[x / 8] |= static_cast<std::uint8_t>(0x80 >> (x % 8));
    }
    write_file(path, encode_png_raw(mask.width, mask.height, PNG_COLOR_TYPE_GRAY, 1, rows));
}

BinaryMask read_mask_png(const std::filesystem::path& path) {
    Image img = read_png(path);
    BinaryMask mask(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) mask.at(y, x) = img.at(y, x, 0) != 0;
    return mask;
}

LabelMap read_label_png(const std::filesystem::path& path) {
    Image img = read_png(path);
    LabelMap map(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) map.at(y, x) = img.at(y, x, 0);
    return map;
}

Image to_grayscale(const Image& image) {
    if (image.channels == 1) return image;
    Image out(image.height, image.width, 1);
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x) {
            int s = 0;
            for (int c = 0; c < image.channels; ++c) s += image.at(y, x, c);
            out.at(y, x) = static_cast<std::uint8_t>((s + image.channels / 2) / image.channels);
        }
    return out;
}

} // namespace sammed
