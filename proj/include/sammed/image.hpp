#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sammed {

// 8-bit raster, interleaved row-major (H x W x channels).
struct Image {
    int height = 0;
    int width = 0;
    int channels = 1;
    std::vector<std::uint8_t> pixels;

    Image() = default;
    Image(int h, int w, int ch, std::uint8_t fill = 0)
        : height(h), width(w), channels(ch), pixels(static_cast<std::size_t>(h) * w * ch, fill) {}

    std::uint8_t& at(int y, int x, int c = 0) {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    std::uint8_t at(int y, int x, int c = 0) const {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    bool empty() const { return pixels.empty(); }
};

// Binary mask, row-major, one byte per pixel holding 0 or 1.
struct BinaryMask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> bits;

    BinaryMask() = default;
    BinaryMask(int h, int w) : height(h), width(w), bits(static_cast<std::size_t>(h) * w, 0) {}

    std::uint8_t& at(int y, int x) { return bits[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t at(int y, int x) const { return bits[static_cast<std::size_t>(y) * width + x]; }
    std::size_t area() const;
    bool empty() const { return area() == 0; }
    bool same_shape(const BinaryMask& other) const { return height == other.height && width == other.width; }
    friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

// Integer label raster (0 = background).
struct LabelMap {
    int height = 0;
    int width = 0;
    std::vector<std::int32_t> labels;

    LabelMap() = default;
    LabelMap(int h, int w) : height(h), width(w), labels(static_cast<std::size_t>(h) * w, 0) {}

    std::int32_t& at(int y, int x) { return labels[static_cast<std::size_t>(y) * width + x]; }
    std::int32_t at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }
};

class ImageIoError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

Image decode_png(std::span<const std::uint8_t> bytes);
Image read_png(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_png(const Image& image);
void write_png(const std::filesystem::path& path, const Image& image);

// Masks are stored as 1-bit grayscale PNG; any nonzero pixel reads back as 1.
void write_mask_png(const std::filesystem::path& path, const BinaryMask& mask);
BinaryMask read_mask_png(const std::filesystem::path& path);

// Label maps read from PNG use the first channel as the class id.
LabelMap read_label_png(const std::filesystem::path& path);

Image to_grayscale(const Image& image);

} // namespace sammed
