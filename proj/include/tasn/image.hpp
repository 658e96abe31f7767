#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "tensor.hpp"
#include "tnsr.hpp"

namespace tasn {

/// Planar (channel-major) image with values in [0, 1]; 1 or 3 channels,
/// at least 2×2.
class ImageBuffer {
  public:
    ImageBuffer(std::size_t height, std::size_t width, std::size_t channels, std::vector<double> values)
        : height_(height), width_(width), channels_(channels), values_(std::move(values)) {
        if (channels_ != 1 && channels_ != 3) throw ShapeError("ImageBuffer: channels must be 1 or 3");
        if (height_ < 2 || width_ < 2) throw ShapeError("ImageBuffer: image must be at least 2x2");
        if (values_.size() != height_ * width_ * channels_) throw ShapeError("ImageBuffer: value count mismatch");
        for (double v : values_) {
            if (!(v >= 0.0 && v <= 1.0)) throw DomainError("ImageBuffer: values must lie in [0, 1]");
        }
    }

    static ImageBuffer filled(std::size_t height, std::size_t width, std::size_t channels, double value) {
        return ImageBuffer(height, width, channels, std::vector<double>(height * width * channels, value));
    }

    std::size_t height() const noexcept { return height_; }
    std::size_t width() const noexcept { return width_; }
    std::size_t channels() const noexcept { return channels_; }
    std::span<const double> values() const noexcept { return values_; }

    double at(std::size_t c, std::size_t y, std::size_t x) const { return values_[(c * height_ + y) * width_ + x]; }

    /// c×h×w tensor of the raw values.
    Tensor to_tensor() const { return Tensor({channels_, height_, width_}, values_); }

    friend bool operator==(const ImageBuffer&, const ImageBuffer&) = default;

  private:
    std::size_t height_, width_, channels_;
    std::vector<double> values_;
};

namespace detail {

inline std::size_t read_pnm_number(std::span<const std::uint8_t> bytes, std::size_t& pos) {
    for (;;) {
        while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
        if (pos < bytes.size() && bytes[pos] == '#') {
            while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            continue;
        }
        break;
    }
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) throw FormatError("PNM: malformed header");
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
        v = v * 10 + (bytes[pos] - '0');
        if (v > (1u << 24)) throw FormatError("PNM: header value too large");
        ++pos;
    }
    return v;
}

}  // namespace detail

/// Binary PGM (P5) or PPM (P6) with maxval <= 255, mapped linearly to [0, 1].
inline ImageBuffer decode_pnm(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
        throw FormatError("PNM: expected P5 or P6 magic");
    }
    const std::size_t channels = bytes[1] == '5' ? 1 : 3;
    std::size_t pos = 2;
    const std::size_t width = detail::read_pnm_number(bytes, pos);
    const std::size_t height = detail::read_pnm_number(bytes, pos);
    const std::size_t maxval = detail::read_pnm_number(bytes, pos);
    if (maxval == 0 || maxval > 255) throw FormatError("PNM: only 8-bit maxval is supported");
    if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError("PNM: malformed header");
    ++pos;
    const std::size_t n = width * height * channels;
    if (bytes.size() - pos < n) throw FormatError("PNM: truncated pixel data");
    std::vector<double> values(n);
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x)
            for (std::size_t c = 0; c < channels; ++c) {
                const std::uint8_t raw = bytes[pos + (y * width + x) * channels + c];
                values[(c * height + y) * width + x] = std::min(1.0, raw / static_cast<double>(maxval));
            }
    return ImageBuffer(height, width, channels, std::move(values));
}

inline std::vector<std::uint8_t> encode_pnm(const ImageBuffer& img) {
    const std::string header = std::string(img.channels() == 1 ? "P5" : "P6") + "\n" + std::to_string(img.width()) +
                               " " + std::to_string(img.height()) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.reserve(out.size() + img.values().size());
    for (std::size_t y = 0; y < img.height(); ++y)
        for (std::size_t x = 0; x < img.width(); ++x)
            for (std::size_t c = 0; c < img.channels(); ++c) {
                out.push_back(static_cast<std::uint8_t>(std::lround(img.at(c, y, x) * 255.0)));
            }
    return out;
}

inline ImageBuffer read_pnm(const std::filesystem::path& path) { return decode_pnm(read_file_bytes(path)); }

inline void write_pnm(const std::filesystem::path& path, const ImageBuffer& img) {
    write_file_atomic(path, encode_pnm(img));
}

}  // namespace tasn
