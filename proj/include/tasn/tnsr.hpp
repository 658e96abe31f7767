#pragma once

// "TNSR" binary tensor format:
//   'T' 'N' 'S' 'R' | version u8 (=1) | dtype u8 (0 = f32) | ndim u8 |
//   ndim × u32 LE dims | row-major f32 LE payload
// Values are stored at 32-bit and widened to double on load.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "tensor.hpp"

namespace tasn {

inline constexpr std::uint8_t kTnsrVersion = 1;
inline constexpr std::uint8_t kTnsrDtypeF32 = 0;

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}

inline std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t at) {
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(in[at + b]) << (8 * b);
    return v;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_tnsr(const Tensor& t) {
    if (t.ndim() > 255) throw FormatError("TNSR: too many dimensions");
    std::vector<std::uint8_t> out{'T', 'N', 'S', 'R', kTnsrVersion, kTnsrDtypeF32,
                                  static_cast<std::uint8_t>(t.ndim())};
    out.reserve(7 + 4 * t.ndim() + 4 * t.numel());
    for (std::size_t d : t.shape()) {
        if (d > UINT32_MAX) throw FormatError("TNSR: dimension exceeds 32 bits");
        detail::put_u32(out, static_cast<std::uint32_t>(d));
    }
    for (double v : t.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    return out;
}

/// Decode one tensor starting at `offset`; advances `offset` past it.
inline Tensor decode_tnsr(std::span<const std::uint8_t> bytes, std::size_t& offset) {
    auto need = [&](std::size_t n) {
        if (bytes.size() < offset || bytes.size() - offset < n) throw FormatError("TNSR: truncated data");
    };
    need(7);
    const auto* p = bytes.data() + offset;
    if (p[0] != 'T' || p[1] != 'N' || p[2] != 'S' || p[3] != 'R') throw FormatError("TNSR: bad magic");
    if (p[4] != kTnsrVersion) throw FormatError("TNSR: unsupported version " + std::to_string(p[4]));
    if (p[5] != kTnsrDtypeF32) throw FormatError("TNSR: unsupported dtype " + std::to_string(p[5]));
    const std::size_t ndim = p[6];
    if (ndim == 0) throw FormatError("TNSR: zero dimensions");
    offset += 7;
    need(4 * ndim);
    Shape shape(ndim);
    for (std::size_t i = 0; i < ndim; ++i) {
        shape[i] = detail::get_u32(bytes, offset);
        if (shape[i] == 0) throw FormatError("TNSR: zero-length dimension");
        offset += 4;
    }
    const std::size_t n = shape_numel(shape);
    need(4 * n);
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) {
        data[i] = static_cast<double>(std::bit_cast<float>(detail::get_u32(bytes, offset)));
        offset += 4;
    }
    Tensor t(std::move(shape), std::move(data));
    if (!t.all_finite()) throw FormatError("TNSR: non-finite value in payload");
    return t;
}

/// Decode a buffer holding exactly one tensor.
inline Tensor decode_tnsr(std::span<const std::uint8_t> bytes) {
    std::size_t offset = 0;
    Tensor t = decode_tnsr(bytes, offset);
    if (offset != bytes.size()) throw FormatError("TNSR: trailing bytes after payload");
    return t;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Write to a sibling temporary and rename over the target, so a failed
/// write never leaves a partial file behind.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("cannot open " + tmp.string() + " for writing");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) {
            out.close();
            std::filesystem::remove(tmp);
            throw FormatError("write failed for " + path.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

inline Tensor read_tnsr(const std::filesystem::path& path) { return decode_tnsr(read_file_bytes(path)); }

inline void write_tnsr(const std::filesystem::path& path, const Tensor& t) { write_file_atomic(path, encode_tnsr(t)); }

}  // namespace tasn
