#pragma once

// CT volume containers, the CTV1/CTM1 binary formats, HU windowing,
// slice resizing and binary PGM slice files.
//
// CTV1 layout (all little-endian):
//   "CTV1" | nx ny nz (u32) | sx sy sz (f64) | nx*ny*nz x i16 HU, x fastest
// CTM1 uses the same 40-byte header with a u8 {0,1} payload.

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "ctseg/error.hpp"

namespace ctseg {

struct Dims3 {
    std::uint32_t nx = 0;
    std::uint32_t ny = 0;
    std::uint32_t nz = 0;

    [[nodiscard]] std::size_t count() const {
        return static_cast<std::size_t>(nx) * ny * nz;
    }
    [[nodiscard]] std::size_t slice_count() const { return static_cast<std::size_t>(nx) * ny; }
    [[nodiscard]] bool empty() const { return nx == 0 || ny == 0 || nz == 0; }
    bool operator==(const Dims3&) const = default;
};

/// Voxel spacing in millimetres.
struct Spacing3 {
    double sx = 1.0;
    double sy = 1.0;
    double sz = 1.0;

    [[nodiscard]] bool valid() const {
        return std::isfinite(sx) && std::isfinite(sy) && std::isfinite(sz) && sx > 0 &&
               sy > 0 && sz > 0;
    }
    bool operator==(const Spacing3&) const = default;
};

/// Dense 3D grid with x-fastest ordering, shared by HU volumes and masks.
template <typename Voxel>
struct Grid3 {
    Dims3 dims;
    Spacing3 spacing;
    std::vector<Voxel> voxels;

    Grid3() = default;
    Grid3(Dims3 d, Spacing3 s, Voxel fill = Voxel{})
        : dims(d), spacing(s), voxels(d.count(), fill) {}

    [[nodiscard]] std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
        return (z * dims.ny + y) * dims.nx + x;
    }
    Voxel& at(std::size_t x, std::size_t y, std::size_t z) { return voxels[index(x, y, z)]; }
    [[nodiscard]] const Voxel& at(std::size_t x, std::size_t y, std::size_t z) const {
        return voxels[index(x, y, z)];
    }

    void validate() const {
        require(!dims.empty(), ErrorCode::InvalidDims, "volume has a zero dimension");
        require(spacing.valid(), ErrorCode::InvalidSpacing, "spacing must be strictly positive");
        require(voxels.size() == dims.count(), ErrorCode::InvalidDims,
                "voxel count does not match dims");
    }

    bool operator==(const Grid3&) const = default;
};

/// Signed 16-bit Hounsfield-unit volume.
using Volume = Grid3<std::int16_t>;
/// Per-voxel {0,1} label volume (lung or lesion).
using MaskVolume = Grid3<std::uint8_t>;

struct WindowSpec {
    double lo = -1350.0;
    double hi = 150.0;

    void validate() const {
        require(std::isfinite(lo) && std::isfinite(hi) && hi > lo, ErrorCode::InvalidArgument,
                "window requires hi > lo");
    }
};

struct GrayTag {};
struct MaskTag {};

/// Row-major 2D image. The tag keeps 8-bit intensity slices and binary masks
/// from being mixed up at compile time.
template <typename Tag>
struct Image2D {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;

    static constexpr bool is_mask = std::is_same_v<Tag, MaskTag>;

    Image2D() = default;
    Image2D(int w, int h, std::uint8_t fill = 0)
        : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill) {}

    [[nodiscard]] std::size_t size() const { return pixels.size(); }
    std::uint8_t& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
    [[nodiscard]] std::uint8_t at(int x, int y) const {
        return pixels[static_cast<std::size_t>(y) * width + x];
    }
    [[nodiscard]] bool same_dims(int w, int h) const { return width == w && height == h; }
    template <typename Other>
    [[nodiscard]] bool same_dims(const Image2D<Other>& o) const {
        return width == o.width && height == o.height;
    }

    bool operator==(const Image2D&) const = default;
};

using NormalizedSlice = Image2D<GrayTag>;
using BinaryMask = Image2D<MaskTag>;

inline std::size_t count_foreground(const BinaryMask& m) {
    return static_cast<std::size_t>(std::count(m.pixels.begin(), m.pixels.end(), 1));
}

namespace detail {

inline constexpr std::size_t kVolumeHeaderBytes = 40;

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline std::uint32_t get_u32(const std::uint8_t* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
}
inline std::uint64_t get_u64(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::IoFailure, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::IoFailure, "cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorCode::IoFailure, "write failed for " + path.string());
}

inline std::vector<std::uint8_t> encode_header(std::string_view magic, Dims3 d, Spacing3 s) {
    std::vector<std::uint8_t> out;
    out.reserve(kVolumeHeaderBytes);
    out.insert(out.end(), magic.begin(), magic.end());
    put_u32(out, d.nx);
    put_u32(out, d.ny);
    put_u32(out, d.nz);
    put_u64(out, std::bit_cast<std::uint64_t>(s.sx));
    put_u64(out, std::bit_cast<std::uint64_t>(s.sy));
    put_u64(out, std::bit_cast<std::uint64_t>(s.sz));
    return out;
}

struct Header {
    Dims3 dims;
    Spacing3 spacing;
};

inline Header decode_header(const std::vector<std::uint8_t>& bytes, std::string_view magic,
                            const std::string& what) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), magic.data(), 4) != 0)
        fail(ErrorCode::BadMagic, what + " is not a " + std::string(magic) + " file");
    if (bytes.size() < kVolumeHeaderBytes)
        fail(ErrorCode::TruncatedPayload, what + " header is truncated");
    const std::uint8_t* p = bytes.data() + 4;
    Header h;
    h.dims = {get_u32(p), get_u32(p + 4), get_u32(p + 8)};
    h.spacing = {std::bit_cast<double>(get_u64(p + 12)), std::bit_cast<double>(get_u64(p + 20)),
                 std::bit_cast<double>(get_u64(p + 28))};
    require(!h.dims.empty(), ErrorCode::InvalidDims, what + " declares a zero dimension");
    require(h.spacing.valid(), ErrorCode::InvalidSpacing, what + " declares non-positive spacing");
    return h;
}

}  // namespace detail

/// Encodes a volume into CTV1 bytes.
inline std::vector<std::uint8_t> encode_volume(const Volume& v) {
    v.validate();
    auto out = detail::encode_header("CTV1", v.dims, v.spacing);
    out.reserve(out.size() + 2 * v.voxels.size());
    for (std::int16_t hu : v.voxels) {
        const auto u = static_cast<std::uint16_t>(hu);
        out.push_back(static_cast<std::uint8_t>(u & 0xFF));
        out.push_back(static_cast<std::uint8_t>(u >> 8));
    }
    return out;
}

inline Volume decode_volume(const std::vector<std::uint8_t>& bytes,
                            const std::string& what = "volume") {
    const auto h = detail::decode_header(bytes, "CTV1", what);
    const std::size_t n = h.dims.count();
    if (bytes.size() != detail::kVolumeHeaderBytes + 2 * n)
        fail(ErrorCode::TruncatedPayload,
             what + ": payload is " + std::to_string(bytes.size() - detail::kVolumeHeaderBytes) +
                 " bytes, header requires " + std::to_string(2 * n));
    Volume v;
    v.dims = h.dims;
    v.spacing = h.spacing;
    v.voxels.resize(n);
    const std::uint8_t* p = bytes.data() + detail::kVolumeHeaderBytes;
    for (std::size_t i = 0; i < n; ++i) {
        const auto u = static_cast<std::uint16_t>(p[2 * i] | (p[2 * i + 1] << 8));
        v.voxels[i] = static_cast<std::int16_t>(u);
    }
    return v;
}

inline std::vector<std::uint8_t> encode_mask_volume(const MaskVolume& m) {
    m.validate();
    auto out = detail::encode_header("CTM1", m.dims, m.spacing);
    for (std::uint8_t b : m.voxels) {
        require(b <= 1, ErrorCode::InvalidArgument, "mask voxels must be 0 or 1");
        out.push_back(b);
    }
    return out;
}

inline MaskVolume decode_mask_volume(const std::vector<std::uint8_t>& bytes,
                                     const std::string& what = "mask") {
    const auto h = detail::decode_header(bytes, "CTM1", what);
    const std::size_t n = h.dims.count();
    if (bytes.size() != detail::kVolumeHeaderBytes + n)
        fail(ErrorCode::TruncatedPayload, what + ": payload size does not match header dims");
    MaskVolume m;
    m.dims = h.dims;
    m.spacing = h.spacing;
    m.voxels.assign(bytes.begin() + detail::kVolumeHeaderBytes, bytes.end());
    for (std::uint8_t b : m.voxels)
        require(b <= 1, ErrorCode::MalformedHeader, what + ": mask payload is not binary");
    return m;
}

inline Volume load_volume(const std::filesystem::path& path) {
    return decode_volume(detail::read_file(path), path.string());
}

inline void save_volume(const Volume& v, const std::filesystem::path& path) {
    detail::write_file(path, encode_volume(v));
}

inline MaskVolume load_mask_volume(const std::filesystem::path& path) {
    return decode_mask_volume(detail::read_file(path), path.string());
}

inline void save_mask_volume(const MaskVolume& m, const std::filesystem::path& path) {
    detail::write_file(path, encode_mask_volume(m));
}

/// Maps HU to 0..255: round(255 * clamp((hu - lo) / (hi - lo), 0, 1)),
/// rounding half away from zero.
inline std::uint8_t window_pixel(double hu, const WindowSpec& w) {
    const double t = std::clamp((hu - w.lo) / (w.hi - w.lo), 0.0, 1.0);
    return static_cast<std::uint8_t>(std::round(255.0 * t));
}

inline NormalizedSlice window_normalize(const Volume& v, const WindowSpec& w, std::size_t z) {
    w.validate();
    require(z < v.dims.nz, ErrorCode::IndexOutOfRange,
            "slice " + std::to_string(z) + " outside volume depth " + std::to_string(v.dims.nz));
    NormalizedSlice s(static_cast<int>(v.dims.nx), static_cast<int>(v.dims.ny));
    const std::size_t base = z * v.dims.slice_count();
    for (std::size_t i = 0; i < s.pixels.size(); ++i)
        s.pixels[i] = window_pixel(v.voxels[base + i], w);
    return s;
}

inline BinaryMask mask_slice(const MaskVolume& m, std::size_t z) {
    require(z < m.dims.nz, ErrorCode::IndexOutOfRange, "mask slice index out of range");
    BinaryMask s(static_cast<int>(m.dims.nx), static_cast<int>(m.dims.ny));
    const std::size_t base = z * m.dims.slice_count();
    std::copy_n(m.voxels.begin() + static_cast<std::ptrdiff_t>(base), s.pixels.size(),
                s.pixels.begin());
    return s;
}

enum class ResizeMode { bilinear, nearest };

/// Resizes to size x size. Bilinear samples pixel centres with edge clamping;
/// masks only accept nearest so they stay binary.
template <typename Tag>
Image2D<Tag> resize_slice(const Image2D<Tag>& in, int size, ResizeMode mode) {
    require(size >= 1, ErrorCode::InvalidArgument, "resize target must be >= 1");
    require(in.width >= 1 && in.height >= 1, ErrorCode::InvalidDims, "cannot resize empty slice");
    if constexpr (Image2D<Tag>::is_mask) {
        require(mode == ResizeMode::nearest, ErrorCode::BilinearOnMask,
                "masks must be resized with nearest-neighbour sampling");
    }
    if (in.width == size && in.height == size) return in;

    Image2D<Tag> out(size, size);
    const double fx = static_cast<double>(in.width) / size;
    const double fy = static_cast<double>(in.height) / size;
    if (mode == ResizeMode::nearest) {
        for (int y = 0; y < size; ++y) {
            const int sy = std::min(in.height - 1, static_cast<int>(std::floor((y + 0.5) * fy)));
            for (int x = 0; x < size; ++x) {
                const int sx = std::min(in.width - 1, static_cast<int>(std::floor((x + 0.5) * fx)));
                out.at(x, y) = in.at(sx, sy);
            }
        }
        return out;
    }
    for (int y = 0; y < size; ++y) {
        const double sy = std::clamp((y + 0.5) * fy - 0.5, 0.0, in.height - 1.0);
        const int y0 = static_cast<int>(std::floor(sy));
        const int y1 = std::min(y0 + 1, in.height - 1);
        const double ty = sy - y0;
        for (int x = 0; x < size; ++x) {
            const double sx = std::clamp((x + 0.5) * fx - 0.5, 0.0, in.width - 1.0);
            const int x0 = static_cast<int>(std::floor(sx));
            const int x1 = std::min(x0 + 1, in.width - 1);
            const double tx = sx - x0;
            const double top = (1 - tx) * in.at(x0, y0) + tx * in.at(x1, y0);
            const double bottom = (1 - tx) * in.at(x0, y1) + tx * in.at(x1, y1);
            const double v = (1 - ty) * top + ty * bottom;
            out.at(x, y) = static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0));
        }
    }
    return out;
}

namespace detail {

inline std::string next_pgm_token(const std::vector<std::uint8_t>& bytes, std::size_t& pos) {
    for (;;) {
        while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
        if (pos < bytes.size() && bytes[pos] == '#') {
            while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            continue;
        }
        break;
    }
    std::string tok;
    while (pos < bytes.size() && !std::isspace(bytes[pos]) && bytes[pos] != '#')
        tok.push_back(static_cast<char>(bytes[pos++]));
    return tok;
}

inline int parse_pgm_int(const std::string& tok, const std::string& what) {
    if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](char c) { return std::isdigit(c); }))
        fail(ErrorCode::MalformedHeader, what + ": bad PGM header field '" + tok + "'");
    return std::stoi(tok);
}

inline NormalizedSlice decode_pgm(const std::vector<std::uint8_t>& bytes, const std::string& what) {
    std::size_t pos = 0;
    if (next_pgm_token(bytes, pos) != "P5")
        fail(ErrorCode::MalformedHeader, what + ": only binary P5 PGM is supported");
    const int w = parse_pgm_int(next_pgm_token(bytes, pos), what);
    const int h = parse_pgm_int(next_pgm_token(bytes, pos), what);
    const int maxval = parse_pgm_int(next_pgm_token(bytes, pos), what);
    if (w <= 0 || h <= 0) fail(ErrorCode::MalformedHeader, what + ": non-positive PGM size");
    if (maxval != 255)
        fail(ErrorCode::UnsupportedMaxval, what + ": maxval " + std::to_string(maxval));
    if (pos >= bytes.size() || !std::isspace(bytes[pos]))
        fail(ErrorCode::MalformedHeader, what + ": missing separator before raster");
    ++pos;
    const std::size_t n = static_cast<std::size_t>(w) * h;
    if (bytes.size() - pos < n) fail(ErrorCode::TruncatedPayload, what + ": raster truncated");
    NormalizedSlice s(w, h);
    std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(pos), n, s.pixels.begin());
    return s;
}

inline void write_pgm_bytes(int w, int h, const std::vector<std::uint8_t>& raster,
                            const std::filesystem::path& path) {
    const std::string header = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), raster.begin(), raster.end());
    write_file(path, out);
}

}  // namespace detail

inline NormalizedSlice read_pgm(const std::filesystem::path& path) {
    return detail::decode_pgm(detail::read_file(path), path.string());
}

/// Reads a PGM mask: values >= 128 become 1.
inline BinaryMask read_pgm_mask(const std::filesystem::path& path) {
    const auto s = read_pgm(path);
    BinaryMask m(s.width, s.height);
    std::transform(s.pixels.begin(), s.pixels.end(), m.pixels.begin(),
                   [](std::uint8_t v) { return static_cast<std::uint8_t>(v >= 128 ? 1 : 0); });
    return m;
}

inline void write_pgm(const NormalizedSlice& s, const std::filesystem::path& path) {
    detail::write_pgm_bytes(s.width, s.height, s.pixels, path);
}

/// Masks are written as {0,255}.
inline void write_pgm(const BinaryMask& m, const std::filesystem::path& path) {
    std::vector<std::uint8_t> raster(m.pixels.size());
    std::transform(m.pixels.begin(), m.pixels.end(), raster.begin(),
                   [](std::uint8_t v) { return static_cast<std::uint8_t>(v ? 255 : 0); });
    detail::write_pgm_bytes(m.width, m.height, raster, path);
}

}  // namespace ctseg
