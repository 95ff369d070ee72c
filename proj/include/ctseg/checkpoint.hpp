#pragma once

// CKP1 parameter checkpoints (little-endian):
//   "CKP1" | u32 tensor count | per tensor:
//     u32 name length | UTF-8 name | u32 rank | rank x u32 dims | f32 payload

#include <bit>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "ctseg/tensor.hpp"
#include "ctseg/volume_io.hpp"

namespace ctseg::ad {

struct NamedArray {
    std::string name;
    Shape shape;
    std::vector<float> values;

    bool operator==(const NamedArray&) const = default;
};

inline std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedArray>& tensors) {
    std::vector<std::uint8_t> out{'C', 'K', 'P', '1'};
    ctseg::detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        require(t.values.size() == numel(t.shape), ErrorCode::ShapeMismatch,
                "checkpoint tensor " + t.name + " has inconsistent payload");
        ctseg::detail::put_u32(out, static_cast<std::uint32_t>(t.name.size()));
        out.insert(out.end(), t.name.begin(), t.name.end());
        ctseg::detail::put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
        for (std::size_t d : t.shape) ctseg::detail::put_u32(out, static_cast<std::uint32_t>(d));
        for (float f : t.values) ctseg::detail::put_u32(out, std::bit_cast<std::uint32_t>(f));
    }
    return out;
}

inline std::vector<NamedArray> decode_checkpoint(const std::vector<std::uint8_t>& bytes,
                                                 const std::string& what = "checkpoint") {
    if (bytes.size() < 8 || std::string(bytes.begin(), bytes.begin() + 4) != "CKP1")
        fail(ErrorCode::BadMagic, what + " is not a CKP1 file");
    std::size_t pos = 4;
    auto need = [&](std::size_t n) {
        if (bytes.size() - pos < n) fail(ErrorCode::TruncatedPayload, what + " is truncated");
    };
    auto u32 = [&] {
        need(4);
        const auto v = ctseg::detail::get_u32(bytes.data() + pos);
        pos += 4;
        return v;
    };
    const std::uint32_t count = u32();
    std::vector<NamedArray> out;
    for (std::uint32_t k = 0; k < count; ++k) {
        NamedArray t;
        const std::uint32_t len = u32();
        need(len);
        t.name.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                      bytes.begin() + static_cast<std::ptrdiff_t>(pos + len));
        pos += len;
        const std::uint32_t rank = u32();
        for (std::uint32_t r = 0; r < rank; ++r) t.shape.push_back(u32());
        const std::size_t n = numel(t.shape);
        need(4 * n);
        t.values.resize(n);
        for (std::size_t i = 0; i < n; ++i) t.values[i] = std::bit_cast<float>(u32());
        out.push_back(std::move(t));
    }
    if (pos != bytes.size()) fail(ErrorCode::MalformedHeader, what + " has trailing bytes");
    return out;
}

inline void save_checkpoint(const std::vector<NamedArray>& tensors,
                            const std::filesystem::path& path) {
    ctseg::detail::write_file(path, encode_checkpoint(tensors));
}

inline std::vector<NamedArray> load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(ctseg::detail::read_file(path), path.string());
}

}  // namespace ctseg::ad
