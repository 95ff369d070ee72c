#pragma once

// Boundary-face surface meshes of labelled voxel volumes, exported as ASCII
// PLY with per-vertex colours.

#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "ctseg/volume_io.hpp"

namespace ctseg {

using Rgb = std::array<std::uint8_t, 3>;

inline constexpr Rgb kLungColor{180, 180, 180};
inline constexpr Rgb kLesionColor{220, 40, 40};

struct Mesh {
    std::vector<std::array<float, 3>> vertices;
    std::vector<std::array<std::uint32_t, 3>> triangles;
    std::vector<Rgb> colors;

    [[nodiscard]] bool empty() const { return vertices.empty() && triangles.empty(); }

    [[nodiscard]] bool valid() const {
        if (colors.size() != vertices.size()) return false;
        for (const auto& t : triangles)
            for (auto i : t)
                if (i >= vertices.size()) return false;
        return true;
    }
};

/// 0 outside, 1 lung without lesion, 2 lesion.
inline std::uint8_t voxel_label(const MaskVolume& lung, const MaskVolume& lesion, std::size_t idx) {
    return lesion.voxels[idx] ? 2 : (lung.voxels[idx] ? 1 : 0);
}

/// Two triangles per voxel face whose neighbour carries a different label.
/// Vertices sit on voxel corners scaled by spacing and are shared between
/// faces of the same label; a corner touching both labels appears once per
/// colour so each vertex has a single colour.
inline Mesh voxel_surface_mesh(const MaskVolume& lung, const MaskVolume& lesion) {
    require(lung.dims == lesion.dims, ErrorCode::ShapeMismatch, "lung and lesion dims differ");
    for (std::size_t i = 0; i < lung.voxels.size(); ++i)
        require(!lesion.voxels[i] || lung.voxels[i], ErrorCode::SubsetViolation,
                "lesion voxel outside the lung at index " + std::to_string(i));

    const Dims3 d = lung.dims;
    const Spacing3 sp = lung.spacing;
    Mesh mesh;
    std::unordered_map<std::uint64_t, std::uint32_t> vertex_ids;
    auto vertex = [&](std::size_t x, std::size_t y, std::size_t z, std::uint8_t label) {
        const std::uint64_t key = (static_cast<std::uint64_t>(x) << 42) | (static_cast<std::uint64_t>(y) << 22) |
                                  (static_cast<std::uint64_t>(z) << 2) | label;
        auto [it, inserted] = vertex_ids.try_emplace(key, static_cast<std::uint32_t>(mesh.vertices.size()));
        if (inserted) {
            mesh.vertices.push_back({static_cast<float>(x * sp.sx), static_cast<float>(y * sp.sy),
                                     static_cast<float>(z * sp.sz)});
            mesh.colors.push_back(label == 2 ? kLesionColor : kLungColor);
        }
        return it->second;
    };

    const std::array<std::size_t, 3> extent{d.nx, d.ny, d.nz};
    for (std::size_t z = 0; z < d.nz; ++z)
        for (std::size_t y = 0; y < d.ny; ++y)
            for (std::size_t x = 0; x < d.nx; ++x) {
                const std::uint8_t label = voxel_label(lung, lesion, lung.index(x, y, z));
                if (!label) continue;
                const std::array<std::size_t, 3> p{x, y, z};
                for (int axis = 0; axis < 3; ++axis)
                    for (int side : {-1, 1}) {
                        std::uint8_t neighbour = 0;
                        if (!(side < 0 && p[axis] == 0) && !(side > 0 && p[axis] + 1 == extent[axis])) {
                            auto q = p;
                            q[axis] = side < 0 ? q[axis] - 1 : q[axis] + 1;
                            neighbour = voxel_label(lung, lesion, lung.index(q[0], q[1], q[2]));
                        }
                        if (neighbour == label) continue;
                        // Corners base, +u, +u+v, +v have normal u x v = +axis.
                        const int u = (axis + 1) % 3, v = (axis + 2) % 3;
                        auto base = p;
                        if (side > 0) ++base[axis];
                        std::array<std::array<std::size_t, 3>, 4> c{base, base, base, base};
                        ++c[1][u];
                        ++c[2][u];
                        ++c[2][v];
                        ++c[3][v];
                        std::array<std::uint32_t, 4> id{};
                        for (int k = 0; k < 4; ++k) id[k] = vertex(c[k][0], c[k][1], c[k][2], label);
                        if (side > 0) {
                            mesh.triangles.push_back({id[0], id[1], id[2]});
                            mesh.triangles.push_back({id[0], id[2], id[3]});
                        } else {
                            mesh.triangles.push_back({id[0], id[2], id[1]});
                            mesh.triangles.push_back({id[0], id[3], id[2]});
                        }
                    }
            }
    return mesh;
}

inline std::string encode_ply(const Mesh& mesh) {
    require(mesh.valid(), ErrorCode::InvalidArgument, "mesh has dangling indices or missing colours");
    std::string out;
    out += "ply\nformat ascii 1.0\ncomment ctseg voxel surface\n";
    out += "element vertex " + std::to_string(mesh.vertices.size()) + "\n";
    out += "property float x\nproperty float y\nproperty float z\n";
    out += "property uchar red\nproperty uchar green\nproperty uchar blue\n";
    out += "element face " + std::to_string(mesh.triangles.size()) + "\n";
    out += "property list uchar int vertex_indices\nend_header\n";
    char line[128];
    for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
        const auto& p = mesh.vertices[i];
        const auto& c = mesh.colors[i];
        std::snprintf(line, sizeof line, "%.9g %.9g %.9g %u %u %u\n", p[0], p[1], p[2], c[0], c[1], c[2]);
        out += line;
    }
    for (const auto& t : mesh.triangles) {
        std::snprintf(line, sizeof line, "3 %u %u %u\n", t[0], t[1], t[2]);
        out += line;
    }
    return out;
}

inline void write_ply(const Mesh& mesh, const std::filesystem::path& path) {
    const std::string text = encode_ply(mesh);
    detail::write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

/// Parses the ASCII subset written by write_ply (triangles only).
inline Mesh decode_ply(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    auto bad = [](const std::string& msg) { fail(ErrorCode::MalformedHeader, "PLY: " + msg); };
    if (!std::getline(in, line) || line != "ply") bad("missing 'ply' magic");
    std::size_t nv = 0, nf = 0;
    bool ascii = false;
    while (std::getline(in, line) && line != "end_header") {
        std::istringstream ls(line);
        std::string word;
        ls >> word;
        if (word == "format") {
            std::string fmt;
            ls >> fmt;
            ascii = fmt == "ascii";
        } else if (word == "element") {
            std::string kind;
            std::size_t count = 0;
            if (!(ls >> kind >> count)) bad("bad element line");
            if (kind == "vertex") nv = count;
            else if (kind == "face") nf = count;
        }
    }
    if (line != "end_header") bad("missing end_header");
    if (!ascii) bad("only ascii PLY is supported");
    Mesh mesh;
    mesh.vertices.resize(nv);
    mesh.colors.resize(nv);
    for (std::size_t i = 0; i < nv; ++i) {
        unsigned r, g, b;
        if (!(in >> mesh.vertices[i][0] >> mesh.vertices[i][1] >> mesh.vertices[i][2] >> r >> g >> b) || r > 255 ||
            g > 255 || b > 255)
            bad("truncated or invalid vertex " + std::to_string(i));
        mesh.colors[i] = {static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g), static_cast<std::uint8_t>(b)};
    }
    mesh.triangles.resize(nf);
    for (std::size_t i = 0; i < nf; ++i) {
        unsigned count;
        if (!(in >> count) || count != 3) bad("face " + std::to_string(i) + " is not a triangle");
        for (auto& idx : mesh.triangles[i])
            if (!(in >> idx)) bad("truncated face " + std::to_string(i));
    }
    if (!mesh.valid()) bad("face index out of range");
    return mesh;
}

inline Mesh read_ply(const std::filesystem::path& path) {
    const auto bytes = detail::read_file(path);
    return decode_ply(std::string(bytes.begin(), bytes.end()));
}

}  // namespace ctseg
