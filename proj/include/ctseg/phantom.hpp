#pragma once

// Synthetic chest CT phantoms with exact lung and lesion ground truth.
//
// A body ellipsoid (~40 HU) sits on air (-1000 HU) and contains two lung
// ellipsoids (~-700 HU). Lesions are ellipsoidal blobs seeded inside the
// lung; every lung voxel is ranked by its normalised distance to the nearest
// blob and, slice by slice, the closest round(pi * lung/100) voxels become
// lesion. That grows the union of blobs until each slice reaches the target
// infection percentage, so the voxel-level and the per-slice-mean PI both
// track the target. Lesion voxels take their blob's HU in [-300, 100].

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctseg/parallel.hpp"
#include "ctseg/volume_io.hpp"

namespace ctseg {

struct PhantomSpec {
    Dims3 dims{64, 64, 16};
    Spacing3 spacing{1.0, 1.0, 2.0};
    double target_pi = 0.0;
    int min_lesions = 2;
    int max_lesions = 6;
    double noise_sigma = 20.0;
    std::uint64_t seed = 0;

    void validate() const {
        require(dims.nx >= 16 && dims.ny >= 16 && dims.nz >= 16, ErrorCode::InvalidSpec,
                "phantom dims must be >= 16 per axis");
        require(spacing.valid(), ErrorCode::InvalidSpacing, "phantom spacing must be positive");
        require(target_pi >= 0.0 && target_pi <= 100.0, ErrorCode::InvalidSpec,
                "target_pi must lie in [0,100]");
        require(min_lesions >= 1 && min_lesions <= max_lesions, ErrorCode::InvalidSpec,
                "lesion_count_range must satisfy 1 <= min <= max");
        require(noise_sigma >= 0.0 && std::isfinite(noise_sigma), ErrorCode::InvalidSpec,
                "noise_sigma must be non-negative");
    }
};

struct PhantomSample {
    Volume volume;
    MaskVolume lung_mask;
    MaskVolume lesion_mask;
    double realized_pi = 0.0;
};

inline constexpr double kPiTolerance = 2.0;

// Lungs are cut flat at 80% of their axial semi-axis so no slice holds only a
// sliver of lung, keeping per-slice PI close to the volume target.
inline constexpr double kLungCap = 0.8;

/// 100 * |lesion| / |lung| over the whole volume; 0 when there is no lung.
inline double infection_percentage(const MaskVolume& lung, const MaskVolume& lesion) {
    require(lung.dims == lesion.dims, ErrorCode::ShapeMismatch, "lung and lesion dims differ");
    std::uint64_t nl = 0, ni = 0;
    for (std::size_t i = 0; i < lung.voxels.size(); ++i) {
        nl += lung.voxels[i];
        ni += lesion.voxels[i];
    }
    return nl ? 100.0 * static_cast<double>(ni) / static_cast<double>(nl) : 0.0;
}

namespace detail {

struct Ellipsoid {
    double cx, cy, cz, ax, ay, az;

    [[nodiscard]] double distance(double u, double v, double w) const {
        const double dx = (u - cx) / ax, dy = (v - cy) / ay, dz = (w - cz) / az;
        return std::sqrt(dx * dx + dy * dy + dz * dz);
    }
};

inline double normalized(std::size_t i, std::uint32_t n) {
    return (static_cast<double>(i) + 0.5) / n * 2.0 - 1.0;
}

}  // namespace detail

inline PhantomSample generate_phantom(const PhantomSpec& spec) {
    spec.validate();
    using detail::Ellipsoid;
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> jitter(-1.0, 1.0);
    const Dims3 d = spec.dims;

    const Ellipsoid body{0, 0, 0, 0.9 * (1 + 0.03 * jitter(rng)), 0.75 * (1 + 0.03 * jitter(rng)), 1.4};
    std::vector<Ellipsoid> lungs;
    for (double side : {-1.0, 1.0})
        lungs.push_back({side * (0.4 + 0.03 * jitter(rng)), -0.05 + 0.03 * jitter(rng), 0.03 * jitter(rng),
                         0.3 * (1 + 0.06 * jitter(rng)), 0.55 * (1 + 0.06 * jitter(rng)),
                         0.85 * (1 + 0.06 * jitter(rng))});

    PhantomSample s;
    s.volume = Volume(d, spec.spacing, -1000);
    s.lung_mask = MaskVolume(d, spec.spacing, 0);
    s.lesion_mask = MaskVolume(d, spec.spacing, 0);

    std::vector<std::size_t> lung_voxels;
    for (std::size_t z = 0; z < d.nz; ++z)
        for (std::size_t y = 0; y < d.ny; ++y)
            for (std::size_t x = 0; x < d.nx; ++x) {
                const double u = detail::normalized(x, d.nx), v = detail::normalized(y, d.ny),
                             w = detail::normalized(z, d.nz);
                const std::size_t idx = s.volume.index(x, y, z);
                if (body.distance(u, v, w) <= 1.0) s.volume.voxels[idx] = 40;
                for (const auto& l : lungs)
                    if (l.distance(u, v, w) <= 1.0 && std::abs(w - l.cz) <= kLungCap * l.az) {
                        s.volume.voxels[idx] = -700;
                        s.lung_mask.voxels[idx] = 1;
                        lung_voxels.push_back(idx);
                        break;
                    }
            }

    if (spec.target_pi > 0.0) {
        if (lung_voxels.empty())
            fail(ErrorCode::UnreachableTarget, "phantom has no lung voxels to infect");
        std::uniform_int_distribution<int> count_dist(spec.min_lesions, spec.max_lesions);
        std::uniform_int_distribution<std::size_t> voxel_dist(0, lung_voxels.size() - 1);
        std::uniform_real_distribution<double> axis_dist(0.06, 0.18);
        std::uniform_int_distribution<int> hu_dist(-300, 100);
        struct Blob {
            Ellipsoid shape;
            std::int16_t hu;
        };
        std::vector<Blob> blobs(static_cast<std::size_t>(count_dist(rng)));
        for (auto& b : blobs) {
            const std::size_t idx = lung_voxels[voxel_dist(rng)];
            const std::size_t x = idx % d.nx, y = (idx / d.nx) % d.ny, z = idx / d.slice_count();
            b.shape = {detail::normalized(x, d.nx), detail::normalized(y, d.ny), detail::normalized(z, d.nz),
                       axis_dist(rng), axis_dist(rng), axis_dist(rng)};
            b.hu = static_cast<std::int16_t>(hu_dist(rng));
        }

        struct Ranked {
            double distance;
            std::size_t index;
            std::int16_t hu;
        };
        std::size_t cursor = 0;
        for (std::size_t z = 0; z < d.nz; ++z) {
            std::vector<Ranked> slice;
            const std::size_t end_index = (z + 1) * d.slice_count();
            for (; cursor < lung_voxels.size() && lung_voxels[cursor] < end_index; ++cursor) {
                const std::size_t idx = lung_voxels[cursor];
                const double u = detail::normalized(idx % d.nx, d.nx),
                             v = detail::normalized((idx / d.nx) % d.ny, d.ny), w = detail::normalized(z, d.nz);
                Ranked r{std::numeric_limits<double>::infinity(), idx, 0};
                for (const auto& b : blobs) {
                    const double dist = b.shape.distance(u, v, w);
                    if (dist < r.distance) {
                        r.distance = dist;
                        r.hu = b.hu;
                    }
                }
                slice.push_back(r);
            }
            const auto k = static_cast<std::size_t>(
                std::round(spec.target_pi / 100.0 * static_cast<double>(slice.size())));
            std::sort(slice.begin(), slice.end(), [](const Ranked& a, const Ranked& b) {
                return a.distance < b.distance || (a.distance == b.distance && a.index < b.index);
            });
            for (std::size_t i = 0; i < k; ++i) {
                s.lesion_mask.voxels[slice[i].index] = 1;
                s.volume.voxels[slice[i].index] = slice[i].hu;
            }
        }
    }

    if (spec.noise_sigma > 0.0) {
        std::normal_distribution<double> noise(0.0, spec.noise_sigma);
        for (auto& hu : s.volume.voxels)
            hu = static_cast<std::int16_t>(std::clamp(std::round(hu + noise(rng)), -32768.0, 32767.0));
    }

    s.realized_pi = infection_percentage(s.lung_mask, s.lesion_mask);
    if (spec.target_pi > 0.0 && std::abs(s.realized_pi - spec.target_pi) > kPiTolerance)
        fail(ErrorCode::UnreachableTarget, "realized PI " + std::to_string(s.realized_pi) +
                                               " misses target " + std::to_string(spec.target_pi));
    return s;
}

struct ManifestEntry {
    std::string volume_path;
    std::string lung_mask_path;
    std::string lesion_mask_path;
    double realized_pi = 0.0;
    std::uint64_t seed = 0;
    std::optional<double> target_pi;
    std::optional<std::int64_t> group_id;

    bool operator==(const ManifestEntry&) const = default;
};

using Manifest = std::vector<ManifestEntry>;

inline void to_json(nlohmann::json& j, const ManifestEntry& e) {
    j = nlohmann::json{{"volume_path", e.volume_path},
                       {"lung_mask_path", e.lung_mask_path},
                       {"lesion_mask_path", e.lesion_mask_path},
                       {"realized_pi", e.realized_pi},
                       {"seed", e.seed}};
    if (e.target_pi) j["target_pi"] = *e.target_pi;
    if (e.group_id) j["group_id"] = *e.group_id;
}

inline void from_json(const nlohmann::json& j, ManifestEntry& e) {
    static const std::vector<std::string> known = {"volume_path", "lung_mask_path", "lesion_mask_path",
                                                   "realized_pi", "seed", "target_pi", "group_id"};
    for (const auto& [key, value] : j.items())
        require(std::find(known.begin(), known.end(), key) != known.end(), ErrorCode::MalformedHeader,
                "manifest entry has unknown key '" + key + "'");
    j.at("volume_path").get_to(e.volume_path);
    j.at("lung_mask_path").get_to(e.lung_mask_path);
    j.at("lesion_mask_path").get_to(e.lesion_mask_path);
    j.at("realized_pi").get_to(e.realized_pi);
    j.at("seed").get_to(e.seed);
    if (j.contains("target_pi")) e.target_pi = j.at("target_pi").get<double>();
    if (j.contains("group_id")) e.group_id = j.at("group_id").get<std::int64_t>();
}

inline void write_manifest(const Manifest& m, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) fail(ErrorCode::IoFailure, "cannot write manifest " + path.string());
    out << nlohmann::json(m).dump(2) << "\n";
    if (!out) fail(ErrorCode::IoFailure, "write failed for " + path.string());
}

inline Manifest read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::IoFailure, "cannot open manifest " + path.string());
    try {
        const auto j = nlohmann::json::parse(in);
        require(j.is_array(), ErrorCode::MalformedHeader, "manifest must be a JSON array");
        return j.get<Manifest>();
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::MalformedHeader, path.string() + ": " + e.what());
    }
}

/// Per-sample specs: sample i uses seed + i and pi_values[i % size].
inline std::vector<PhantomSpec> dataset_specs(std::size_t n, const std::vector<double>& pi_values,
                                              const PhantomSpec& templ, std::uint64_t seed) {
    require(n >= 1, ErrorCode::InvalidArgument, "dataset needs at least one sample");
    std::vector<PhantomSpec> specs(n, templ);
    for (std::size_t i = 0; i < n; ++i) {
        specs[i].seed = seed + i;
        if (!pi_values.empty()) specs[i].target_pi = pi_values[i % pi_values.size()];
        specs[i].validate();
    }
    return specs;
}

inline std::vector<PhantomSample> generate_samples(const std::vector<PhantomSpec>& specs, int jobs = 1) {
    std::vector<PhantomSample> out(specs.size());
    parallel_for(specs.size(), jobs, [&](std::size_t i) { out[i] = generate_phantom(specs[i]); });
    return out;
}

/// Generates n samples into out_dir (volume_XXX.ctv, lung_XXX.ctm,
/// lesion_XXX.ctm) and writes manifest.json with paths relative to out_dir.
inline Manifest generate_dataset(std::size_t n, const std::vector<double>& pi_values, const PhantomSpec& templ,
                                 std::uint64_t seed, const std::filesystem::path& out_dir, int jobs = 1) {
    const auto specs = dataset_specs(n, pi_values, templ, seed);
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) fail(ErrorCode::IoFailure, "cannot create " + out_dir.string() + ": " + ec.message());
    Manifest manifest(n);
    parallel_for(n, jobs, [&](std::size_t i) {
        const auto sample = generate_phantom(specs[i]);
        char tag[16];
        std::snprintf(tag, sizeof tag, "%03zu", i);
        ManifestEntry e;
        e.volume_path = std::string("volume_") + tag + ".ctv";
        e.lung_mask_path = std::string("lung_") + tag + ".ctm";
        e.lesion_mask_path = std::string("lesion_") + tag + ".ctm";
        save_volume(sample.volume, out_dir / e.volume_path);
        save_mask_volume(sample.lung_mask, out_dir / e.lung_mask_path);
        save_mask_volume(sample.lesion_mask, out_dir / e.lesion_mask_path);
        e.realized_pi = sample.realized_pi;
        e.seed = specs[i].seed;
        e.target_pi = specs[i].target_pi;
        manifest[i] = std::move(e);
    });
    write_manifest(manifest, out_dir / "manifest.json");
    return manifest;
}

/// Resolves a manifest-relative path.
inline std::filesystem::path resolve(const std::filesystem::path& manifest_path, const std::string& p) {
    const std::filesystem::path rel(p);
    return rel.is_absolute() ? rel : manifest_path.parent_path() / rel;
}

}  // namespace ctseg
