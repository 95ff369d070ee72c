#pragma once

// Two-stage inference: segment the lung, mask the slice with it, segment
// lesions inside the lung, then turn per-slice counts into infection
// percentages and a CT0..CT4 grade.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctseg/metrics.hpp"
#include "ctseg/models.hpp"
#include "ctseg/parallel.hpp"
#include "ctseg/volume_io.hpp"

namespace ctseg {

inline NormalizedSlice apply_lung_mask(const NormalizedSlice& slice, const BinaryMask& lung) {
    require(slice.same_dims(lung), ErrorCode::ShapeMismatch, "slice and lung mask dims differ");
    NormalizedSlice out = slice;
    for (std::size_t i = 0; i < out.pixels.size(); ++i)
        if (!lung.pixels[i]) out.pixels[i] = 0;
    return out;
}

inline BinaryMask intersect(const BinaryMask& a, const BinaryMask& b) {
    require(a.same_dims(b), ErrorCode::ShapeMismatch, "mask dims differ");
    BinaryMask out(a.width, a.height);
    for (std::size_t i = 0; i < out.pixels.size(); ++i) out.pixels[i] = (a.pixels[i] && b.pixels[i]) ? 1 : 0;
    return out;
}

struct SliceResult {
    BinaryMask lung_mask;
    BinaryMask infection_mask;
    std::uint64_t lung_pixels = 0;
    std::uint64_t infected_pixels = 0;
    bool detected = false;
    std::optional<double> pi;
};

/// Builds a result from raw predictions; the infection mask is clipped to the
/// lung before counting.
inline SliceResult make_slice_result(BinaryMask lung, const BinaryMask& infection) {
    SliceResult r;
    r.infection_mask = intersect(infection, lung);
    r.lung_mask = std::move(lung);
    r.lung_pixels = count_foreground(r.lung_mask);
    r.infected_pixels = count_foreground(r.infection_mask);
    r.detected = r.infected_pixels > 0;
    if (r.lung_pixels > 0)
        r.pi = 100.0 * static_cast<double>(r.infected_pixels) / static_cast<double>(r.lung_pixels);
    return r;
}

inline bool detect_slice(const SliceResult& r) { return r.infected_pixels > 0; }

inline std::optional<double> slice_pi(const SliceResult& r) {
    if (r.lung_pixels == 0) return std::nullopt;
    return 100.0 * static_cast<double>(r.infected_pixels) / static_cast<double>(r.lung_pixels);
}

enum class PiPolicy { lung_slices_only, all_slices };

inline std::string to_string(PiPolicy p) {
    return p == PiPolicy::lung_slices_only ? "lung_slices_only" : "all_slices";
}

inline PiPolicy parse_pi_policy(const std::string& s) {
    if (s == "lung_slices_only") return PiPolicy::lung_slices_only;
    if (s == "all_slices") return PiPolicy::all_slices;
    fail(ErrorCode::InvalidConfig, "unknown PI policy '" + s + "'");
}

inline double volume_pi(std::span<const SliceResult> results, PiPolicy policy = PiPolicy::lung_slices_only) {
    double sum = 0;
    std::size_t n = 0;
    for (const auto& r : results) {
        const auto pi = slice_pi(r);
        if (pi) {
            sum += *pi;
            ++n;
        } else if (policy == PiPolicy::all_slices) {
            ++n;
        }
    }
    if (n == 0) {
        if (policy == PiPolicy::lung_slices_only)
            fail(ErrorCode::NoLungDetected, "no slice contains lung pixels");
        fail(ErrorCode::InvalidArgument, "volume has no slices");
    }
    return sum / static_cast<double>(n);
}

/// CT0 iff nothing was detected; otherwise half-open bins of width 25 with
/// 100 folded into CT4.
inline SeverityClass classify_severity(double pi, std::uint64_t infected_pixels) {
    require(std::isfinite(pi) && pi >= 0.0 && pi <= 100.0, ErrorCode::OutOfRange,
            "volume PI must lie in [0,100]");
    require(!(pi > 0.0 && infected_pixels == 0), ErrorCode::OutOfRange,
            "positive PI with no infected pixels");
    if (infected_pixels == 0) return SeverityClass::CT0;
    if (pi < 25.0) return SeverityClass::CT1;
    if (pi < 50.0) return SeverityClass::CT2;
    if (pi < 75.0) return SeverityClass::CT3;
    return SeverityClass::CT4;
}

struct SeverityResult {
    double volume_pi = 0;
    SeverityClass severity = SeverityClass::CT0;
    std::vector<SliceResult> per_slice;
    PiPolicy policy = PiPolicy::lung_slices_only;
    std::uint64_t infected_pixels = 0;
};

inline SeverityResult grade_volume(std::vector<SliceResult> slices, PiPolicy policy = PiPolicy::lung_slices_only) {
    SeverityResult r;
    r.policy = policy;
    r.volume_pi = volume_pi(slices, policy);
    for (const auto& s : slices) r.infected_pixels += s.infected_pixels;
    r.severity = classify_severity(r.volume_pi, r.infected_pixels);
    r.per_slice = std::move(slices);
    return r;
}

/// Segmenter backed by a trained model.
template <typename T>
struct ModelSegmenter {
    const Model<T>* model;

    BinaryMask operator()(const NormalizedSlice& slice, std::size_t /*z*/) const {
        return predict_mask(*model, slice);
    }
};

/// Segmenter that returns ground truth, resized like the model input.
struct OracleSegmenter {
    const MaskVolume* truth;

    BinaryMask operator()(const NormalizedSlice& slice, std::size_t z) const {
        return resize_slice(mask_slice(*truth, z), slice.width, ResizeMode::nearest);
    }
};

/// Cascaded inference over every axial slice. Slices are independent, so
/// `jobs` only changes wall time.
template <typename LungSeg, typename LesionSeg>
std::vector<SliceResult> run_cascade(const Volume& volume, const LungSeg& lung_seg, const LesionSeg& lesion_seg,
                                     const WindowSpec& window, int size, int jobs = 1) {
    volume.validate();
    window.validate();
    std::vector<SliceResult> out(volume.dims.nz);
    parallel_for(volume.dims.nz, jobs, [&](std::size_t z) {
        const auto slice = resize_slice(window_normalize(volume, window, z), size, ResizeMode::bilinear);
        BinaryMask lung = lung_seg(slice, z);
        require(lung.same_dims(slice), ErrorCode::ShapeMismatch, "lung segmenter returned wrong dims");
        const BinaryMask lesion = lesion_seg(apply_lung_mask(slice, lung), z);
        out[z] = make_slice_result(std::move(lung), lesion);
    });
    return out;
}

template <typename T>
std::vector<SliceResult> run_cascade(const Volume& volume, const Model<T>& lung_model, const Model<T>& lesion_model,
                                     const WindowSpec& window, int jobs = 1) {
    const int size = lung_model.config().input_size;
    require(lesion_model.config().input_size == size, ErrorCode::ShapeMismatch,
            "lung and lesion models use different input sizes");
    return run_cascade(volume, ModelSegmenter<T>{&lung_model}, ModelSegmenter<T>{&lesion_model}, window, size,
                       jobs);
}

inline nlohmann::json severity_report_json(const std::string& volume_path, const SeverityResult& r) {
    nlohmann::json slices = nlohmann::json::array();
    for (std::size_t z = 0; z < r.per_slice.size(); ++z) {
        const auto& s = r.per_slice[z];
        slices.push_back({{"index", z},
                          {"lung_pixels", s.lung_pixels},
                          {"infected_pixels", s.infected_pixels},
                          {"pi", s.pi ? nlohmann::json(*s.pi) : nlohmann::json(nullptr)},
                          {"detected", s.detected}});
    }
    return {{"volume_path", volume_path},
            {"policy", to_string(r.policy)},
            {"volume_pi", r.volume_pi},
            {"severity", to_string(r.severity)},
            {"slices", std::move(slices)}};
}

}  // namespace ctseg
