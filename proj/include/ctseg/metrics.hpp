#pragma once

// Confusion-matrix based evaluation: pixel and slice level binary metrics,
// normal-approximation confidence intervals and one-vs-rest scoring of the
// five-class severity confusion matrix.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctseg/volume_io.hpp"

namespace ctseg {

struct ConfusionMatrix {
    std::uint64_t tp = 0;
    std::uint64_t tn = 0;
    std::uint64_t fp = 0;
    std::uint64_t fn = 0;

    [[nodiscard]] std::uint64_t total() const { return tp + tn + fp + fn; }

    void add(bool predicted, bool truth) {
        if (predicted && truth) ++tp;
        else if (predicted) ++fp;
        else if (truth) ++fn;
        else ++tn;
    }

    ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
        tp += o.tp;
        tn += o.tn;
        fp += o.fp;
        fn += o.fn;
        return *this;
    }
    friend ConfusionMatrix operator+(ConfusionMatrix a, const ConfusionMatrix& b) { return a += b; }
    bool operator==(const ConfusionMatrix&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ConfusionMatrix, tp, tn, fp, fn)

inline ConfusionMatrix pixel_confusion(const BinaryMask& pred, const BinaryMask& truth) {
    require(pred.same_dims(truth), ErrorCode::ShapeMismatch, "prediction and truth dims differ");
    ConfusionMatrix cm;
    for (std::size_t i = 0; i < pred.pixels.size(); ++i) cm.add(pred.pixels[i] != 0, truth.pixels[i] != 0);
    return cm;
}

namespace detail {

inline double ratio(std::uint64_t num, std::uint64_t den, const char* metric) {
    if (den == 0) fail(ErrorCode::DivisionByZero, std::string(metric) + " has a zero denominator");
    return static_cast<double>(num) / static_cast<double>(den);
}

inline void require_nonempty(const ConfusionMatrix& cm) {
    require(cm.total() > 0, ErrorCode::EmptyMatrix, "confusion matrix is empty");
}

}  // namespace detail

inline double accuracy(const ConfusionMatrix& cm) {
    detail::require_nonempty(cm);
    return detail::ratio(cm.tp + cm.tn, cm.total(), "accuracy");
}

/// TP / (TP + FP + FN); 1 when both masks are empty.
inline double iou(const ConfusionMatrix& cm) {
    detail::require_nonempty(cm);
    const std::uint64_t den = cm.tp + cm.fp + cm.fn;
    return den == 0 ? 1.0 : detail::ratio(cm.tp, den, "iou");
}

/// 2TP / (2TP + FP + FN); 1 when both masks are empty.
inline double dsc(const ConfusionMatrix& cm) {
    detail::require_nonempty(cm);
    const std::uint64_t den = 2 * cm.tp + cm.fp + cm.fn;
    return den == 0 ? 1.0 : detail::ratio(2 * cm.tp, den, "dsc");
}

inline double precision(const ConfusionMatrix& cm) { return detail::ratio(cm.tp, cm.tp + cm.fp, "precision"); }
inline double sensitivity(const ConfusionMatrix& cm) {
    return detail::ratio(cm.tp, cm.tp + cm.fn, "sensitivity");
}
inline double specificity(const ConfusionMatrix& cm) {
    return detail::ratio(cm.tn, cm.tn + cm.fp, "specificity");
}

/// Harmonic mean of precision and sensitivity, evaluated in counts as
/// 2TP / (2TP + FP + FN). Both constituent ratios must be defined.
inline double f1(const ConfusionMatrix& cm) {
    if (cm.tp + cm.fp == 0) fail(ErrorCode::DivisionByZero, "f1 requires a defined precision");
    if (cm.tp + cm.fn == 0) fail(ErrorCode::DivisionByZero, "f1 requires a defined sensitivity");
    return detail::ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn, "f1");
}

inline constexpr double kZ95 = 1.96;

/// Half-width z * sqrt(m (1 - m) / n) of the normal-approximation interval.
inline double confidence_interval(double metric, std::uint64_t n, double z = kZ95) {
    require(metric >= 0.0 && metric <= 1.0, ErrorCode::OutOfRange, "metric must lie in [0,1]");
    require(n >= 1, ErrorCode::OutOfRange, "sample count must be >= 1");
    return z * std::sqrt(metric * (1.0 - metric) / static_cast<double>(n));
}

struct MetricWithCI {
    double value = 0;
    std::uint64_t n = 0;
    double radius = 0;
};

inline MetricWithCI with_ci(double value, std::uint64_t n) { return {value, n, confidence_interval(value, n)}; }

inline void to_json(nlohmann::json& j, const MetricWithCI& m) {
    j = nlohmann::json{{"value", m.value}, {"ci", m.radius}, {"n", m.n}};
}

enum class SeverityClass { CT0 = 0, CT1, CT2, CT3, CT4 };
inline constexpr std::size_t kSeverityClasses = 5;

inline std::string to_string(SeverityClass c) { return "CT" + std::to_string(static_cast<int>(c)); }

/// Square count matrix; rows are true classes, columns predicted.
struct MultiClassConfusion {
    std::size_t classes = kSeverityClasses;
    std::vector<std::uint64_t> counts = std::vector<std::uint64_t>(kSeverityClasses * kSeverityClasses, 0);

    MultiClassConfusion() = default;
    explicit MultiClassConfusion(std::size_t c) : classes(c), counts(c * c, 0) {}

    std::uint64_t& at(std::size_t truth, std::size_t pred) { return counts.at(truth * classes + pred); }
    [[nodiscard]] std::uint64_t at(std::size_t truth, std::size_t pred) const {
        return counts.at(truth * classes + pred);
    }
    void add(std::size_t truth, std::size_t pred) { ++at(truth, pred); }
    [[nodiscard]] std::uint64_t total() const {
        std::uint64_t t = 0;
        for (auto c : counts) t += c;
        return t;
    }

    /// Binary matrix of class c against all others.
    [[nodiscard]] ConfusionMatrix one_vs_rest(std::size_t c) const {
        ConfusionMatrix cm;
        for (std::size_t t = 0; t < classes; ++t)
            for (std::size_t p = 0; p < classes; ++p) {
                const std::uint64_t v = at(t, p);
                if (t == c && p == c) cm.tp += v;
                else if (p == c) cm.fp += v;
                else if (t == c) cm.fn += v;
                else cm.tn += v;
            }
        return cm;
    }
};

/// Per-class scores; a ratio whose denominator is zero for that class is
/// left empty rather than invented.
struct ClassScores {
    std::optional<double> accuracy, precision, sensitivity, f1, specificity;
};

struct MultiClassScores {
    std::vector<ClassScores> per_class;
    ClassScores macro;
};

inline MultiClassScores multiclass_scores(const MultiClassConfusion& mc) {
    require(mc.total() > 0, ErrorCode::EmptyMatrix, "multiclass confusion matrix is empty");
    auto guarded = [](auto fn, const ConfusionMatrix& cm) -> std::optional<double> {
        try {
            return fn(cm);
        } catch (const Error& e) {
            if (e.code() == ErrorCode::DivisionByZero) return std::nullopt;
            throw;
        }
    };
    MultiClassScores out;
    for (std::size_t c = 0; c < mc.classes; ++c) {
        const auto cm = mc.one_vs_rest(c);
        ClassScores s;
        s.accuracy = accuracy(cm);
        s.precision = guarded(precision, cm);
        s.sensitivity = guarded(sensitivity, cm);
        s.f1 = guarded(f1, cm);
        s.specificity = guarded(specificity, cm);
        out.per_class.push_back(s);
    }
    auto macro = [&](std::optional<double> ClassScores::*field) -> std::optional<double> {
        double sum = 0;
        std::size_t n = 0;
        for (const auto& s : out.per_class)
            if (s.*field) {
                sum += *(s.*field);
                ++n;
            }
        return n ? std::optional<double>(sum / static_cast<double>(n)) : std::nullopt;
    };
    out.macro = {macro(&ClassScores::accuracy), macro(&ClassScores::precision),
                 macro(&ClassScores::sensitivity), macro(&ClassScores::f1),
                 macro(&ClassScores::specificity)};
    return out;
}

inline void to_json(nlohmann::json& j, const ClassScores& s) {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    j = nlohmann::json{{"accuracy", opt(s.accuracy)},
                       {"precision", opt(s.precision)},
                       {"sensitivity", opt(s.sensitivity)},
                       {"f1", opt(s.f1)},
                       {"specificity", opt(s.specificity)}};
}

/// Accuracy, IoU and DSC with confidence radii over n pixels.
inline nlohmann::json segmentation_metrics_json(const ConfusionMatrix& cm) {
    const auto n = cm.total();
    return {{"accuracy", with_ci(accuracy(cm), n)},
            {"iou", with_ci(iou(cm), n)},
            {"dsc", with_ci(dsc(cm), n)}};
}

/// Accuracy, precision, sensitivity, F1 and specificity with confidence
/// radii over n slices; undefined ratios are reported as null.
inline nlohmann::json detection_metrics_json(const ConfusionMatrix& cm) {
    const auto n = cm.total();
    nlohmann::json j;
    auto put = [&](const char* name, double (*fn)(const ConfusionMatrix&)) {
        try {
            j[name] = with_ci(fn(cm), n);
        } catch (const Error& e) {
            if (e.code() != ErrorCode::DivisionByZero) throw;
            j[name] = nullptr;
        }
    };
    put("accuracy", accuracy);
    put("precision", precision);
    put("sensitivity", sensitivity);
    put("f1", f1);
    put("specificity", specificity);
    return j;
}

}  // namespace ctseg
