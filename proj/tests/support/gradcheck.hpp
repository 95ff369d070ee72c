#pragma once

// Central finite-difference checks for the autodiff engine.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <vector>

#include "ctseg/models.hpp"
#include "ctseg/ops.hpp"

namespace ctseg::testing {

using ad::Tensor;

template <typename T>
Tensor<T> random_tensor(const ad::Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                        bool requires_grad = false) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<T> data(ad::numel(shape));
    for (auto& v : data) v = static_cast<T>(dist(rng));
    return Tensor<T>(shape, std::move(data), requires_grad);
}

inline double relative_error(double analytic, double numeric, double floor) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Indices to probe: everything for small tensors, a seeded sample otherwise.
inline std::vector<std::size_t> probe_indices(std::size_t n, std::size_t max_probes, std::mt19937_64& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    if (n <= max_probes) return idx;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(max_probes);
    return idx;
}

/// Central difference of f around its current input. The two one-sided
/// slopes must agree, otherwise the step straddles a kink (ReLU, max-pool
/// switch) and is shrunk; nullopt when no step in the ladder is smooth.
inline std::optional<double> central_difference(const std::function<double()>& f, double& x, double h0) {
    const double orig = x;
    const double centre = f();
    for (double h = h0; h >= h0 * 1e-2; h /= 10) {
        x = orig + h;
        const double up = f();
        x = orig - h;
        const double down = f();
        x = orig;
        const double fwd = (up - centre) / h, bwd = (centre - down) / h;
        if (std::abs(fwd - bwd) <= 1e-2 * std::max(std::abs(fwd), std::abs(bwd)) + 1e-9)
            return (up - down) / (2 * h);
    }
    return std::nullopt;
}

struct GradReport {
    double max_rel_error = 0;
    std::size_t probes = 0;
    std::size_t kinks = 0;  // probes skipped because every step straddled a kink
};

/// backward() against central differences of loss(inputs), all in double.
inline GradReport op_gradient_check(const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& loss,
                                    std::vector<Tensor<double>> inputs, double h = 1e-5,
                                    std::size_t max_probes = 64, std::uint64_t seed = 1) {
    for (auto& t : inputs) t.zero_grad();
    ad::backward(loss(inputs));
    std::mt19937_64 rng(seed);
    GradReport report;
    for (auto& t : inputs) {
        if (!t.requires_grad()) continue;
        const std::vector<double> analytic(t.grad().begin(), t.grad().end());
        for (std::size_t i : probe_indices(t.numel(), max_probes, rng)) {
            ad::NoGradGuard guard;
            const auto numeric = central_difference([&] { return loss(inputs).item(); }, t.values()[i], h);
            ++report.probes;
            if (!numeric) {
                ++report.kinks;
                continue;
            }
            report.max_rel_error = std::max(report.max_rel_error, relative_error(analytic[i], *numeric, 1e-6));
        }
    }
    return report;
}

/// Weighted sum with fixed random weights so every output element carries a
/// distinct upstream gradient.
inline Tensor<double> probe_sum(const Tensor<double>& out, std::uint64_t seed = 99) {
    std::mt19937_64 rng(seed);
    return ad::sum(ad::mul(out, random_tensor<double>(out.shape(), rng)));
}

/// 32-bit analytic gradients of the training-mode cross-entropy against
/// central differences taken on the 64-bit shadow of the same model.
inline GradReport model_gradient_check(const ModelConfig& cfg, std::uint64_t seed, std::size_t batch = 2,
                                            std::size_t probes_per_tensor = 6, double h = 1e-6) {
    Model<float> model(cfg, seed);
    Model<double> shadow = model.cast<double>();
    std::mt19937_64 rng(seed + 1);
    const std::size_t s = static_cast<std::size_t>(cfg.input_size);
    const auto x32 = random_tensor<float>({batch, 1, s, s}, rng, 0.0, 1.0);
    const auto x64 = x32.cast<double>();
    std::vector<std::uint8_t> labels(batch * s * s);
    std::bernoulli_distribution coin(0.4);
    for (auto& l : labels) l = coin(rng) ? 1 : 0;

    model.set_training(true);
    shadow.set_training(true);
    model.zero_grad();
    ad::backward(ad::cross_entropy_with_logits(model.forward_logits(x32), labels));

    GradReport report;
    auto shadow_params = shadow.parameters();
    const auto params = model.parameters();
    for (std::size_t p = 0; p < params.size(); ++p) {
        auto& t = shadow_params[p];
        const auto grad = params[p].grad();
        for (std::size_t i : probe_indices(t.numel(), probes_per_tensor, rng)) {
            ad::NoGradGuard guard;
            const auto numeric = central_difference(
                [&] { return ad::cross_entropy_with_logits(shadow.forward_logits(x64), labels).item(); },
                t.values()[i], h);
            ++report.probes;
            if (!numeric) {
                ++report.kinks;
                continue;
            }
            report.max_rel_error =
                std::max(report.max_rel_error, relative_error(static_cast<double>(grad[i]), *numeric, 1e-4));
        }
    }
    return report;
}

}  // namespace ctseg::testing
