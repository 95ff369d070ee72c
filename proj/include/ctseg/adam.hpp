#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "ctseg/tensor.hpp"

namespace ctseg::ad {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias-corrected moment estimates. Moments are kept in double so
/// float parameters do not accumulate rounding in m and v.
template <typename T>
class Adam {
public:
    Adam(std::vector<Tensor<T>> params, AdamConfig config)
        : params_(std::move(params)), config_(config) {
        for (const auto& p : params_) {
            require(p.defined() && p.requires_grad(), ErrorCode::MissingGrad,
                    "Adam parameters must require gradients");
            m_.emplace_back(p.numel(), 0.0);
            v_.emplace_back(p.numel(), 0.0);
        }
    }

    void step() {
        for (const auto& p : params_)
            require(p.has_grad(), ErrorCode::MissingGrad, "parameter has no gradient buffer");
        ++t_;
        const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto data = params_[k].data();
            const auto grad = std::as_const(params_[k]).grad();
            auto& m = m_[k];
            auto& v = v_[k];
            for (std::size_t i = 0; i < data.size(); ++i) {
                const double g = grad[i];
                m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g;
                v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g * g;
                const double mhat = m[i] / c1;
                const double vhat = v[i] / c2;
                data[i] = static_cast<T>(data[i] - config_.lr * mhat / (std::sqrt(vhat) + config_.eps));
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    [[nodiscard]] double lr() const { return config_.lr; }
    void set_lr(double lr) { config_.lr = lr; }
    [[nodiscard]] std::int64_t steps() const { return t_; }
    [[nodiscard]] const std::vector<double>& first_moment(std::size_t k) const { return m_.at(k); }
    [[nodiscard]] const std::vector<double>& second_moment(std::size_t k) const { return v_.at(k); }

private:
    std::vector<Tensor<T>> params_;
    AdamConfig config_;
    std::vector<std::vector<double>> m_, v_;
    std::int64_t t_ = 0;
};

}  // namespace ctseg::ad
