#pragma once

// Differentiable layer operations over ctseg::ad::Tensor, NCHW layout.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "ctseg/tensor.hpp"

namespace ctseg::ad {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct Nchw {
    std::size_t n, c, h, w;
    [[nodiscard]] std::size_t plane() const { return h * w; }
};

template <typename T>
Nchw nchw(const Tensor<T>& t, const char* what) {
    require(t.defined() && t.rank() == 4, ErrorCode::ShapeMismatch,
            std::string(what) + " expects a rank-4 NCHW tensor");
    return {t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
}

struct ConvGeometry {
    std::size_t cin, h, w, kh, kw, stride, pad, ho, wo;
    [[nodiscard]] std::size_t patch() const { return cin * kh * kw; }
    [[nodiscard]] std::size_t out_plane() const { return ho * wo; }
    [[nodiscard]] bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
    for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t i = 0; i < g.kh; ++i)
            for (std::size_t j = 0; j < g.kw; ++j) {
                T* row = col + ((c * g.kh + i) * g.kw + j) * g.out_plane();
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) -
                                    static_cast<std::ptrdiff_t>(g.pad);
                    T* dst = row + oy * g.wo;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
                        std::fill(dst, dst + g.wo, T{0});
                        continue;
                    }
                    const T* src = x + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
                    for (std::size_t ox = 0; ox < g.wo; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + j) -
                                        static_cast<std::ptrdiff_t>(g.pad);
                        dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w))
                                      ? T{0}
                                      : src[static_cast<std::size_t>(ix)];
                    }
                }
            }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* dx) {
    for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t i = 0; i < g.kh; ++i)
            for (std::size_t j = 0; j < g.kw; ++j) {
                const T* row = col + ((c * g.kh + i) * g.kw + j) * g.out_plane();
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) -
                                    static_cast<std::ptrdiff_t>(g.pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
                    T* dst = dx + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
                    const T* src = row + oy * g.wo;
                    for (std::size_t ox = 0; ox < g.wo; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + j) -
                                        static_cast<std::ptrdiff_t>(g.pad);
                        if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w))
                            dst[static_cast<std::size_t>(ix)] += src[ox];
                    }
                }
            }
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
    require(a.defined() && b.defined() && a.shape() == b.shape(), ErrorCode::ShapeMismatch,
            std::string(what) + ": shapes " + shape_str(a.shape()) + " and " +
                shape_str(b.shape()) + " differ");
}

}  // namespace detail

/// 2D cross-correlation. x [N,Cin,H,W], w [Cout,Cin,kh,kw], b [Cout] or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t stride = 1,
                 std::size_t pad = 0) {
    const auto in = detail::nchw(x, "conv2d input");
    require(w.defined() && w.rank() == 4, ErrorCode::ShapeMismatch, "conv2d weight must be rank 4");
    const std::size_t cout = w.dim(0);
    require(w.dim(1) == in.c, ErrorCode::ShapeMismatch,
            "conv2d weight expects " + std::to_string(w.dim(1)) + " input channels, got " +
                std::to_string(in.c));
    if (b.defined())
        require(b.rank() == 1 && b.dim(0) == cout, ErrorCode::ShapeMismatch,
                "conv2d bias must have shape [Cout]");
    require(stride >= 1, ErrorCode::InvalidArgument, "conv2d stride must be >= 1");
    const std::size_t kh = w.dim(2), kw = w.dim(3);
    require(in.h + 2 * pad >= kh && in.w + 2 * pad >= kw, ErrorCode::ShapeMismatch,
            "conv2d kernel larger than padded input");
    require((in.h + 2 * pad - kh) % stride == 0 && (in.w + 2 * pad - kw) % stride == 0,
            ErrorCode::NonIntegralOutputSize, "conv2d output size is not integral");

    detail::ConvGeometry g{in.c, in.h, in.w, kh, kw, stride, pad,
                           (in.h + 2 * pad - kh) / stride + 1, (in.w + 2 * pad - kw) / stride + 1};
    const std::size_t k = g.patch(), op = g.out_plane();
    std::vector<T> out(in.n * cout * op);
    std::vector<T> col(g.pointwise() ? 0 : k * op);
    detail::ConstMatMap<T> wm(w.data().data(), static_cast<Eigen::Index>(cout),
                              static_cast<Eigen::Index>(k));
    for (std::size_t n = 0; n < in.n; ++n) {
        const T* xn = x.data().data() + n * in.c * in.plane();
        const T* colp = xn;
        if (!g.pointwise()) {
            detail::im2col(xn, g, col.data());
            colp = col.data();
        }
        detail::ConstMatMap<T> cm(colp, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(op));
        detail::MatMap<T> om(out.data() + n * cout * op, static_cast<Eigen::Index>(cout),
                             static_cast<Eigen::Index>(op));
        om.noalias() = wm * cm;
        if (b.defined())
            for (std::size_t co = 0; co < cout; ++co) om.row(static_cast<Eigen::Index>(co)).array() += b.data()[co];
    }

    return Tensor<T>::make_result(
        {in.n, cout, g.ho, g.wo}, std::move(out), {x, w, b},
        [x, w, b, g, in, cout](detail::Node<T>& self) mutable {
            const std::size_t k = g.patch(), op = g.out_plane();
            std::vector<T> col(g.pointwise() ? 0 : k * op);
            std::vector<T> dcol(k * op);
            detail::ConstMatMap<T> wm(w.data().data(), static_cast<Eigen::Index>(cout),
                                      static_cast<Eigen::Index>(k));
            for (std::size_t n = 0; n < in.n; ++n) {
                detail::ConstMatMap<T> gm(self.grad.data() + n * cout * op,
                                          static_cast<Eigen::Index>(cout),
                                          static_cast<Eigen::Index>(op));
                if (w.requires_grad()) {
                    const T* xn = x.data().data() + n * in.c * in.plane();
                    const T* colp = xn;
                    if (!g.pointwise()) {
                        detail::im2col(xn, g, col.data());
                        colp = col.data();
                    }
                    detail::ConstMatMap<T> cm(colp, static_cast<Eigen::Index>(k),
                                              static_cast<Eigen::Index>(op));
                    detail::MatMap<T> gw(w.grad_mut().data(), static_cast<Eigen::Index>(cout),
                                         static_cast<Eigen::Index>(k));
                    gw.noalias() += gm * cm.transpose();
                }
                if (b.defined() && b.requires_grad()) {
                    auto gb = b.grad_mut();
                    for (std::size_t co = 0; co < cout; ++co)
                        gb[co] += gm.row(static_cast<Eigen::Index>(co)).sum();
                }
                if (x.requires_grad()) {
                    T* dxn = x.grad_mut().data() + n * in.c * in.plane();
                    if (g.pointwise()) {
                        detail::MatMap<T> dxm(dxn, static_cast<Eigen::Index>(k),
                                              static_cast<Eigen::Index>(op));
                        dxm.noalias() += wm.transpose() * gm;
                    } else {
                        detail::MatMap<T> dcm(dcol.data(), static_cast<Eigen::Index>(k),
                                              static_cast<Eigen::Index>(op));
                        dcm.noalias() = wm.transpose() * gm;
                        detail::col2im_add(dcol.data(), g, dxn);
                    }
                }
            }
        });
}

/// 2x2 max pooling with stride 2; ties resolve to the first element in
/// row-major window order.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x) {
    const auto s = detail::nchw(x, "maxpool2d");
    require(s.h % 2 == 0 && s.w % 2 == 0, ErrorCode::OddSpatialDims,
            "maxpool2d needs even spatial dims, got " + shape_str(x.shape()));
    const std::size_t ho = s.h / 2, wo = s.w / 2;
    std::vector<T> out(s.n * s.c * ho * wo);
    std::vector<std::uint32_t> argmax(out.size());
    const T* xd = x.data().data();
    for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
        const T* plane = xd + nc * s.plane();
        for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox) {
                std::size_t best = (2 * oy) * s.w + 2 * ox;
                const std::size_t cand[3] = {best + 1, best + s.w, best + s.w + 1};
                for (std::size_t c : cand)
                    if (plane[c] > plane[best]) best = c;
                const std::size_t o = nc * ho * wo + oy * wo + ox;
                out[o] = plane[best];
                argmax[o] = static_cast<std::uint32_t>(nc * s.plane() + best);
            }
    }
    return Tensor<T>::make_result({s.n, s.c, ho, wo}, std::move(out), {x},
                                  [x, argmax = std::move(argmax)](detail::Node<T>& self) mutable {
                                      auto gx = x.grad_mut();
                                      for (std::size_t o = 0; o < argmax.size(); ++o)
                                          gx[argmax[o]] += self.grad[o];
                                  });
}

/// Nearest-neighbour 2x upsampling; each pixel becomes a 2x2 block.
template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
    const auto s = detail::nchw(x, "upsample_nearest2x");
    const std::size_t ho = 2 * s.h, wo = 2 * s.w;
    std::vector<T> out(s.n * s.c * ho * wo);
    const T* xd = x.data().data();
    for (std::size_t nc = 0; nc < s.n * s.c; ++nc)
        for (std::size_t y = 0; y < ho; ++y) {
            const T* src = xd + nc * s.plane() + (y / 2) * s.w;
            T* dst = out.data() + nc * ho * wo + y * wo;
            for (std::size_t xx = 0; xx < wo; ++xx) dst[xx] = src[xx / 2];
        }
    return Tensor<T>::make_result({s.n, s.c, ho, wo}, std::move(out), {x},
                                  [x, s](detail::Node<T>& self) mutable {
                                      auto gx = x.grad_mut();
                                      const std::size_t ho = 2 * s.h, wo = 2 * s.w;
                                      for (std::size_t nc = 0; nc < s.n * s.c; ++nc)
                                          for (std::size_t y = 0; y < ho; ++y) {
                                              const T* g = self.grad.data() + nc * ho * wo + y * wo;
                                              T* d = gx.data() + nc * s.plane() + (y / 2) * s.w;
                                              for (std::size_t xx = 0; xx < wo; ++xx) d[xx / 2] += g[xx];
                                          }
                                  });
}

/// Channel concatenation [N,Ca,H,W] + [N,Cb,H,W] -> [N,Ca+Cb,H,W].
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    const auto sa = detail::nchw(a, "concat_channels");
    const auto sb = detail::nchw(b, "concat_channels");
    require(sa.n == sb.n && sa.h == sb.h && sa.w == sb.w, ErrorCode::ShapeMismatch,
            "concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t c = sa.c + sb.c, plane = sa.plane();
    std::vector<T> out(sa.n * c * plane);
    for (std::size_t n = 0; n < sa.n; ++n) {
        std::copy_n(a.data().data() + n * sa.c * plane, sa.c * plane, out.data() + n * c * plane);
        std::copy_n(b.data().data() + n * sb.c * plane, sb.c * plane,
                    out.data() + n * c * plane + sa.c * plane);
    }
    return Tensor<T>::make_result(
        {sa.n, c, sa.h, sa.w}, std::move(out), {a, b}, [a, b, sa, sb](detail::Node<T>& self) mutable {
            const std::size_t plane = sa.plane(), c = sa.c + sb.c;
            for (std::size_t n = 0; n < sa.n; ++n) {
                const T* g = self.grad.data() + n * c * plane;
                if (a.requires_grad()) {
                    T* d = a.grad_mut().data() + n * sa.c * plane;
                    for (std::size_t i = 0; i < sa.c * plane; ++i) d[i] += g[i];
                }
                if (b.requires_grad()) {
                    T* d = b.grad_mut().data() + n * sb.c * plane;
                    for (std::size_t i = 0; i < sb.c * plane; ++i) d[i] += g[sa.c * plane + i];
                }
            }
        });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> out(x.values());
    for (auto& v : out) v = v > T{0} ? v : T{0};
    return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [x](detail::Node<T>& self) mutable {
        auto gx = x.grad_mut();
        const auto xv = x.data();
        for (std::size_t i = 0; i < gx.size(); ++i)
            if (xv[i] > T{0}) gx[i] += self.grad[i];
    });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<T> out(a.values());
    const auto bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [a, b](detail::Node<T>& self) mutable {
        for (const Tensor<T>* t : {&a, &b}) {
            if (!t->requires_grad()) continue;
            auto g = t->grad_mut();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<T> out(a.values());
    const auto bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [a, b](detail::Node<T>& self) mutable {
        if (a.requires_grad()) {
            auto g = a.grad_mut();
            const auto bv = b.data();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
        }
        if (b.requires_grad()) {
            auto g = b.grad_mut();
            const auto av = a.data();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
        }
    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    double acc = 0;
    for (T v : x.data()) acc += static_cast<double>(v);
    return Tensor<T>::make_result({1}, {static_cast<T>(acc)}, {x}, [x](detail::Node<T>& self) mutable {
        auto g = x.grad_mut();
        for (auto& v : g) v += self.grad[0];
    });
}

/// Per-channel batch normalisation. Training mode normalises with batch
/// statistics (biased variance) and folds them into the running estimates
/// with the given momentum (unbiased variance); eval mode uses the running
/// estimates.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                      double momentum = 0.1, double eps = 1e-5) {
    const auto s = detail::nchw(x, "batchnorm2d");
    for (const Tensor<T>* p : {&gamma, &beta, static_cast<const Tensor<T>*>(&running_mean),
                               static_cast<const Tensor<T>*>(&running_var)})
        require(p->defined() && p->rank() == 1 && p->dim(0) == s.c, ErrorCode::ShapeMismatch,
                "batchnorm2d parameters must have shape [C]");
    const std::size_t m = s.n * s.plane();
    std::vector<T> mean(s.c), invstd(s.c);
    const T* xd = x.data().data();
    for (std::size_t c = 0; c < s.c; ++c) {
        if (training) {
            double acc = 0;
            for (std::size_t n = 0; n < s.n; ++n) {
                const T* p = xd + (n * s.c + c) * s.plane();
                for (std::size_t i = 0; i < s.plane(); ++i) acc += p[i];
            }
            const double mu = acc / static_cast<double>(m);
            double sq = 0;
            for (std::size_t n = 0; n < s.n; ++n) {
                const T* p = xd + (n * s.c + c) * s.plane();
                for (std::size_t i = 0; i < s.plane(); ++i) {
                    const double d = p[i] - mu;
                    sq += d * d;
                }
            }
            const double var = sq / static_cast<double>(m);
            mean[c] = static_cast<T>(mu);
            invstd[c] = static_cast<T>(1.0 / std::sqrt(var + eps));
            const double unbiased = m > 1 ? sq / static_cast<double>(m - 1) : var;
            auto rm = running_mean.data();
            auto rv = running_var.data();
            rm[c] = static_cast<T>((1 - momentum) * rm[c] + momentum * mu);
            rv[c] = static_cast<T>((1 - momentum) * rv[c] + momentum * unbiased);
        } else {
            mean[c] = running_mean.data()[c];
            invstd[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var.data()[c]) + eps));
        }
    }
    std::vector<T> xhat(x.numel()), out(x.numel());
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c) {
            const std::size_t base = (n * s.c + c) * s.plane();
            const T gm = gamma.data()[c], bt = beta.data()[c];
            for (std::size_t i = 0; i < s.plane(); ++i) {
                const T h = (xd[base + i] - mean[c]) * invstd[c];
                xhat[base + i] = h;
                out[base + i] = gm * h + bt;
            }
        }
    return Tensor<T>::make_result(
        x.shape(), std::move(out), {x, gamma, beta},
        [x, gamma, beta, s, m, training, invstd = std::move(invstd),
         xhat = std::move(xhat)](detail::Node<T>& self) mutable {
            const T* gy = self.grad.data();
            for (std::size_t c = 0; c < s.c; ++c) {
                double sum_dy = 0, sum_dy_xhat = 0;
                for (std::size_t n = 0; n < s.n; ++n) {
                    const std::size_t base = (n * s.c + c) * s.plane();
                    for (std::size_t i = 0; i < s.plane(); ++i) {
                        sum_dy += gy[base + i];
                        sum_dy_xhat += static_cast<double>(gy[base + i]) * xhat[base + i];
                    }
                }
                if (gamma.requires_grad()) gamma.grad_mut()[c] += static_cast<T>(sum_dy_xhat);
                if (beta.requires_grad()) beta.grad_mut()[c] += static_cast<T>(sum_dy);
                if (!x.requires_grad()) continue;
                auto gx = x.grad_mut();
                const double g = gamma.data()[c];
                const double is = invstd[c];
                const double md = static_cast<double>(m);
                for (std::size_t n = 0; n < s.n; ++n) {
                    const std::size_t base = (n * s.c + c) * s.plane();
                    for (std::size_t i = 0; i < s.plane(); ++i) {
                        if (training) {
                            gx[base + i] += static_cast<T>(
                                g * is / md *
                                (md * gy[base + i] - sum_dy - xhat[base + i] * sum_dy_xhat));
                        } else {
                            gx[base + i] += static_cast<T>(g * is * gy[base + i]);
                        }
                    }
                }
            }
        });
}

/// Softmax over the channel axis of [N,C,H,W] with max subtraction.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
    const auto s = detail::nchw(x, "softmax_channels");
    std::vector<T> out(x.numel());
    const T* xd = x.data().data();
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t i = 0; i < s.plane(); ++i) {
            const std::size_t base = n * s.c * s.plane() + i;
            T mx = xd[base];
            for (std::size_t c = 1; c < s.c; ++c) mx = std::max(mx, xd[base + c * s.plane()]);
            double z = 0;
            for (std::size_t c = 0; c < s.c; ++c) z += std::exp(static_cast<double>(xd[base + c * s.plane()] - mx));
            for (std::size_t c = 0; c < s.c; ++c)
                out[base + c * s.plane()] =
                    static_cast<T>(std::exp(static_cast<double>(xd[base + c * s.plane()] - mx)) / z);
        }
    Tensor<T> result = Tensor<T>::make_result(x.shape(), out, {x}, [x, s, y = out](detail::Node<T>& self) mutable {
        auto gx = x.grad_mut();
        for (std::size_t n = 0; n < s.n; ++n)
            for (std::size_t i = 0; i < s.plane(); ++i) {
                const std::size_t base = n * s.c * s.plane() + i;
                double dot = 0;
                for (std::size_t c = 0; c < s.c; ++c)
                    dot += static_cast<double>(self.grad[base + c * s.plane()]) * y[base + c * s.plane()];
                for (std::size_t c = 0; c < s.c; ++c) {
                    const std::size_t k = base + c * s.plane();
                    gx[k] += static_cast<T>(y[k] * (self.grad[k] - dot));
                }
            }
    });
    return result;
}

inline constexpr double kLogFloor = 1e-12;

namespace detail {

template <typename T>
void check_labels(const Nchw& s, std::span<const std::uint8_t> labels, const char* what) {
    require(s.c == 2, ErrorCode::ShapeMismatch, std::string(what) + " expects 2 channels");
    require(labels.size() == s.n * s.plane(), ErrorCode::ShapeMismatch,
            std::string(what) + ": label count does not match N*H*W");
    for (std::uint8_t l : labels)
        require(l <= 1, ErrorCode::InvalidArgument, std::string(what) + ": labels must be binary");
}

}  // namespace detail

/// Mean pixel cross-entropy on softmax probabilities [N,2,H,W]:
/// -(1/K) sum_k log p_k(true class), log floored at 1e-12.
template <typename T>
Tensor<T> cross_entropy_loss(const Tensor<T>& probs, std::span<const std::uint8_t> labels) {
    const auto s = detail::nchw(probs, "cross_entropy_loss");
    detail::check_labels<T>(s, labels, "cross_entropy_loss");
    const std::size_t k = s.n * s.plane();
    const T* p = probs.data().data();
    double acc = 0;
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t i = 0; i < s.plane(); ++i) {
            const double pt = p[(n * 2 + labels[n * s.plane() + i]) * s.plane() + i];
            acc -= std::log(std::max(pt, kLogFloor));
        }
    std::vector<std::uint8_t> lab(labels.begin(), labels.end());
    return Tensor<T>::make_result(
        {1}, {static_cast<T>(acc / static_cast<double>(k))}, {probs},
        [probs, s, k, lab = std::move(lab)](detail::Node<T>& self) mutable {
            auto g = probs.grad_mut();
            const T* p = probs.data().data();
            const double scale = static_cast<double>(self.grad[0]) / static_cast<double>(k);
            for (std::size_t n = 0; n < s.n; ++n)
                for (std::size_t i = 0; i < s.plane(); ++i) {
                    const std::size_t idx = (n * 2 + lab[n * s.plane() + i]) * s.plane() + i;
                    if (p[idx] > kLogFloor) g[idx] += static_cast<T>(-scale / p[idx]);
                }
        });
}

/// Same objective computed from logits as log-softmax followed by negative
/// log-likelihood; this is the numerically stable path used for training.
template <typename T>
Tensor<T> cross_entropy_with_logits(const Tensor<T>& logits, std::span<const std::uint8_t> labels) {
    const auto s = detail::nchw(logits, "cross_entropy_with_logits");
    detail::check_labels<T>(s, labels, "cross_entropy_with_logits");
    const std::size_t k = s.n * s.plane();
    const T* x = logits.data().data();
    std::vector<T> prob(logits.numel());
    double acc = 0;
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t i = 0; i < s.plane(); ++i) {
            const std::size_t i0 = n * 2 * s.plane() + i, i1 = i0 + s.plane();
            const double a = x[i0], b = x[i1];
            const double mx = std::max(a, b);
            const double lse = mx + std::log(std::exp(a - mx) + std::exp(b - mx));
            const double xt = labels[n * s.plane() + i] ? b : a;
            acc += lse - xt;
            prob[i0] = static_cast<T>(std::exp(a - lse));
            prob[i1] = static_cast<T>(std::exp(b - lse));
        }
    std::vector<std::uint8_t> lab(labels.begin(), labels.end());
    return Tensor<T>::make_result(
        {1}, {static_cast<T>(acc / static_cast<double>(k))}, {logits},
        [logits, s, k, lab = std::move(lab), prob = std::move(prob)](detail::Node<T>& self) mutable {
            auto g = logits.grad_mut();
            const double scale = static_cast<double>(self.grad[0]) / static_cast<double>(k);
            for (std::size_t n = 0; n < s.n; ++n)
                for (std::size_t i = 0; i < s.plane(); ++i) {
                    const std::size_t i0 = n * 2 * s.plane() + i, i1 = i0 + s.plane();
                    const int t = lab[n * s.plane() + i];
                    g[i0] += static_cast<T>(scale * (prob[i0] - (t == 0 ? 1.0 : 0.0)));
                    g[i1] += static_cast<T>(scale * (prob[i1] - (t == 1 ? 1.0 : 0.0)));
                }
        });
}

}  // namespace ctseg::ad
