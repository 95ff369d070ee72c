#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "ctseg/adam.hpp"
#include "ctseg/checkpoint.hpp"
#include "ctseg/ops.hpp"
#include "support/expect_error.hpp"
#include "support/gradcheck.hpp"
#include "support/tempdir.hpp"

using namespace ctseg;
using ad::Tensor;
using ctseg::testing::op_gradient_check;
using ctseg::testing::probe_sum;
using ctseg::testing::random_tensor;
using TD = Tensor<double>;
using Inputs = std::vector<TD>;

namespace {

constexpr double kOpTol = 1e-3;

// Values spread far enough apart that no 2x2 window has a near tie.
TD jittered(const ad::Shape& shape, std::mt19937_64& rng) {
    const std::size_t n = ad::numel(shape);
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<double>(i) * 0.05;
    std::shuffle(v.begin(), v.end(), rng);
    return TD(shape, std::move(v), true);
}

std::vector<std::uint8_t> random_labels(std::size_t n, std::mt19937_64& rng) {
    std::bernoulli_distribution coin(0.5);
    std::vector<std::uint8_t> out(n);
    for (auto& l : out) l = coin(rng);
    return out;
}

}  // namespace

TEST(Conv2d, AllOnesGivesNine) {
    const auto x = Tensor<float>::full({1, 1, 3, 3}, 1.f);
    const auto w = Tensor<float>::full({1, 1, 3, 3}, 1.f);
    const auto y = ad::conv2d(x, w, Tensor<float>::zeros({1}));
    ASSERT_EQ(y.shape(), (ad::Shape{1, 1, 1, 1}));
    EXPECT_FLOAT_EQ(y.item(), 9.f);
}

TEST(Conv2d, DeltaKernelIsIdentity) {
    std::mt19937_64 rng(3);
    const auto x = random_tensor<float>({2, 1, 5, 6}, rng);
    auto w = Tensor<float>::zeros({1, 1, 3, 3});
    w.values()[4] = 1.f;
    const auto y = ad::conv2d(x, w, Tensor<float>(), 1, 1);
    EXPECT_EQ(y.shape(), x.shape());
    EXPECT_EQ(y.values(), x.values());
}

TEST(Conv2d, MatchesDirectLoop) {
    std::mt19937_64 rng(4);
    const auto x = random_tensor<double>({2, 3, 7, 5}, rng);
    const auto w = random_tensor<double>({4, 3, 3, 3}, rng);
    const auto b = random_tensor<double>({4}, rng);
    const std::size_t stride = 2, pad = 1;
    const auto y = ad::conv2d(x, w, b, stride, pad);
    ASSERT_EQ(y.shape(), (ad::Shape{2, 4, 4, 3}));
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t o = 0; o < 4; ++o)
            for (std::size_t i = 0; i < 4; ++i)
                for (std::size_t j = 0; j < 3; ++j) {
                    double acc = b.values()[o];
                    for (std::size_t c = 0; c < 3; ++c)
                        for (std::size_t ki = 0; ki < 3; ++ki)
                            for (std::size_t kj = 0; kj < 3; ++kj) {
                                const long r = static_cast<long>(i * stride + ki) - static_cast<long>(pad);
                                const long q = static_cast<long>(j * stride + kj) - static_cast<long>(pad);
                                if (r < 0 || q < 0 || r >= 7 || q >= 5) continue;
                                acc += x.values()[((n * 3 + c) * 7 + r) * 5 + q] *
                                       w.values()[((o * 3 + c) * 3 + ki) * 3 + kj];
                            }
                    EXPECT_NEAR(y.values()[((n * 4 + o) * 4 + i) * 3 + j], acc, 1e-12);
                }
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(5);
    Inputs in{random_tensor<double>({1, 2, 5, 5}, rng, -1, 1, true),
              random_tensor<double>({3, 2, 3, 3}, rng, -1, 1, true),
              random_tensor<double>({3}, rng, -1, 1, true)};
    const auto r = op_gradient_check(
        [](const Inputs& t) { return probe_sum(ad::conv2d(t[0], t[1], t[2], 1, 1)); }, in);
    EXPECT_LT(r.max_rel_error, kOpTol);
    EXPECT_EQ(r.kinks, 0u);
}

TEST(Conv2d, StridedGradientsWithoutBias) {
    std::mt19937_64 rng(6);
    Inputs in{random_tensor<double>({2, 2, 6, 6}, rng, -1, 1, true),
              random_tensor<double>({2, 2, 2, 2}, rng, -1, 1, true)};
    const auto r = op_gradient_check(
        [](const Inputs& t) { return probe_sum(ad::conv2d(t[0], t[1], TD(), 2, 0)); }, in);
    EXPECT_LT(r.max_rel_error, kOpTol);
}

TEST(Conv2d, ShapeErrors) {
    const auto x = Tensor<float>::zeros({1, 2, 5, 5});
    EXPECT_CTSEG_ERROR(ad::conv2d(x, Tensor<float>::zeros({1, 3, 3, 3}), Tensor<float>()), ErrorCode::ShapeMismatch);
    EXPECT_CTSEG_ERROR(ad::conv2d(x, Tensor<float>::zeros({1, 2, 3, 3}), Tensor<float>::zeros({2})),
                       ErrorCode::ShapeMismatch);
    EXPECT_CTSEG_ERROR(ad::conv2d(x, Tensor<float>::zeros({1, 2, 7, 7}), Tensor<float>()), ErrorCode::ShapeMismatch);
    EXPECT_CTSEG_ERROR(ad::conv2d(x, Tensor<float>::zeros({1, 2, 2, 2}), Tensor<float>(), 2),
                       ErrorCode::NonIntegralOutputSize);
}

TEST(MaxPool, ConstantAndSimpleMax) {
    const auto c = ad::maxpool2d(Tensor<float>::full({1, 2, 4, 4}, 3.5f));
    EXPECT_EQ(c.shape(), (ad::Shape{1, 2, 2, 2}));
    for (float v : c.values()) EXPECT_EQ(v, 3.5f);
    const auto m = ad::maxpool2d(Tensor<float>({1, 1, 2, 2}, {1, 2, 3, 4}));
    EXPECT_EQ(m.item(), 4.f);
}

TEST(MaxPool, TieRoutesToFirstIndex) {
    const Tensor<float> x({1, 1, 2, 2}, {5, 5, 5, 5}, true);
    ad::backward(ad::sum(ad::maxpool2d(x)));
    EXPECT_EQ(std::vector<float>(x.grad().begin(), x.grad().end()), (std::vector<float>{1, 0, 0, 0}));
}

TEST(MaxPool, GradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(7);
    Inputs in{jittered({2, 2, 6, 6}, rng)};
    const auto r = op_gradient_check([](const Inputs& t) { return probe_sum(ad::maxpool2d(t[0])); }, in);
    EXPECT_LT(r.max_rel_error, kOpTol);
    EXPECT_EQ(r.kinks, 0u);
}

TEST(MaxPool, OddDimsRejected) {
    EXPECT_CTSEG_ERROR(ad::maxpool2d(Tensor<float>::zeros({1, 1, 3, 4})), ErrorCode::OddSpatialDims);
}

TEST(Upsample, ReplicatesPixel) {
    const auto y = ad::upsample_nearest2x(Tensor<float>({1, 1, 1, 1}, {7}));
    EXPECT_EQ(y.shape(), (ad::Shape{1, 1, 2, 2}));
    for (float v : y.values()) EXPECT_EQ(v, 7.f);
}

TEST(Upsample, MaxPoolUndoesIt) {
    std::mt19937_64 rng(8);
    const auto x = random_tensor<float>({2, 3, 4, 5}, rng);
    EXPECT_EQ(ad::maxpool2d(ad::upsample_nearest2x(x)).values(), x.values());
}

TEST(Upsample, SumGradientIsFour) {
    std::mt19937_64 rng(9);
    auto x = random_tensor<double>({1, 2, 3, 3}, rng, -1, 1, true);
    ad::backward(ad::sum(ad::upsample_nearest2x(x)));
    for (double g : x.grad()) EXPECT_EQ(g, 4.0);
    Inputs in{x};
    EXPECT_LT(op_gradient_check([](const Inputs& t) { return probe_sum(ad::upsample_nearest2x(t[0])); }, in)
                  .max_rel_error,
              kOpTol);
}

TEST(Concat, ChannelArithmeticAndLayout) {
    const auto a = Tensor<float>::full({1, 3, 2, 2}, 1.f);
    const auto b = Tensor<float>::full({1, 5, 2, 2}, 2.f);
    const auto c = ad::concat_channels(a, b);
    ASSERT_EQ(c.shape(), (ad::Shape{1, 8, 2, 2}));
    EXPECT_EQ(c.values()[11], 1.f);
    EXPECT_EQ(c.values()[12], 2.f);
    EXPECT_CTSEG_ERROR(ad::concat_channels(a, Tensor<float>::zeros({1, 1, 2, 3})), ErrorCode::ShapeMismatch);
}

TEST(Concat, GradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(10);
    Inputs in{random_tensor<double>({2, 2, 3, 3}, rng, -1, 1, true),
              random_tensor<double>({2, 1, 3, 3}, rng, -1, 1, true)};
    const auto r =
        op_gradient_check([](const Inputs& t) { return probe_sum(ad::concat_channels(t[0], t[1])); }, in);
    EXPECT_LT(r.max_rel_error, kOpTol);
}

TEST(Relu, Values) {
    const auto y = ad::relu(Tensor<float>({2}, {-1.f, 2.f}));
    EXPECT_EQ(y.values(), (std::vector<float>{0.f, 2.f}));
}

TEST(Relu, GradientsAwayFromZero) {
    std::mt19937_64 rng(11);
    auto x = random_tensor<double>({1, 2, 4, 4}, rng, -1, 1, true);
    for (auto& v : x.values())
        if (std::abs(v) < 0.05) v = 0.3;
    Inputs in{x};
    const auto r = op_gradient_check([](const Inputs& t) { return probe_sum(ad::relu(t[0])); }, in);
    EXPECT_LT(r.max_rel_error, kOpTol);
    EXPECT_EQ(r.kinks, 0u);
}

TEST(Elementwise, AddAndMulGradients) {
    std::mt19937_64 rng(12);
    Inputs in{random_tensor<double>({1, 2, 3, 3}, rng, -1, 1, true),
              random_tensor<double>({1, 2, 3, 3}, rng, -1, 1, true)};
    EXPECT_LT(op_gradient_check([](const Inputs& t) { return probe_sum(ad::add(t[0], t[1])); }, in).max_rel_error,
              kOpTol);
    EXPECT_LT(op_gradient_check([](const Inputs& t) { return probe_sum(ad::mul(t[0], t[1])); }, in).max_rel_error,
              kOpTol);
    EXPECT_CTSEG_ERROR(ad::add(in[0], TD::zeros({1, 2, 3, 2})), ErrorCode::ShapeMismatch);
}

TEST(BatchNorm, TrainingOutputIsStandardised) {
    std::mt19937_64 rng(13);
    const auto x = random_tensor<double>({4, 3, 5, 5}, rng, -3, 7);
    auto rm = TD::zeros({3});
    auto rv = TD::full({3}, 1.0);
    const auto y = ad::batchnorm2d(x, TD::full({3}, 1.0), TD::zeros({3}), rm, rv, true);
    for (std::size_t c = 0; c < 3; ++c) {
        double s = 0, s2 = 0;
        for (std::size_t n = 0; n < 4; ++n)
            for (std::size_t i = 0; i < 25; ++i) {
                const double v = y.values()[(n * 3 + c) * 25 + i];
                s += v;
                s2 += v * v;
            }
        const double mean = s / 100, var = s2 / 100 - mean * mean;
        EXPECT_LT(std::abs(mean), 1e-5);
        EXPECT_NEAR(var, 1.0, 1e-4);
    }
}

TEST(BatchNorm, RunningStatsUseMomentum) {
    const TD x({2, 1, 1, 2}, {1, 2, 3, 6});
    auto rm = TD::zeros({1});
    auto rv = TD::full({1}, 1.0);
    ad::batchnorm2d(x, TD::full({1}, 1.0), TD::zeros({1}), rm, rv, true);
    // batch mean 3, unbiased variance 14/3
    EXPECT_NEAR(rm.values()[0], 0.3, 1e-12);
    EXPECT_NEAR(rv.values()[0], 0.9 + 0.1 * 14.0 / 3.0, 1e-12);
}

TEST(BatchNorm, EvalUsesRunningStats) {
    const TD x({1, 1, 1, 2}, {4, 6});
    auto rm = TD::full({1}, 2.0);
    auto rv = TD::full({1}, 4.0);
    const auto y = ad::batchnorm2d(x, TD::full({1}, 3.0), TD::full({1}, 1.0), rm, rv, false);
    EXPECT_NEAR(y.values()[0], 3.0 * 2.0 / std::sqrt(4.0 + 1e-5) + 1.0, 1e-9);
    EXPECT_NEAR(y.values()[1], 3.0 * 4.0 / std::sqrt(4.0 + 1e-5) + 1.0, 1e-9);
    EXPECT_EQ(rm.values()[0], 2.0);
}

TEST(BatchNorm, GradientsInBothModes) {
    std::mt19937_64 rng(14);
    Inputs in{random_tensor<double>({3, 2, 3, 3}, rng, -2, 2, true),
              random_tensor<double>({2}, rng, 0.5, 1.5, true), random_tensor<double>({2}, rng, -1, 1, true)};
    for (bool training : {true, false}) {
        const auto r = op_gradient_check(
            [training](const Inputs& t) {
                auto rm = TD::full({2}, 0.1);
                auto rv = TD::full({2}, 1.3);
                return probe_sum(ad::batchnorm2d(t[0], t[1], t[2], rm, rv, training));
            },
            in);
        EXPECT_LT(r.max_rel_error, kOpTol) << "training=" << training;
    }
}

TEST(Softmax, EqualLogitsAreHalf) {
    const auto p = ad::softmax_channels(Tensor<float>::full({1, 2, 3, 3}, 0.7f));
    for (float v : p.values()) EXPECT_FLOAT_EQ(v, 0.5f);
}

TEST(Softmax, ExtremeLogitsDoNotOverflow) {
    const auto p = ad::softmax_channels(Tensor<float>({1, 2, 1, 1}, {1000.f, -1000.f}));
    EXPECT_EQ(p.values()[0], 1.f);
    EXPECT_EQ(p.values()[1], 0.f);
}

TEST(Softmax, ChannelsSumToOne) {
    std::mt19937_64 rng(15);
    const auto x = random_tensor<double>({3, 4, 5, 5}, rng, -30, 30);
    const auto p = ad::softmax_channels(x);
    for (std::size_t n = 0; n < 3; ++n)
        for (std::size_t i = 0; i < 25; ++i) {
            double s = 0;
            for (std::size_t c = 0; c < 4; ++c) {
                const double v = p.values()[(n * 4 + c) * 25 + i];
                EXPECT_GT(v, 0.0);
                s += v;
            }
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
}

TEST(Softmax, GradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(16);
    Inputs in{random_tensor<double>({2, 3, 2, 2}, rng, -2, 2, true)};
    EXPECT_LT(op_gradient_check([](const Inputs& t) { return probe_sum(ad::softmax_channels(t[0])); }, in)
                  .max_rel_error,
              kOpTol);
}

TEST(CrossEntropy, PerfectPredictionIsZero) {
    const std::vector<std::uint8_t> labels{0, 1, 1, 0};
    std::vector<float> p(8);
    for (std::size_t i = 0; i < 4; ++i) {
        p[i] = labels[i] ? 0.f : 1.f;
        p[4 + i] = labels[i] ? 1.f : 0.f;
    }
    const auto loss = ad::cross_entropy_loss(Tensor<float>({1, 2, 2, 2}, p), labels);
    EXPECT_GE(loss.item(), 0.f);
    EXPECT_LE(loss.item(), 1e-11f);
}

TEST(CrossEntropy, UniformIsLn2) {
    const std::vector<std::uint8_t> labels{0, 1, 1, 1, 0, 0, 1, 0};
    const auto loss = ad::cross_entropy_loss(Tensor<double>::full({2, 2, 2, 2}, 0.5), labels);
    EXPECT_NEAR(loss.item(), std::log(2.0), 1e-12);
}

TEST(CrossEntropy, MatchesHandSum) {
    std::mt19937_64 rng(17);
    const auto logits = random_tensor<double>({1, 2, 2, 2}, rng, -3, 3);
    const auto p = ad::softmax_channels(logits);
    const std::vector<std::uint8_t> y{1, 0, 0, 1};
    double hand = 0;
    for (std::size_t k = 0; k < 4; ++k)
        for (std::size_t c = 0; c < 2; ++c) hand -= (y[k] == c ? 1.0 : 0.0) * std::log(p.values()[c * 4 + k]);
    hand /= 4;
    EXPECT_NEAR(ad::cross_entropy_loss(p, y).item(), hand, 1e-6);
    EXPECT_NEAR(ad::cross_entropy_with_logits(logits, y).item(), hand, 1e-6);
}

TEST(CrossEntropy, ShiftInvariantInLogits) {
    std::mt19937_64 rng(18);
    auto logits = random_tensor<double>({2, 2, 3, 3}, rng, -4, 4);
    const auto y = random_labels(18, rng);
    const double before = ad::cross_entropy_with_logits(logits, y).item();
    std::uniform_real_distribution<double> shift(-50, 50);
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t i = 0; i < 9; ++i) {
            const double s = shift(rng);
            logits.values()[(n * 2) * 9 + i] += s;
            logits.values()[(n * 2 + 1) * 9 + i] += s;
        }
    EXPECT_NEAR(ad::cross_entropy_with_logits(logits, y).item(), before, 1e-6);
}

TEST(CrossEntropy, BothFormsHaveCorrectGradients) {
    std::mt19937_64 rng(19);
    const auto y = random_labels(2 * 3 * 3, rng);
    Inputs in{random_tensor<double>({2, 2, 3, 3}, rng, -2, 2, true)};
    EXPECT_LT(op_gradient_check([&](const Inputs& t) { return ad::cross_entropy_with_logits(t[0], y); }, in)
                  .max_rel_error,
              kOpTol);
    EXPECT_LT(op_gradient_check(
                  [&](const Inputs& t) { return ad::cross_entropy_loss(ad::softmax_channels(t[0]), y); }, in)
                  .max_rel_error,
              kOpTol);
}

TEST(CrossEntropy, RejectsBadTargets) {
    const auto p = Tensor<float>::full({1, 2, 2, 2}, 0.5f);
    EXPECT_CTSEG_ERROR(ad::cross_entropy_loss(p, std::vector<std::uint8_t>(3, 0)), ErrorCode::ShapeMismatch);
    EXPECT_CTSEG_ERROR(ad::cross_entropy_loss(Tensor<float>::full({1, 3, 2, 2}, 0.3f),
                                              std::vector<std::uint8_t>(4, 0)),
                       ErrorCode::ShapeMismatch);
}

TEST(Backward, SumGivesOnes) {
    std::mt19937_64 rng(20);
    auto x = random_tensor<float>({2, 3}, rng, -1, 1, true);
    ad::backward(ad::sum(x));
    for (float g : x.grad()) EXPECT_EQ(g, 1.f);
}

TEST(Backward, SquareGivesTwoX) {
    const Tensor<double> x({1}, {3.0}, true);
    ad::backward(ad::sum(ad::mul(x, x)));
    EXPECT_EQ(x.grad()[0], 6.0);
}

TEST(Backward, RepeatedCallsAccumulate) {
    const Tensor<double> x({1}, {3.0}, true);
    const auto loss = ad::sum(ad::mul(x, x));
    ad::backward(loss);
    ad::backward(loss);
    EXPECT_EQ(x.grad()[0], 12.0);
}

TEST(Backward, NonScalarRejected) {
    const Tensor<float> x({2}, {1, 2}, true);
    EXPECT_CTSEG_ERROR(ad::backward(ad::relu(x)), ErrorCode::NotScalar);
}

TEST(Backward, NoGradGuardSkipsRecording) {
    const Tensor<float> x({2}, {1, 2}, true);
    ad::NoGradGuard guard;
    EXPECT_FALSE(ad::sum(x).requires_grad());
}

TEST(Adam, ZeroGradientLeavesParameter) {
    Tensor<float> w({3}, {1.f, -2.f, 0.5f}, true);
    ad::Adam<float> opt({w}, {.lr = 0.1});
    opt.step();
    EXPECT_EQ(w.values(), (std::vector<float>{1.f, -2.f, 0.5f}));
    EXPECT_EQ(opt.steps(), 1);
}

TEST(Adam, FirstStepHasMagnitudeAlpha) {
    const double alpha = 0.01;
    for (double g : {1e-3, -0.04, 2.5, -300.0}) {
        Tensor<double> w({1}, {0.0}, true);
        w.grad()[0] = g;
        ad::Adam<double> opt({w}, {.lr = alpha});
        opt.step();
        const double step = std::abs(w.values()[0]);
        EXPECT_GE(step, 0.999 * alpha) << g;
        EXPECT_LE(step, alpha) << g;
        EXPECT_LT(w.values()[0] * g, 0.0);
    }
}

TEST(Adam, MomentsFollowRecurrence) {
    Tensor<double> w({1}, {1.0}, true);
    ad::Adam<double> opt({w}, {.lr = 0.1});
    w.grad()[0] = 2.0;
    opt.step();
    w.grad()[0] = -1.0;
    opt.step();
    EXPECT_NEAR(opt.first_moment(0)[0], 0.9 * 0.2 + 0.1 * -1.0, 1e-15);
    EXPECT_NEAR(opt.second_moment(0)[0], 0.999 * 0.004 + 0.001 * 1.0, 1e-15);
    EXPECT_EQ(opt.steps(), 2);
}

TEST(Adam, DescendsOnQuadratic) {
    Tensor<double> w({1}, {1.0}, true);
    ad::Adam<double> opt({w}, {.lr = 0.1});
    for (int i = 0; i < 100; ++i) {
        opt.zero_grad();
        ad::backward(ad::sum(ad::mul(w, w)));
        opt.step();
    }
    EXPECT_LT(std::abs(w.values()[0]), 0.5);
}

TEST(Adam, ZeroLearningRateIsBitIdentical) {
    std::mt19937_64 rng(21);
    auto w = random_tensor<float>({10}, rng, -1, 1, true);
    const auto before = w.values();
    ad::Adam<float> opt({w}, {.lr = 0.0});
    for (int i = 0; i < 5; ++i) {
        for (auto& g : w.grad()) g = 0.37f;
        opt.step();
    }
    EXPECT_EQ(w.values(), before);
}

TEST(Adam, RejectsUntrackedParameters) {
    EXPECT_CTSEG_ERROR(ad::Adam<float>({Tensor<float>::zeros({2})}, {}), ErrorCode::MissingGrad);
}

TEST(Checkpoint, RoundTripIsExact) {
    ctseg::testing::TempDir dir("ckpt");
    std::mt19937_64 rng(22);
    std::vector<ad::NamedArray> state;
    for (int k = 0; k < 3; ++k) {
        const auto t = random_tensor<float>({static_cast<std::size_t>(k + 1), 3}, rng, -1e3, 1e3);
        state.push_back({"layer" + std::to_string(k) + ".weight", t.shape(), t.values()});
    }
    state.push_back({"tiny", {1}, {std::numeric_limits<float>::denorm_min()}});
    ad::save_checkpoint(state, dir / "a.ckpt");
    EXPECT_EQ(ad::load_checkpoint(dir / "a.ckpt"), state);
}

TEST(Checkpoint, HeaderLayout) {
    const auto bytes = ad::encode_checkpoint({{"w", {2}, {1.f, -1.f}}});
    ASSERT_EQ(bytes.size(), 4u + 4 + 4 + 1 + 4 + 4 + 8);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "CKP1");
    EXPECT_EQ(bytes[4], 1);
    EXPECT_EQ(bytes[8], 1);
    EXPECT_EQ(bytes[12], 'w');
    // 1.0f little-endian
    EXPECT_EQ(bytes[21], 0x00);
    EXPECT_EQ(bytes[24], 0x3f);
}

TEST(Checkpoint, CorruptInputs) {
    auto bytes = ad::encode_checkpoint({{"w", {2}, {1.f, -1.f}}});
    auto bad = bytes;
    bad[0] = 'X';
    EXPECT_CTSEG_ERROR(ad::decode_checkpoint(bad), ErrorCode::BadMagic);
    EXPECT_CTSEG_ERROR(ad::decode_checkpoint({bytes.begin(), bytes.end() - 1}), ErrorCode::TruncatedPayload);
    bytes.push_back(0);
    EXPECT_CTSEG_ERROR(ad::decode_checkpoint(bytes), ErrorCode::MalformedHeader);
}
