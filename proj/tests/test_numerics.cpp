#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "refgen/autograd.hpp"
#include "refgen/optim.hpp"
#include "test_util.hpp"

using namespace refgen;
using refgen::testing::random_tensor;

TEST(Matmul, IdentityLeavesOperandUnchanged) {
    std::mt19937_64 rng(1);
    Tensor eye({3, 3});
    for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0f;
    Tensor b = random_tensor({3, 5}, rng);
    Var out = matmul(constant(eye), constant(b));
    for (std::size_t i = 0; i < b.numel(); ++i) EXPECT_EQ(out.value()[i], b[i]);
}

TEST(Matmul, HandArithmetic) {
    Var out = matmul(constant(Tensor({2, 2}, {1, 2, 3, 4})), constant(Tensor({2, 1}, {1, 1})));
    ASSERT_EQ(out.shape(), (Shape{2, 1}));
    EXPECT_FLOAT_EQ(out.value()[0], 3.0f);
    EXPECT_FLOAT_EQ(out.value()[1], 7.0f);
}

TEST(Matmul, MatchesTripleLoopOracle) {
    std::mt19937_64 rng(7);
    Tensor a = random_tensor({4, 5}, rng), b = random_tensor({5, 2}, rng);
    Var out = matmul(constant(a), constant(b));
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 2; ++j) {
            double s = 0.0;
            for (int k = 0; k < 5; ++k) s += static_cast<double>(a[i * 5 + k]) * b[k * 2 + j];
            EXPECT_NEAR(out.value()[i * 2 + j], s, 1e-6);
        }
}

TEST(Matmul, ShapeMismatchThrows) {
    EXPECT_THROW(matmul(constant(Tensor({2, 3})), constant(Tensor({2, 3}))), ValidationError);
}

TEST(Conv1d, DeltaKernelIsIdentity) {
    std::mt19937_64 rng(3);
    Tensor x = random_tensor({1, 1, 9}, rng);
    Var y = conv1d(constant(x), constant(Tensor({1, 1, 1}, {1.0f})), Var{}, 1, 0);
    ASSERT_EQ(y.shape(), x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.value()[i], x[i]);
}

TEST(Conv1d, HandArithmeticStride2) {
    Var y = conv1d(constant(Tensor({1, 1, 4}, {1, 2, 3, 4})), constant(Tensor({1, 1, 2}, {1, 1})), Var{}, 2, 0);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 2}));
    EXPECT_FLOAT_EQ(y.value()[0], 3.0f);
    EXPECT_FLOAT_EQ(y.value()[1], 7.0f);
}

TEST(Conv1d, NonPositiveOutputLengthThrows) {
    EXPECT_THROW(conv1d(constant(Tensor({1, 1, 2})), constant(Tensor({1, 1, 5})), Var{}, 1, 0), ValidationError);
}

TEST(Conv1d, MatchesDirectLoopOracle) {
    std::mt19937_64 rng(11);
    const std::size_t B = 2, Ci = 3, Co = 4, L = 17, K = 4, S = 2, P = 1;
    Tensor x = random_tensor({B, Ci, L}, rng), w = random_tensor({Co, Ci, K}, rng), bias = random_tensor({Co}, rng);
    Var y = conv1d(constant(x), constant(w), constant(bias), S, P);
    const std::size_t lout = (L + 2 * P - K) / S + 1;
    ASSERT_EQ(y.shape(), (Shape{B, Co, lout}));
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t co = 0; co < Co; ++co)
            for (std::size_t t = 0; t < lout; ++t) {
                double s = bias[co];
                for (std::size_t ci = 0; ci < Ci; ++ci)
                    for (std::size_t k = 0; k < K; ++k) {
                        const long idx = static_cast<long>(t * S + k) - static_cast<long>(P);
                        if (idx < 0 || idx >= static_cast<long>(L)) continue;
                        s += static_cast<double>(w[(co * Ci + ci) * K + k]) * x[(b * Ci + ci) * L + idx];
                    }
                EXPECT_NEAR(y.value()[(b * Co + co) * lout + t], s, 1e-5);
            }
}

TEST(Conv1dTranspose, UnitKernelIsIdentity) {
    std::mt19937_64 rng(5);
    Tensor x = random_tensor({1, 1, 6}, rng);
    Var y = conv1d_transpose(constant(x), constant(Tensor({1, 1, 1}, {1.0f})), Var{}, 1, 0);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.value()[i], x[i]);
}

TEST(Conv1dTranspose, InverseGeometryRestoresLength) {
    Tensor x({1, 2, 1024});
    Var down = conv1d(constant(x), constant(Tensor({3, 2, 4})), Var{}, 2, 1);
    EXPECT_EQ(down.shape()[2], 512u);
    Var up = conv1d_transpose(down, constant(Tensor({3, 2, 4})), Var{}, 2, 1);
    EXPECT_EQ(up.shape(), x.shape());
}

TEST(Conv1dTranspose, IsAdjointOfConv1d) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        std::mt19937_64 rng(seed);
        const std::size_t B = 2, Ci = 3, Co = 5, L = 20, K = 4, S = 2, P = 1;
        Tensor x = random_tensor({B, Ci, L}, rng), w = random_tensor({Co, Ci, K}, rng);
        const std::size_t lout = (L + 2 * P - K) / S + 1;
        Tensor y = random_tensor({B, Co, lout}, rng);
        // conv1d weight [Co,Ci,K] is the transpose weight [Ci',Co',K] with Ci'=Co, Co'=Ci.
        Var cx = conv1d(constant(x), constant(w), Var{}, S, P);
        Var ty = conv1d_transpose(constant(y), constant(w), Var{}, S, P);
        ASSERT_EQ(ty.shape(), x.shape());
        double lhs = 0.0, rhs = 0.0;
        for (std::size_t i = 0; i < y.numel(); ++i) lhs += static_cast<double>(cx.value()[i]) * y[i];
        for (std::size_t i = 0; i < x.numel(); ++i) rhs += static_cast<double>(x[i]) * ty.value()[i];
        EXPECT_NEAR(lhs, rhs, 1e-4 * std::max(1.0, std::abs(lhs)));
    }
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
    Var loss = softmax_cross_entropy(constant(Tensor({4, 128}, 0.3f)), {0, 5, 127, 64});
    EXPECT_NEAR(loss.value().item(), std::log(128.0), 1e-5);
    EXPECT_NEAR(loss.value().item(), 4.852, 1e-3);
}

TEST(CrossEntropy, LargeLogitGapDrivesLossToZeroWithoutInf) {
    for (float gap : {10.0f, 100.0f, 1000.0f, 1e30f}) {
        Tensor logits({1, 8});
        logits[3] = gap;
        const float l = softmax_cross_entropy(constant(logits), {3}).value().item();
        EXPECT_TRUE(std::isfinite(l));
        EXPECT_GE(l, 0.0f);
        if (gap >= 100.0f) {
            EXPECT_LT(l, 1e-6f);
        }
    }
}

TEST(CrossEntropy, MatchesLogSumExpOracle) {
    std::mt19937_64 rng(21);
    Tensor logits = random_tensor({6, 10}, rng, -5.0f, 5.0f);
    std::vector<int> targets{0, 3, 9, 2, 2, 7};
    const float got = softmax_cross_entropy(constant(logits), targets).value().item();
    double expect = 0.0;
    for (int i = 0; i < 6; ++i) {
        double s = 0.0;
        for (int j = 0; j < 10; ++j) s += std::exp(static_cast<double>(logits[i * 10 + j]));
        expect += std::log(s) - logits[i * 10 + targets[i]];
    }
    EXPECT_NEAR(got, expect / 6.0, 1e-5);
}

TEST(CrossEntropy, TargetOutOfRangeThrows) {
    EXPECT_THROW(softmax_cross_entropy(constant(Tensor({1, 4})), {4}), ValidationError);
    EXPECT_THROW(softmax_cross_entropy(constant(Tensor({1, 4})), {-2}), ValidationError);
}

TEST(CrossEntropy, IgnoredRowsReceiveZeroGradient) {
    std::mt19937_64 rng(2);
    Var logits = parameter(random_tensor({3, 5}, rng));
    backward(softmax_cross_entropy(logits, {-1, 2, 4}));
    for (int j = 0; j < 5; ++j) EXPECT_EQ(logits.grad()[j], 0.0f);
}

TEST(Backward, SumGivesAllOnes) {
    Var x = parameter(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
    backward(sum(x));
    for (float g : x.grad().values()) EXPECT_EQ(g, 1.0f);
}

TEST(Backward, StopGradientBlocksOneSide) {
    std::mt19937_64 rng(4);
    Var x = parameter(random_tensor({5}, rng));
    Var y = parameter(random_tensor({5}, rng));
    backward(sum(mul(stop_gradient(x), y)));
    for (std::size_t i = 0; i < 5; ++i) {
        EXPECT_EQ(x.grad()[i], 0.0f);
        EXPECT_EQ(y.grad()[i], x.value()[i]);
    }
}

TEST(Backward, StopGradientForwardIsExactIdentity) {
    std::mt19937_64 rng(9);
    Var x = parameter(random_tensor({64}, rng, -1e6f, 1e6f));
    Var s = stop_gradient(x);
    for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(s.value()[i], x.value()[i]);
}

TEST(Backward, UnusedParameterGetsExactlyZero) {
    Var used = parameter(Tensor({3}, 1.0f));
    Var unused = parameter(Tensor({3}, 1.0f));
    Var keep_alive = add(unused, unused);
    backward(sum_sq(used));
    for (float g : unused.grad().values()) EXPECT_EQ(g, 0.0f);
}

TEST(Backward, NonScalarLossThrows) {
    Var x = parameter(Tensor({2}));
    EXPECT_THROW(backward(x), ValidationError);
}

TEST(Backward, SharedSubexpressionAccumulates) {
    Var x = parameter(Tensor({1}, {3.0f}));
    Var y = mul(x, x);  // x used twice
    backward(sum(add(y, x)));
    EXPECT_FLOAT_EQ(x.grad()[0], 7.0f);
}

TEST(Softmax, RowsSumToOne) {
    std::mt19937_64 rng(13);
    for (int trial = 0; trial < 1000; ++trial) {
        Tensor x = random_tensor({1, 128}, rng, -30.0f, 30.0f);
        Var p = softmax_rows(constant(x));
        double s = 0.0;
        for (float v : p.value().values()) s += v;
        ASSERT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
    Var w = parameter(Tensor({4}, {1, -2, 3, -4}));
    Adam opt({w}, {.lr = 0.1f});
    backward(scale(sum(w), 0.0f));
    opt.step();
    EXPECT_EQ(w.value()[0], 1.0f);
    EXPECT_EQ(w.value()[3], -4.0f);
}

TEST(Adam, FirstStepMagnitudeIsLr) {
    Var w = parameter(Tensor({3}, {0.5f, 0.5f, 0.5f}));
    Tensor g({3}, {2.0f, -0.3f, 100.0f});
    Adam opt({w}, {.lr = 0.01f});
    backward(sum(mul(w, constant(g))));
    opt.step();
    for (int i = 0; i < 3; ++i) {
        const float delta = w.value()[i] - 0.5f;
        EXPECT_NEAR(std::abs(delta), 0.01f, 1e-5f);
        EXPECT_EQ(std::signbit(delta), !std::signbit(g[i]));
    }
}

TEST(Adam, QuadraticBowlConverges) {
    std::mt19937_64 rng(17);
    Var w = parameter(random_tensor({10}, rng, -1.0f, 1.0f));
    auto f = [&] { return sum_sq(w); };
    const float f0 = f().value().item();
    Adam opt({w}, {.lr = 1e-2f});
    for (int step = 0; step < 200; ++step) {
        opt.zero_grad();
        backward(f());
        opt.step();
    }
    EXPECT_LE(f().value().item(), 0.01f * f0);
}

TEST(WarmupCosine, WarmsUpThenDecays) {
    WarmupCosine s{.base_lr = 1.0f, .total_steps = 100, .warmup_frac = 0.05f};
    EXPECT_NEAR(s.at(0), 0.2f, 1e-6f);
    EXPECT_NEAR(s.at(4), 1.0f, 1e-6f);
    EXPECT_GT(s.at(50), s.at(80));
    EXPECT_LT(s.at(99), 0.01f);
}

TEST(Determinism, ForwardAndBackwardAreBitIdentical) {
    auto run = [] {
        std::mt19937_64 rng(99);
        Var x = parameter(random_tensor({2, 3, 32}, rng));
        Var w = parameter(random_tensor({4, 3, 3}, rng));
        Var y = gelu(conv1d(x, w, Var{}, 1, 1));
        Var loss = sum_sq(y);
        backward(loss);
        std::vector<float> out(y.value().values().begin(), y.value().values().end());
        for (float g : w.grad().values()) out.push_back(g);
        for (float g : x.grad().values()) out.push_back(g);
        return out;
    };
    EXPECT_EQ(run(), run());
}
