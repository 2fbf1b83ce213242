#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "ssmdyn/dynamics.hpp"

namespace ssmdyn {
namespace {

// Block whose every step has delta_bar = softplus(raw) and unit B, C.
MambaParams constant_block(std::size_t d, std::size_t T, double raw, std::vector<double> A_log) {
    auto p = MambaParams::zeros(d, T, BufferMode::TimeIndexed);
    for (std::size_t j = 0; j < d; ++j) p.A_log[j] = A_log[j];
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t j = 0; j < d; ++j) {
            p.fused.W(t, j) = raw;
            p.fused.W(t, d + j) = 1.0;
            p.fused.W(t, 2 * d + j) = 1.0;
        }
    return p;
}

TEST(LyapunovClosedForm, HalfDecayGivesMinusLogTwo) {
    Tensor dbar(10, 1, std::numbers::ln2);
    const std::vector<double> A_log = {0.0};
    const auto closed = lyapunov_closed_form(A_log, dbar);
    EXPECT_NEAR(closed.per_dim[0], -std::numbers::ln2, 1e-15);
    // the other side: Jacobian-product estimate on a block with the same delta_bar
    const auto block = constant_block(1, 10, 0.0, {0.0});
    const auto numeric = lyapunov_numeric(block, Tensor(10, 1, 1.0));
    EXPECT_NEAR(numeric.per_dim[0], -std::numbers::ln2, 1e-15);
}

TEST(LyapunovClosedForm, ZeroStepFreezesState) {
    const std::vector<double> A_log = {0.3, -1.0, 2.0};
    const auto est = lyapunov_closed_form(A_log, Tensor(7, 3, 0.0));
    EXPECT_EQ(est.lambda_max, 0.0);
}

TEST(LyapunovClosedForm, TwoDimensions) {
    const std::vector<double> A_log = {0.0, std::numbers::ln2};
    const auto est = lyapunov_closed_form(A_log, Tensor(5, 2, 1.0));
    EXPECT_NEAR(est.per_dim[0], -1.0, 1e-15);
    EXPECT_NEAR(est.per_dim[1], -2.0, 1e-15);
    EXPECT_EQ(est.lambda_max, est.per_dim[0]);
    // softplus^{-1}(1) = log(e - 1)
    const auto block = constant_block(2, 5, std::log(std::numbers::e - 1.0), A_log);
    const auto numeric = lyapunov_numeric(block, Tensor(5, 2, 0.5));
    EXPECT_NEAR(numeric.per_dim[0], -1.0, 1e-12);
    EXPECT_NEAR(numeric.per_dim[1], -2.0, 1e-12);
}

TEST(LyapunovClosedForm, NegativeStepIsRejected) {
    Tensor dbar(3, 1, 0.1);
    dbar(1, 0) = -0.2;
    const std::vector<double> A_log = {0.0};
    try {
        lyapunov_closed_form(A_log, dbar);
        FAIL();
    } catch (const Error& e) {
        EXPECT_STREQ(e.what(), "invalid Δ̄");
    }
}

TEST(LyapunovNumeric, ConstantDecay) {
    const auto block = constant_block(3, 20, 0.0, {0.0, 0.0, 0.0});
    const auto est = lyapunov_numeric(block, Tensor(20, 3, 1.0));
    for (double v : est.per_dim) EXPECT_NEAR(v, std::log(0.5), 1e-15);
    EXPECT_EQ(est.T_used, 20u);
}

TEST(LyapunovNumeric, AgreesWithClosedFormAndIsNonPositive) {
    std::mt19937_64 rng(31);
    for (int draw = 0; draw < 50; ++draw) {
        auto block = draw_block(RandomBlockSpec{.d = 8, .T = 512}, rng);
        const auto numeric = lyapunov_numeric(block.params, block.u);
        const auto tr = mamba_forward(block.params, block.u);
        const auto closed = lyapunov_closed_form(block.params.A_log.flat(), tr.delta_bar);
        EXPECT_LE(numeric.lambda_max, 1e-12);
        for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(numeric.per_dim[j], closed.per_dim[j], 1e-12);
    }
}

TEST(DivergenceProbe, TinyEpsilonGivesTinyDeviation) {
    std::mt19937_64 rng(32);
    auto block = draw_block(RandomBlockSpec{.d = 4, .T = 64}, rng);
    const auto tr = divergence_probe(block.params, block.u, 1e-300, Perturb::Both);
    for (double v : tr.deviations) EXPECT_LE(v, 1e-290);
    EXPECT_FALSE(tr.overflowed);
}

TEST(DivergenceProbe, GeometricDecayUnderHalfDecay) {
    const auto block = constant_block(2, 40, 0.0, {0.0, 0.0});
    const double eps = 1e-4;
    // zero drive keeps the nominal trajectory at exactly zero
    const auto tr = divergence_probe(block, Tensor(40, 2, 0.0), eps, Perturb::X0);
    ASSERT_EQ(tr.deviations.size(), 40u);
    for (std::size_t t = 0; t < 40; ++t) {
        const double expect = eps * std::pow(0.5, static_cast<double>(t + 1));
        EXPECT_NEAR(tr.deviations[t], expect, 1e-12 * expect);
    }
    EXPECT_LE(tr.deviations[0], eps * (1 + 1e-12));
}

TEST(DivergenceProbe, InputCannotReachStateWithoutDrive) {
    auto block = constant_block(3, 16, 0.2, {0.0, 1.0, -1.0});
    for (std::size_t t = 0; t < 16; ++t)
        for (std::size_t j = 3; j < 6; ++j) block.fused.W(t, j) = 0.0;  // B = 0
    const auto tr = divergence_probe(block, Tensor(16, 3, 1.0), 1e-3, Perturb::Input);
    for (double v : tr.deviations) EXPECT_EQ(v, 0.0);
}

TEST(DivergenceProbe, OverflowIsReportedNotRaised) {
    const auto block = constant_block(1, 8, -10.0, {-8.0});  // a close to 1
    const auto tr = divergence_probe(block, Tensor(8, 1, 1e6), 1.0, Perturb::Both,
                                     PrecisionPolicy::mixed(NumericFormat::FP16), std::vector<double>{6e4});
    EXPECT_TRUE(tr.overflowed);
}

TEST(DivergenceProbe, RejectsNonPositiveEpsilon) {
    const auto block = constant_block(1, 8, 0.0, {0.0});
    EXPECT_THROW(divergence_probe(block, Tensor(8, 1), 0.0, Perturb::X0), Error);
}

TEST(FitDeviationRate, ExactGeometricTrace) {
    DivergenceTrace tr;
    tr.epsilon = 1e-4;
    for (int t = 1; t <= 30; ++t) tr.deviations.push_back(1e-4 * std::pow(0.5, t));
    EXPECT_NEAR(fit_deviation_rate(tr), std::log(0.5), 1e-10);
}

TEST(FitDeviationRate, FlatTrace) {
    DivergenceTrace tr;
    tr.deviations.assign(20, 3e-3);
    EXPECT_NEAR(fit_deviation_rate(tr), 0.0, 1e-12);
}

TEST(FitDeviationRate, SkipsZerosAndNeedsEightPoints) {
    DivergenceTrace tr;
    for (int t = 0; t < 14; ++t) tr.deviations.push_back(t % 2 ? 0.0 : std::pow(0.5, t));
    EXPECT_THROW(fit_deviation_rate(tr), Error);  // 7 usable points
    tr.deviations.push_back(std::pow(0.5, 14));
    tr.deviations.push_back(std::numeric_limits<double>::infinity());
    EXPECT_NEAR(fit_deviation_rate(tr), std::log(0.5), 1e-12);
}

TEST(FitDeviationRate, RandomValidBlocksDoNotDiverge) {
    std::mt19937_64 rng(33);
    for (int draw = 0; draw < 20; ++draw) {
        auto block = draw_block(RandomBlockSpec{.d = 4, .T = 256}, rng);
        const auto tr = divergence_probe(block.params, block.u, 1e-4, Perturb::Both);
        EXPECT_LE(fit_deviation_rate(tr), 1e-3);
    }
}

TEST(PrecisionProbe, Fp64AgainstItselfIsZero) {
    std::mt19937_64 rng(34);
    auto block = draw_block(RandomBlockSpec{.d = 4, .T = 32}, rng);
    const auto tr = precision_probe(block.params, block.u, PrecisionPolicy::fp64());
    for (double v : tr.deviations) EXPECT_EQ(v, 0.0);
}

TEST(HalfRatio, Cases) {
    const std::vector<double> flat(10, 2.0), zero(10, 0.0), up = {0, 0, 1, 1};
    EXPECT_EQ(half_ratio(flat), 1.0);
    EXPECT_EQ(half_ratio(zero), 0.0);
    EXPECT_TRUE(std::isinf(half_ratio(up)));
}

}  // namespace
}  // namespace ssmdyn
