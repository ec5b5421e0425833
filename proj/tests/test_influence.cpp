#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace saehd;

TEST(Psi, Examples) {
    EXPECT_DOUBLE_EQ(psi(PsiSpec::huber(1.345, 0.5), 2.0), 1.345);
    EXPECT_NEAR(psi(PsiSpec::huber(1.345, 0.7), 2.0), 1.883, 1e-12);
    EXPECT_DOUBLE_EQ(psi(PsiSpec::identity(0.5), -0.4), -0.4);
    EXPECT_DOUBLE_EQ(psi(PsiSpec::sign(0.5), -3.0), -1.0);
    EXPECT_DOUBLE_EQ(psi(PsiSpec::sign(0.5), 0.0), 0.0);
}

TEST(Psi, DerivativeExamplesAndKinkConvention) {
    const auto h = PsiSpec::huber(1.345);
    EXPECT_DOUBLE_EQ(psi_deriv(h, 0.5), 1.0);
    EXPECT_DOUBLE_EQ(psi_deriv(h, 3.0), 0.0);
    EXPECT_DOUBLE_EQ(psi_deriv(PsiSpec::identity(0.7), -1.0), 0.6);
    // left limits
    EXPECT_DOUBLE_EQ(psi_deriv(h, 1.345), 1.0);
    EXPECT_DOUBLE_EQ(psi_deriv(h, -1.345), 0.0);
    EXPECT_DOUBLE_EQ(psi_deriv(PsiSpec::identity(0.7), 0.0), 0.6);
    EXPECT_DOUBLE_EQ(psi_deriv(PsiSpec::sign(0.5), 0.0), 0.0);
}

TEST(Psi, InvalidSpecsRejected) {
    EXPECT_THROW(PsiSpec::huber(0.0), std::invalid_argument);
    EXPECT_THROW(PsiSpec::huber(1.0, 1.0), std::invalid_argument);
    EXPECT_THROW(PsiSpec::identity(0.0), std::invalid_argument);
}

class PsiProperties : public ::testing::TestWithParam<PsiSpec> {};

TEST_P(PsiProperties, MonotoneNonDecreasing) {
    const auto s = GetParam();
    double prev = psi(s, -20.0);
    for (double r = -20.0; r <= 20.0; r += 0.01) {
        const double v = psi(s, r);
        EXPECT_GE(v, prev - 1e-15) << "r=" << r;
        prev = v;
    }
}

TEST_P(PsiProperties, TiltReductionAndSkewSymmetry) {
    const auto u = GetParam().untilted();
    for (double r = -5.0; r <= 5.0; r += 0.037) {
        EXPECT_DOUBLE_EQ(psi(u, r), psi_base(u, r));
        EXPECT_DOUBLE_EQ(psi(u, -r), -psi(u, r));
    }
}

TEST_P(PsiProperties, DerivativeMatchesFiniteDifferences) {
    const auto s = GetParam();
    const double h = 1e-6;
    for (double r = -4.0; r <= 4.0; r += 0.0137) {
        const bool near_kink = std::abs(r) < 1e-3 || (s.kind == PsiKind::Huber && std::abs(std::abs(r) - s.c) < 1e-3);
        if (near_kink) continue;
        const double fd = (psi(s, r + h) - psi(s, r - h)) / (2 * h);
        EXPECT_NEAR(psi_deriv(s, r), fd, 1e-6) << "r=" << r;
    }
}

TEST_P(PsiProperties, ExpectedSquareMatchesQuadrature) {
    const auto s = GetParam();
    auto f = [&](double u) { return psi(s, u) * psi(s, u) * num::normal_pdf(u); };
    const double q = testutil::simpson(f, -12.0, 0.0, 1e-14) + testutil::simpson(f, 0.0, 12.0, 1e-14);
    EXPECT_NEAR(expected_square(s), q, 1e-10 * q);
}

INSTANTIATE_TEST_SUITE_P(Specs, PsiProperties,
                         ::testing::Values(PsiSpec::huber(1.345), PsiSpec::huber(1.345, 0.2), PsiSpec::huber(0.5, 0.9),
                                           PsiSpec::huber(3.0, 0.65), PsiSpec::identity(), PsiSpec::identity(0.3),
                                           PsiSpec::sign(), PsiSpec::sign(0.8)));

TEST(Psi, HuberBoundedByTwiceC) {
    for (double tau : {0.01, 0.3, 0.5, 0.99})
        for (double r = -100; r <= 100; r += 0.5) EXPECT_LE(std::abs(psi(PsiSpec::huber(1.345, tau), r)), 2 * 1.345);
}

TEST(ExpectedSquare, ClosedFormsAndLimits) {
    EXPECT_EQ(expected_square(PsiSpec::identity()), 1.0);
    EXPECT_EQ(expected_square(PsiSpec::sign()), 1.0);
    const double c = 1.345;
    const double Phi = num::normal_cdf(c), phi = num::normal_pdf(c);
    const double ref = (2 * Phi - 1) - 2 * c * phi + 2 * c * c * (1 - Phi);
    EXPECT_NEAR(expected_square(PsiSpec::huber(c)), ref, 1e-15);
    EXPECT_NEAR(expected_square(PsiSpec::huber(40.0)), 1.0, 1e-12);
    EXPECT_LT(expected_square(PsiSpec::huber(1.0)), expected_square(PsiSpec::huber(2.0)));
}
