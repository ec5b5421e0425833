#include "test_util.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace saehd;

namespace {

FitResult shared_fit(std::size_t m, double b0, double b1, double s2g, double s2e) {
    FitResult f;
    for (std::size_t i = 0; i < m; ++i) f.params.push_back({b0, Eigen::VectorXd::Constant(1, b1), s2g, s2e, 0.5});
    return f;
}

}  // namespace

TEST(Shrinkage, Examples) {
    EXPECT_DOUBLE_EQ(shrinkage(6, 4, 3), 1.0 / 3.0);
    EXPECT_EQ(shrinkage(2.5, 7, 0), 1.0);
    EXPECT_EQ(shrinkage(0, 7, 2.5), 0.0);
    EXPECT_EQ(shrinkage(0, 7, 0), 1.0);
}

TEST(Ebp, ConvexAndRegressionFormsAgree) {
    std::mt19937_64 rng(11);
    std::normal_distribution<double> z;
    std::uniform_real_distribution<double> u(0.01, 10);
    for (int t = 0; t < 200; ++t) {
        AreaBlock b;
        const int n = 1 + t % 9, p = 1 + t % 3;
        b.y = Eigen::VectorXd(n);
        b.X = Eigen::MatrixXd(n, p);
        for (int j = 0; j < n; ++j) {
            b.y(j) = 10 * z(rng);
            for (int c = 0; c < p; ++c) b.X(j, c) = 5 * z(rng);
        }
        b.k = Eigen::VectorXd::Ones(n);
        b.Xbar = Eigen::VectorXd(p);
        for (int c = 0; c < p; ++c) b.Xbar(c) = 5 * z(rng);
        ParamVector pv{z(rng), Eigen::VectorXd(p), u(rng), u(rng), 0.5};
        for (int c = 0; c < p; ++c) pv.beta(c) = z(rng);
        const double a = ebp_area(b, pv), r = ebp_area_regression_form(b, pv);
        EXPECT_NEAR(a, r, 1e-12 * (1 + std::abs(a)));
    }
}

TEST(Ebp, ExtremeShrinkageForms) {
    const auto d = testutil::make_data({{1.0, 4.0, 2.5}}, {{0.5, 1.5, 2.0}});
    const auto& b = d[0];
    // B = 0: sigma2_eps = 0
    const ParamVector none{2.0, Eigen::VectorXd::Constant(1, 1.5), 3.0, 0.0, 0.5};
    EXPECT_NEAR(ebp_area(b, none), b.ybar() + (b.Xbar(0) - b.xbar()(0)) * 1.5, 1e-12);
    // B = 1: sigma2_gamma = 0
    const ParamVector full{2.0, Eigen::VectorXd::Constant(1, 1.5), 0.0, 3.0, 0.5};
    EXPECT_NEAR(ebp_area(b, full), 2.0 + b.Xbar(0) * 1.5, 1e-12);
}

TEST(Ebp, ApproachesSurveyRegressionAsErrorVarianceVanishes) {
    const auto d = testutil::make_data({{1.0, 4.0, 2.5}}, {{0.5, 1.5, 2.0}});
    const auto& b = d[0];
    const double target = b.ybar() + (b.Xbar(0) - b.xbar()(0)) * 1.5;
    double prev = 1e300;
    for (double s2e : {1.0, 1e-2, 1e-4, 1e-6}) {
        const double gap = std::abs(ebp_area(b, {2.0, Eigen::VectorXd::Constant(1, 1.5), 3.0, s2e, 0.5}) - target);
        EXPECT_LT(gap, prev);
        prev = gap;
    }
    EXPECT_LT(prev, 1e-5);
}

TEST(EbpFinite, SamplingFractionExamples) {
    auto d = testutil::make_data({{1.0, 4.0, 2.5, 3.0}, {2.0, 2.0}}, {{0.5, 1.5, 2.0, 1.0}, {1.0, 3.0}});
    d[1].N = 2;  // census area
    const auto fit = shared_fit(2, 1.0, 0.8, 2.0, 4.0);
    const auto e = ebp(d, fit), fin = ebp_finite(d, fit);
    EXPECT_NEAR(fin[0], 0.04 * d[0].ybar() + 0.96 * e[0], 1e-12);
    EXPECT_EQ(fin[1], d[1].ybar());
    d[0].N = 100000000;
    EXPECT_NEAR(ebp_finite(d, fit)[0], e[0], 1e-6);
}

TEST(EbpFinite, MonotoneBetweenDirectAndEbp) {
    auto d = testutil::make_data({{1.0, 4.0, 2.5, 3.0}}, {{0.5, 1.5, 2.0, 1.0}});
    const auto fit = shared_fit(1, 1.0, 0.8, 2.0, 4.0);
    const double e = ebp(d, fit)[0], y = d[0].ybar();
    double prev = e;
    for (long N : {1000L, 100L, 20L, 8L, 4L}) {
        d[0].N = N;
        const double v = ebp_finite(d, fit)[0];
        EXPECT_LE(std::abs(v - y), std::abs(prev - y) + 1e-15);
        EXPECT_LE(std::min(e, y) - 1e-12, v);
        EXPECT_LE(v, std::max(e, y) + 1e-12);
        prev = v;
    }
}

TEST(EblupBhf, Examples) {
    auto d = testutil::make_data({{1.0, 4.0, 2.5}, {3.0, 5.0}}, {{0.5, 1.5, 2.0}, {1.0, 3.0}});
    BhfFit syn;
    syn.beta0 = 1.0;
    syn.beta = Eigen::VectorXd::Constant(1, 0.8);
    syn.sigma2_eps = 2.0;
    syn.sigma2_gamma = 0.0;
    const auto s = eblup_bhf(d, syn);
    EXPECT_NEAR(s[0], 1.0 + 0.8 * d[0].Xbar(0), 1e-12);
    // sample mean of x equal to the population mean and no shrinkage
    d[1].Xbar = d[1].xbar();
    BhfFit direct_like = syn;
    direct_like.sigma2_eps = 0.0;
    direct_like.sigma2_gamma = 1.0;
    EXPECT_NEAR(eblup_bhf(d, direct_like)[1], d[1].ybar(), 1e-12);
}

TEST(EblupBhf, EqualsEbpWithSharedParameters) {
    const auto d = testutil::bhf_data(7, 5, 1.0, 2.0, 1.5, 2.0, 3);
    const auto bhf = fit_bhf_reml(d);
    const auto fit = shared_fit(d.m(), bhf.beta0, bhf.beta(0), bhf.sigma2_gamma, bhf.sigma2_eps);
    const auto a = eblup_bhf(d, bhf), b = ebp(d, fit);
    for (std::size_t i = 0; i < d.m(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12 * (1 + std::abs(a[i])));
}

TEST(Mqcd, Examples) {
    auto d = testutil::make_data({{1.0, 4.0, 2.5}, {3.0, 5.0}}, {{0.5, 1.5, 2.0}, {1.0, 3.0}});
    const std::vector<Eigen::VectorXd> zero(2, Eigen::VectorXd::Zero(1));
    EXPECT_EQ(mqcd(d, zero)[0], d[0].ybar());
    d[1].Xbar = d[1].xbar();
    const std::vector<Eigen::VectorXd> slope(2, Eigen::VectorXd::Constant(1, 1.7));
    EXPECT_NEAR(mqcd(d, slope)[1], d[1].ybar(), 1e-12);
    // same slopes, no shrinkage: identical to the EBP
    const auto fit = shared_fit(2, 0.3, 1.7, 1.0, 0.0);
    const auto e = ebp(d, fit), q = mqcd(d, slope);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(e[i], q[i], 1e-12);
}

TEST(MqSynthetic, NoiseFreeLineGivesPopulationMeanOfLine) {
    std::vector<std::vector<double>> y(3), x(3);
    for (int j = 0; j < 15; ++j) {
        x[j % 3].push_back(0.2 * j);
        y[j % 3].push_back(4.0 - 1.5 * x[j % 3].back());
    }
    const auto d = testutil::make_data(y, x);
    MQFits fits(d, 1.345);
    const auto s = mq_synthetic(d, {0.3, 0.5, 0.8}, fits);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(s[i], 4.0 - 1.5 * d[i].Xbar(0), 1e-8);
}

TEST(MqSynthetic, MedianLineCloseToOlsOnSymmetricNoise) {
    const auto d = testutil::bhf_data(30, 20, 1.0, 2.0, 0.0, 1.0, 17);
    MQFits fits(d, 1.345);
    const auto s = mq_synthetic(d, std::vector<double>(d.m(), 0.5), fits);
    const auto ols = detail::gls_at_ratio(d, 0.0).coef;
    // sd of the OLS synthetic value is about 0.1 here
    for (std::size_t i = 0; i < d.m(); ++i) EXPECT_NEAR(s[i], ols(0) + ols(1) * d[i].Xbar(0), 0.1);
}

TEST(Direct, Means) {
    const auto d = testutil::make_data({{5, 5, 5}, {1, 2, 3}}, {{0, 1, 2}, {0, 1, 2}});
    EXPECT_EQ(direct(d)[0], 5.0);
    EXPECT_EQ(direct(d)[1], 2.0);
}

TEST(PredictAll, FillsEveryColumn) {
    const auto d = testutil::scenario_sample(Scenario::S00, 15, 4, 6);
    EstimatorConfig cfg;
    const auto f = fit_all(d, cfg, true);
    const auto ps = predict_all(d, cfg, f);
    for (const auto* v : {&ps.direct, &ps.eblup_bhf, &ps.ebp, &ps.ebp_mle, &ps.ebp_finite, &ps.mq_synth, &ps.mqcd,
                          &ps.B_ebp, &ps.B_bhf, &ps.B_mle})
        ASSERT_EQ(v->size(), d.m());
    for (double B : ps.B_ebp) {
        EXPECT_GE(B, 0.0);
        EXPECT_LE(B, 1.0);
    }
}
