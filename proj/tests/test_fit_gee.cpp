#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace saehd;

namespace {

struct Dense {
    Eigen::MatrixXd V, Uh;  // V and U^{1/2}
};

Dense dense_cov(const AreaBlock& b, double s2g, double s2e) {
    const auto n = b.n();
    Dense d;
    d.V = b.h * s2g * Eigen::MatrixXd::Ones(n, n);
    d.V.diagonal() += s2e * b.k;
    d.Uh = d.V.diagonal().cwiseSqrt().asDiagonal();
    return d;
}

Eigen::VectorXd dense_q(const PsiSpec& s, const Eigen::MatrixXd& Uh, const Eigen::VectorXd& e) {
    Eigen::VectorXd q(e.size());
    for (Eigen::Index j = 0; j < e.size(); ++j) q(j) = Uh(j, j) * psi(s, e(j) / Uh(j, j));
    return q;
}

/// Dense evaluation of area i's regression equations; also returns a scale
/// (sum of absolute contributions) for relative comparisons.
std::pair<Eigen::VectorXd, double> dense_beta_equation(const GroupedData& d, const PsiSpec& s,
                                                       const Eigen::VectorXd& coef, double s2g, double s2e) {
    Eigen::VectorXd F = Eigen::VectorXd::Zero(coef.size());
    double scale = 0.0;
    for (const auto& b : d.blocks()) {
        const auto D = dense_cov(b, s2g, s2e);
        const Eigen::MatrixXd Xt = detail::with_intercept(b.X);
        const Eigen::VectorXd e = b.y - Xt * coef;
        const Eigen::MatrixXd Vi = D.V.inverse();
        const Eigen::VectorXd q = dense_q(s, D.Uh, e);
        F += Xt.transpose() * Vi * q;
        scale += (Xt.cwiseAbs().transpose() * Vi.cwiseAbs() * q.cwiseAbs()).sum();
    }
    return {F, scale};
}

double dense_sigma_gamma_equation(const GroupedData& d, const PsiSpec& s, double beta0,
                                  const std::vector<Eigen::VectorXd>& beta, const std::vector<double>& s2e, double s2g) {
    // full n x n G built block by block into one dense matrix
    const auto n = d.total_n();
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(n, n), Z = Eigen::MatrixXd::Zero(n, d.m());
    Eigen::VectorXd r(n);
    Eigen::Index row = 0;
    for (std::size_t i = 0; i < d.m(); ++i) {
        const auto& b = d[i];
        G.block(row, row, b.n(), b.n()) = dense_cov(b, s2g, s2e[i]).V;
        Z.block(row, i, b.n(), 1).setOnes();
        r.segment(row, b.n()) = (b.y - b.X * beta[i]).array() - beta0;
        row += b.n();
    }
    const Eigen::MatrixXd Ah = G.diagonal().cwiseSqrt().asDiagonal();
    const Eigen::VectorXd q = dense_q(s.untilted(), Ah, r);
    const Eigen::MatrixXd Gi = G.inverse();
    const Eigen::MatrixXd ZZ = Z * Z.transpose();
    return q.dot(Gi * ZZ * Gi * q) - expected_square(s.untilted()) * (Gi * ZZ).trace();
}

double dense_sigma_eps_equation(const GroupedData& d, const PsiSpec& s, const Eigen::VectorXd& coef, double s2g,
                                double s2e) {
    double total = 0.0;
    for (const auto& b : d.blocks()) {
        const auto D = dense_cov(b, s2g, s2e);
        const Eigen::MatrixXd K = b.k.asDiagonal();
        const Eigen::VectorXd e = b.y - detail::with_intercept(b.X) * coef;
        const Eigen::MatrixXd Vi = D.V.inverse();
        const Eigen::VectorXd q = dense_q(s, D.Uh, e);
        total += q.dot(Vi * K * Vi * q) - expected_square(s) * (Vi * K).trace();
    }
    return total;
}

GroupedData with_multipliers(GroupedData d) {
    for (std::size_t i = 0; i < d.m(); ++i) {
        d[i].h = 0.5 + 0.3 * static_cast<double>(i);
        for (Eigen::Index j = 0; j < d[i].n(); ++j) d[i].k(j) = 0.7 + 0.2 * static_cast<double>(j);
    }
    return d;
}

/// Homogeneous-model ML by profiling the variance ratio (oracle).
struct MlOracle {
    double b0, b1, s2g, s2e;
};

MlOracle bhf_ml(const GroupedData& d) {
    const double n = static_cast<double>(d.total_n());
    auto prof = [&](double t) {
        const auto g = detail::gls_at_ratio(d, std::exp(t));
        return -0.5 * (n * std::log(g.rss / n) + g.logdet_sigma);
    };
    double bt = -15, bv = -1e300;
    for (double t = -15; t <= 10; t += 0.01)
        if (const double v = prof(t); v > bv) bv = v, bt = t;
    const auto best = num::golden_max(prof, bt - 0.01, bt + 0.01, 1e-12);
    const auto g = detail::gls_at_ratio(d, std::exp(best.x));
    const double s2e = g.rss / n;
    return {g.coef(0), g.coef(1), std::exp(best.x) * s2e, s2e};
}

std::vector<double> halves(std::size_t m) { return std::vector<double>(m, 0.5); }

}  // namespace

TEST(SolveBeta, IdentityPsiIsGls) {
    const auto d = with_multipliers(testutil::bhf_data(5, 4, 1.0, 2.0, 1.5, 0.8, 31));
    FitControl ctl;
    ctl.tol = 1e-14;
    const GeeProblem pb(d, PsiSpec::identity(), halves(d.m()), ctl);
    const double s2g = 1.3, s2e = 0.6;
    Eigen::Matrix2d M = Eigen::Matrix2d::Zero();
    Eigen::Vector2d v = Eigen::Vector2d::Zero();
    for (const auto& b : d.blocks()) {
        const Eigen::MatrixXd Vi = dense_cov(b, s2g, s2e).V.inverse();
        const Eigen::MatrixXd Xt = detail::with_intercept(b.X);
        M += Xt.transpose() * Vi * Xt;
        v += Xt.transpose() * Vi * b.y;
    }
    const Eigen::Vector2d gls = M.ldlt().solve(v);
    const auto sol = solve_beta(pb, 0, Eigen::Vector2d(0, 0), s2g, s2e);
    EXPECT_NEAR(sol.coef(0), gls(0), 1e-8);
    EXPECT_NEAR(sol.coef(1), gls(1), 1e-8);
}

TEST(SolveBeta, HuberRootSatisfiesEquations) {
    const auto d = testutil::make_data({{1.0, 7.5, 2.2}, {4.0, 3.1, -5.2}}, {{0.2, 1.1, 0.7}, {2.0, 2.4, 1.1}});
    FitControl ctl;
    ctl.tol = 1e-13;
    const auto spec = PsiSpec::huber(1.345);
    const GeeProblem pb(d, spec, {0.3, 0.5}, ctl);
    for (std::size_t i = 0; i < 2; ++i) {
        const double s2g = 0.7, s2e = 1.9;
        const auto sol = solve_beta(pb, i, Eigen::Vector2d(0, 1), s2g, s2e, 1000);
        ASSERT_TRUE(sol.converged);
        const auto [F, scale] = dense_beta_equation(d, pb.psi(i), sol.coef, s2g, s2e);
        EXPECT_LT(F.cwiseAbs().maxCoeff() / scale, 1e-6);
        // block implementation agrees with the dense one
        const auto Fb = beta_equation(pb, i, sol.coef, s2g, s2e);
        EXPECT_LT((Fb - F).cwiseAbs().maxCoeff(), 1e-10 * scale);
    }
}

TEST(SolveBeta, HuberBoundsOutlierInfluence) {
    auto clean = testutil::bhf_data(6, 5, 1.0, 2.0, 0.5, 0.5, 12);
    auto dirty = clean;
    dirty[2].y(1) += 80.0;
    FitControl ctl;
    ctl.tol = 1e-12;
    auto slope = [&](const GroupedData& d, const PsiSpec& s) {
        const GeeProblem pb(d, s, halves(d.m()), ctl);
        return solve_beta(pb, 2, Eigen::Vector2d(1, 2), 0.5, 0.5, 500).coef(1);
    };
    const double ref = slope(clean, PsiSpec::identity());
    EXPECT_LT(std::abs(slope(dirty, PsiSpec::huber(1.345)) - ref), std::abs(slope(dirty, PsiSpec::identity()) - ref));
}

TEST(SigmaEps, IdentitySingleAreaRootIsMeanSquaredResidual) {
    const auto d = testutil::make_data({{1.0, 2.5, 2.2, 4.0, 1.7}}, {{0.2, 1.1, 0.7, 2.0, 0.4}});
    const GeeProblem pb(d, PsiSpec::identity(), {0.5}, FitControl{});
    const Eigen::Vector2d coef(0.9, 1.2);
    const Eigen::VectorXd r = (d[0].y - d[0].X * coef.tail(1)).array() - coef(0);
    const auto root = solve_sigma_eps(pb, 0, coef, 0.0, 1.0);
    EXPECT_TRUE(root.bracketed);
    EXPECT_NEAR(root.x, r.squaredNorm() / 5.0, 1e-8);
}

TEST(SigmaEps, BlockEquationMatchesDense) {
    const auto d = with_multipliers(testutil::bhf_data(3, 4, 1.0, 2.0, 1.5, 0.8, 5));
    const GeeProblem pb(d, PsiSpec::huber(1.345), {0.3, 0.5, 0.8}, FitControl{});
    const Eigen::Vector2d coef(1.1, 1.9);
    for (std::size_t i = 0; i < 3; ++i)
        for (double s : {0.1, 0.9, 4.0}) {
            const double dense = dense_sigma_eps_equation(d, pb.psi(i), coef, 0.8, s);
            EXPECT_NEAR(sigma_eps_equation(pb, i, coef, 0.8, s), dense, 1e-10 * (1 + std::abs(dense)));
        }
}

TEST(SigmaEps, ZeroResidualsClampToFloor) {
    const auto d = testutil::make_data({{3.0, 5.0, 7.0}, {4.0, 6.0}}, {{1.0, 2.0, 3.0}, {1.5, 2.5}});
    const GeeProblem pb(d, PsiSpec::huber(1.345), halves(2), FitControl{});
    const auto root = solve_sigma_eps(pb, 0, Eigen::Vector2d(1.0, 2.0), 0.5, 1.0);
    EXPECT_FALSE(root.bracketed);
    EXPECT_EQ(root.x, pb.var_floor());
}

TEST(SigmaGamma, BlockEquationMatchesDenseOracle) {
    const auto d = with_multipliers(testutil::make_data({{1.0, 2.5, 2.2}, {4.0, 3.1}}, {{0.2, 1.1, 0.7}, {2.0, 2.4}}));
    const GeeProblem pb(d, PsiSpec::huber(1.0), halves(2), FitControl{});
    const std::vector<Eigen::VectorXd> beta{Eigen::VectorXd::Constant(1, 0.8), Eigen::VectorXd::Constant(1, 1.4)};
    const std::vector<double> s2e{0.6, 1.7};
    for (double g : {1e-4, 0.3, 2.0, 50.0}) {
        const double dense = dense_sigma_gamma_equation(d, PsiSpec::huber(1.0), 0.5, beta, s2e, g);
        EXPECT_NEAR(sigma_gamma_equation(pb, 0.5, beta, s2e, g), dense, 1e-10 * (1 + std::abs(dense)));
    }
}

TEST(SigmaGamma, NoBetweenAreaSignalClampsToFloor) {
    // residuals sum to zero inside every area
    const auto d = testutil::make_data({{1.5, 2.5, 2.0}, {3.0, 5.0}}, {{0.0, 0.0, 0.0}, {1.0, 1.0}});
    const GeeProblem pb(d, PsiSpec::huber(1.345), halves(2), FitControl{});
    const std::vector<Eigen::VectorXd> beta(2, Eigen::VectorXd::Constant(1, 2.0));
    const auto root = solve_sigma_gamma(pb, 2.0, beta, {1.0, 1.0}, 1.0);
    EXPECT_FALSE(root.bracketed);
    EXPECT_EQ(root.x, pb.var_floor());
}

TEST(SigmaGamma, RecoversAreaVarianceUnderS00) {
    int inside = 0;
    const int reps = 100;
    for (int r = 0; r < reps; ++r) {
        const auto d = testutil::scenario_sample(Scenario::S00, 100, 4, 500 + r);
        const auto f = fit_gee(d, PsiSpec::identity(), halves(d.m()));
        if (f.sigma2_gamma() >= 2.0 && f.sigma2_gamma() <= 4.2) ++inside;
    }
    EXPECT_GE(inside, 90);
}

TEST(SigmaEpsFit, RecoversErrorVarianceUnderS00) {
    int inside = 0;
    const int reps = 20;
    for (int r = 0; r < reps; ++r) {
        const auto d = testutil::scenario_sample(Scenario::S00, 100, 4, 700 + r);
        const auto f = fit_gee(d, PsiSpec::huber(1.345), halves(d.m()));
        if (f.params[7].sigma2_eps >= 4.5 && f.params[7].sigma2_eps <= 7.5) ++inside;
    }
    EXPECT_GE(inside, 18);
}

TEST(FitGee, NoiseFreeLineConvergesImmediately) {
    std::vector<std::vector<double>> y(3), x(3);
    for (int j = 0; j < 12; ++j) {
        x[j % 3].push_back(0.1 + 0.25 * j);
        y[j % 3].push_back(10.0 + 5.0 * x[j % 3].back());
    }
    const auto d = testutil::make_data(y, x);
    const auto f = fit_gee(d, PsiSpec::huber(1.345), halves(3));
    EXPECT_TRUE(f.converged);
    EXPECT_LE(f.iterations, 3);
    EXPECT_NEAR(f.beta0(), 10.0, 1e-6);
    for (const auto& pv : f.params) {
        EXPECT_NEAR(pv.beta(0), 5.0, 1e-6);
        EXPECT_EQ(pv.sigma2_eps, FitControl{}.var_floor);
    }
    EXPECT_EQ(f.sigma2_gamma(), FitControl{}.var_floor);
}

TEST(FitGee, IdentityPsiReducesToHomogeneousMl) {
    const auto d = testutil::bhf_data(30, 5, 2.0, 1.5, 2.0, 1.0, 77);
    GeeOptions opt;
    opt.ctl.tol = 1e-12;
    opt.ctl.max_iter = 2000;
    const auto f = fit_gee(d, PsiSpec::identity(), halves(d.m()), opt);
    ASSERT_TRUE(f.converged);
    const auto ml = bhf_ml(d);
    for (const auto& pv : f.params) {
        EXPECT_NEAR(pv.beta(0), ml.b1, 1e-4);
        EXPECT_NEAR(pv.sigma2_eps, ml.s2e, 1e-4);
    }
    EXPECT_NEAR(f.beta0(), ml.b0, 1e-4);
    EXPECT_NEAR(f.sigma2_gamma(), ml.s2g, 1e-4);
}

TEST(FitGee, IdenticalAreasGiveIdenticalParameters) {
    const auto one = testutil::bhf_data(1, 6, 1.0, 2.0, 0.0, 1.0, 3);
    std::vector<AreaBlock> blocks(4, one[0]);
    for (std::size_t i = 0; i < 4; ++i) blocks[i].id = "A" + std::to_string(i);
    const GroupedData d(blocks, 1);
    const auto f = fit_gee(d, PsiSpec::identity(), halves(4));
    for (std::size_t i = 1; i < 4; ++i) {
        EXPECT_NEAR(f.area_intercepts[i], f.area_intercepts[0], 1e-8);
        EXPECT_NEAR(f.params[i].beta(0), f.params[0].beta(0), 1e-8);
        EXPECT_NEAR(f.params[i].sigma2_eps, f.params[0].sigma2_eps, 1e-8);
    }
}

// Each equation is scaled into a parameter step: re-solving it with the other
// parameters held at the returned values moves its parameter by less than
// 10 tol on the same relative scale the convergence test uses.
TEST(FitGee, ConvergedFitSatisfiesEquations) {
    const auto d = testutil::scenario_sample(Scenario::SBeta0, 20, 5, 41);
    const auto taus = estimate_taus(d, TauGrid(), 1.345).elb_tau;
    GeeOptions opt;
    const auto f = fit_gee(d, PsiSpec::huber(1.345), taus, opt);
    ASSERT_TRUE(f.converged);
    const GeeProblem pb(d, PsiSpec::huber(1.345), taus, opt.ctl);
    const double s2g = f.sigma2_gamma();
    std::vector<Eigen::VectorXd> slopes;
    std::vector<double> s2e;
    for (std::size_t i = 0; i < d.m(); ++i) {
        Eigen::Vector2d coef(f.area_intercepts[i], f.params[i].beta(0));
        const double se = f.params[i].sigma2_eps;
        const auto b = solve_beta(pb, i, coef, s2g, se, 1000);
        for (Eigen::Index c = 0; c < 2; ++c)
            EXPECT_LT(std::abs(b.coef(c) - coef(c)) / (std::abs(coef(c)) + pb.coef_scale(c)), 10 * opt.ctl.tol);
        const double re = solve_sigma_eps(pb, i, coef, s2g, se).x;
        EXPECT_LT(std::abs(re - se) / (se + pb.var_scale()), 10 * opt.ctl.tol) << "area " << i;
        slopes.push_back(f.params[i].beta);
        s2e.push_back(se);
    }
    const double rg = solve_sigma_gamma(pb, f.beta0(), slopes, s2e, s2g).x;
    EXPECT_LT(std::abs(rg - s2g) / (s2g + pb.var_scale()), 10 * opt.ctl.tol);
}

TEST(FitGee, VariancesStayAboveFloorEveryIteration) {
    const auto d = testutil::scenario_sample(Scenario::SBetaSigma, 20, 4, 8);
    GeeOptions opt;
    for (int it = 1; it <= 6; ++it) {
        opt.ctl.max_iter = it;
        const auto f = fit_gee(d, PsiSpec::huber(1.345), halves(d.m()), opt);
        EXPECT_GE(f.sigma2_gamma(), opt.ctl.var_floor);
        for (const auto& pv : f.params) {
            EXPECT_GE(pv.sigma2_eps, opt.ctl.var_floor);
            EXPECT_EQ(pv.beta0, f.beta0());
            EXPECT_EQ(pv.sigma2_gamma, f.sigma2_gamma());
        }
    }
}

TEST(FitGee, PermutingAreasPermutesOutput) {
    const auto d = testutil::scenario_sample(Scenario::SBeta0, 12, 4, 19);
    std::vector<double> taus;
    for (std::size_t i = 0; i < d.m(); ++i) taus.push_back(0.2 + 0.05 * static_cast<double>(i));
    std::vector<AreaBlock> rev(d.blocks().rbegin(), d.blocks().rend());
    std::vector<double> rtaus(taus.rbegin(), taus.rend());
    const auto a = fit_gee(d, PsiSpec::huber(1.345), taus);
    const auto b = fit_gee(GroupedData(rev, 1), PsiSpec::huber(1.345), rtaus);
    const auto m = d.m();
    for (std::size_t i = 0; i < m; ++i) {
        EXPECT_NEAR(a.params[i].beta(0), b.params[m - 1 - i].beta(0), 1e-6);
        EXPECT_NEAR(a.params[i].sigma2_eps, b.params[m - 1 - i].sigma2_eps, 1e-6 * (1 + a.params[i].sigma2_eps));
    }
    EXPECT_NEAR(a.sigma2_gamma(), b.sigma2_gamma(), 1e-6 * (1 + a.sigma2_gamma()));
}

TEST(FitGee, WorkerCountDoesNotChangeResult) {
    const auto d = testutil::scenario_sample(Scenario::SBetaSigma, 16, 4, 23);
    const auto taus = estimate_taus(d, TauGrid(), 1.345).elb_tau;
    GeeOptions one, many;
    many.workers = 4;
    const auto a = fit_gee(d, PsiSpec::huber(1.345), taus, one);
    const auto b = fit_gee(d, PsiSpec::huber(1.345), taus, many);
    ASSERT_EQ(a.iterations, b.iterations);
    for (std::size_t i = 0; i < d.m(); ++i) {
        EXPECT_EQ(a.params[i].beta(0), b.params[i].beta(0));
        EXPECT_EQ(a.params[i].sigma2_eps, b.params[i].sigma2_eps);
    }
    EXPECT_EQ(a.sigma2_gamma(), b.sigma2_gamma());
}

TEST(FitGee, TauArgumentsValidated) {
    const auto d = testutil::scenario_sample(Scenario::S00, 5, 4, 2);
    EXPECT_THROW(fit_gee(d, PsiSpec::huber(1.345), {0.5, 0.5}), std::invalid_argument);
    FitControl bad;
    bad.tol = 0;
    GeeOptions opt;
    opt.ctl = bad;
    EXPECT_THROW(fit_gee(d, PsiSpec::huber(1.345), halves(5), opt), std::invalid_argument);
}
