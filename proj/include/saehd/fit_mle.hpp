#pragma once

#include "saehd/linalg.hpp"
#include "saehd/model.hpp"
#include "saehd/numerics.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <vector>

namespace saehd {

/// REML fit of the homogeneous nested error model (shared slope and error variance).
struct BhfFit {
    double beta0 = 0.0;
    Eigen::VectorXd beta;
    double sigma2_gamma = 0.0;
    double sigma2_eps = 0.0;
    double ratio = 0.0;  // sigma2_gamma / sigma2_eps
    double reml = 0.0;   // profile REML criterion at the optimum
    std::vector<double> B;

    /// Replicates the shared parameters into per-area vectors.
    std::vector<ParamVector> as_params(std::size_t m, double tau = 0.5) const {
        return std::vector<ParamVector>(m, ParamVector{beta0, beta, sigma2_gamma, sigma2_eps, tau});
    }
};

namespace detail {

struct GlsPieces {
    Eigen::VectorXd coef;
    double rss = 0.0;
    double logdet_sigma = 0.0;
    double logdet_M = 0.0;
};

/// GLS for covariance sigma2_eps * (K_i + ratio h_i 1 1') per area.
inline GlsPieces gls_at_ratio(const GroupedData& data, double ratio) {
    const auto q = static_cast<Eigen::Index>(data.p()) + 1;
    Eigen::MatrixXd M = Eigen::MatrixXd::Zero(q, q);
    Eigen::VectorXd v = Eigen::VectorXd::Zero(q);
    double yy = 0.0, logdet = 0.0;
    for (const auto& b : data.blocks()) {
        const Eigen::MatrixXd Xt = with_intercept(b.X);
        const Eigen::VectorXd u = b.k.cwiseInverse();
        const double a = ratio * b.h;
        const double su = u.sum();
        const double c = a / (1.0 + a * su);
        const Eigen::MatrixXd XtKinv = Xt.transpose() * u.asDiagonal();
        const Eigen::VectorXd Xu = Xt.transpose() * u;
        const double yu = b.y.dot(u);
        M.noalias() += XtKinv * Xt - c * Xu * Xu.transpose();
        v.noalias() += XtKinv * b.y - c * Xu * yu;
        yy += b.y.dot(u.asDiagonal() * b.y) - c * yu * yu;
        logdet += b.k.array().log().sum() + std::log1p(a * su);
    }
    GlsPieces g;
    g.coef = solve_small(M, v, "GLS");
    g.rss = std::max(yy - v.dot(g.coef), 0.0);
    g.logdet_sigma = logdet;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(M);
    g.logdet_M = ldlt.vectorD().array().log().sum();
    return g;
}

}  // namespace detail

/// Profile REML criterion (constants dropped) at variance ratio sigma2_gamma / sigma2_eps.
inline double reml_criterion(const GroupedData& data, double ratio) {
    const auto g = detail::gls_at_ratio(data, ratio);
    const double df = static_cast<double>(data.total_n()) - static_cast<double>(data.p() + 1);
    const double s2 = std::max(g.rss / df, std::numeric_limits<double>::min());
    return -0.5 * (df * std::log(s2) + g.logdet_sigma + g.logdet_M);
}

inline BhfFit fit_bhf_reml(const GroupedData& data) {
    const double df = static_cast<double>(data.total_n()) - static_cast<double>(data.p() + 1);
    if (!(df > 0)) throw SingularSystemError("REML needs more units than coefficients");
    // coarse log-grid over the ratio, then golden refinement around the best cell
    constexpr double tlo = -18.420680743952367;  // log 1e-8
    constexpr double thi = 13.815510557964274;   // log 1e6
    constexpr int cells = 64;
    double best_t = tlo, best = -std::numeric_limits<double>::infinity();
    int best_i = 0;
    for (int i = 0; i <= cells; ++i) {
        const double t = tlo + (thi - tlo) * i / cells;
        const double v = reml_criterion(data, std::exp(t));
        if (v > best) {
            best = v;
            best_t = t;
            best_i = i;
        }
    }
    const double h = (thi - tlo) / cells;
    auto refined = num::golden_max([&](double t) { return reml_criterion(data, std::exp(t)); },
                                   best_t - (best_i > 0 ? h : 0.0), best_t + (best_i < cells ? h : 0.0), 1e-10);
    double ratio = std::exp(refined.x);
    double crit = refined.fx;
    if (best_i == 0) {
        const double at_zero = reml_criterion(data, 0.0);
        if (at_zero >= crit) {
            ratio = 0.0;
            crit = at_zero;
        }
    }
    const auto g = detail::gls_at_ratio(data, ratio);
    BhfFit fit;
    fit.beta0 = g.coef(0);
    fit.beta = g.coef.tail(g.coef.size() - 1);
    fit.sigma2_eps = g.rss / df;
    fit.sigma2_gamma = ratio * fit.sigma2_eps;
    fit.ratio = ratio;
    fit.reml = crit;
    for (const auto& b : data.blocks()) {
        const double se = fit.sigma2_eps / static_cast<double>(b.n());
        fit.B.push_back(se + fit.sigma2_gamma > 0 ? se / (se + fit.sigma2_gamma) : 1.0);
    }
    return fit;
}

inline BhfFit fit_bhf_reml(const Dataset& ds) { return fit_bhf_reml(group(ds)); }

namespace detail {

inline void require_unit_multipliers(const GroupedData& data) {
    if (!data.unit_multipliers())
        throw std::invalid_argument("the ML fitter supports only h = 1 and k = 1");
}

/// One area's log-likelihood term, given its residual summaries.
inline double area_loglik(double n, double s2e, double s2g, double ss, double sum_e) {
    const double v = s2e + n * s2g;
    return -0.5 * (n * std::log(s2e) + std::log(v / s2e) + (ss - s2g / v * sum_e * sum_e) / s2e);
}

struct ResidualSummary {
    double ss = 0.0;
    double sum = 0.0;
};

inline ResidualSummary residual_summary(const AreaBlock& b, double beta0, const Eigen::VectorXd& beta) {
    const Eigen::VectorXd e = (b.y - b.X * beta).array() - beta0;
    return {e.squaredNorm(), e.sum()};
}

inline double loglik_fixed(const GroupedData& data, const std::vector<ParamVector>& params) {
    double total = 0.0;
    for (std::size_t i = 0; i < data.m(); ++i) {
        const auto& pv = params[i];
        const auto rs = residual_summary(data[i], pv.beta0, pv.beta);
        total += area_loglik(static_cast<double>(data[i].n()), pv.sigma2_eps, pv.sigma2_gamma, rs.ss, rs.sum);
    }
    return total;
}

}  // namespace detail

/// Gaussian log-likelihood of the area-specific model (constant dropped).
inline double loglik(const GroupedData& data, const std::vector<ParamVector>& params) {
    detail::require_unit_multipliers(data);
    if (params.size() != data.m()) throw std::invalid_argument("loglik: one ParamVector per area required");
    for (const auto& pv : params)
        if (!(pv.sigma2_eps > 0.0) || !(pv.sigma2_gamma > 0.0))
            throw std::domain_error("loglik: variances must be > 0");
    return detail::loglik_fixed(data, params);
}

/// ML fit by cyclic coordinate ascent: intercept, per-area slopes, per-area
/// error variances, then the area-effect variance by line search.
inline FitResult fit_mle(const GroupedData& data, const FitControl& ctl = {}) {
    ctl.check();
    detail::require_unit_multipliers(data);
    const std::size_t m = data.m();
    const auto p = static_cast<Eigen::Index>(data.p());
    const double floor = ctl.var_floor;
    const double ceil = ctl.bracket_max > 0 ? ctl.bracket_max : 1e6 * std::max(data.y_variance(), floor);

    const auto init = fit_bhf_reml(data);
    FitResult res;
    res.method = FitMethod::MLE;
    res.params = init.as_params(m);
    for (auto& pv : res.params) {
        pv.sigma2_eps = std::clamp(pv.sigma2_eps, floor, ceil);
        pv.sigma2_gamma = std::clamp(pv.sigma2_gamma, floor, ceil);
    }
    std::vector<char> flagged(m, 0);
    for (std::size_t i = 0; i < m; ++i)
        if (data[i].n() < 2 || data[i].n() <= p) flagged[i] = 1;

    double beta0 = res.params[0].beta0;
    double s2g = res.params[0].sigma2_gamma;
    std::vector<Eigen::VectorXd> beta(m, res.params[0].beta);
    std::vector<double> s2e(m, res.params[0].sigma2_eps);

    auto assemble = [&] {
        for (std::size_t i = 0; i < m; ++i) res.params[i] = {beta0, beta[i], s2g, s2e[i], 0.5};
    };
    double ll = detail::loglik_fixed(data, res.params);
    res.trace.push_back(ll);

    for (int it = 1; it <= ctl.max_iter; ++it) {
        res.iterations = it;
        // intercept given slopes and variances
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            const auto& b = data[i];
            const double n = static_cast<double>(b.n());
            const double B = (s2e[i] / n) / (s2e[i] / n + s2g);
            const double w = n * B / s2e[i];
            num += w * (b.ybar() - b.xbar().dot(beta[i]));
            den += w;
        }
        beta0 = num / den;

        for (std::size_t i = 0; i < m; ++i) {
            if (flagged[i]) continue;
            const auto& b = data[i];
            const double n = static_cast<double>(b.n());
            const double B = (s2e[i] / n) / (s2e[i] / n + s2g);
            const Eigen::VectorXd xb = b.xbar();
            const Eigen::MatrixXd A = b.X.transpose() * b.X - n * (1.0 - B) * xb * xb.transpose();
            const Eigen::VectorXd rhs =
                b.X.transpose() * (b.y.array() - beta0).matrix() - n * (1.0 - B) * xb * (b.ybar() - beta0);
            try {
                beta[i] = detail::solve_small(A, rhs, "ML slope update");
            } catch (const SingularSystemError&) {
                flagged[i] = 1;
                continue;
            }

            // error variance: closed-form residual update as the start, then exact 1-D maximization
            const auto rs = detail::residual_summary(b, beta0, beta[i]);
            const double ebar = rs.sum / n;
            const double closed = std::clamp((rs.ss - n * (1.0 - B) * ebar * ebar) / n, floor, ceil);
            auto score = [&](double s) {
                // minus d(loglik_i)/ds, scaled by -2
                const double v = s + n * s2g;
                const double within = rs.ss - n * ebar * ebar;
                return -((n - 1.0) / s + 1.0 / v - within / (s * s) - n * ebar * ebar / (v * v));
            };
            const auto root = num::positive_root(score, floor, ceil, closed, 1e-12);
            const double cur = detail::area_loglik(n, s2e[i], s2g, rs.ss, rs.sum);
            const double cand = detail::area_loglik(n, root.x, s2g, rs.ss, rs.sum);
            if (cand >= cur) s2e[i] = root.x;
        }

        // area-effect variance by golden section on the log scale
        assemble();
        auto ll_at = [&](double t) {
            auto trial = res.params;
            for (auto& pv : trial) pv.sigma2_gamma = std::exp(t);
            return detail::loglik_fixed(data, trial);
        };
        const auto gmax = num::golden_max(ll_at, std::log(floor), std::log(ceil), 1e-9);
        if (gmax.fx >= ll_at(std::log(s2g))) s2g = std::exp(gmax.x);
        assemble();

        const double next = detail::loglik_fixed(data, res.params);
        res.trace.push_back(next);
        res.max_param_delta = std::abs(next - ll);
        ll = next;
        if (res.max_param_delta < ctl.tol) {
            res.converged = true;
            break;
        }
    }
    for (std::size_t i = 0; i < m; ++i)
        if (flagged[i]) {
            res.flagged_areas.push_back(i);
            res.params[i].beta = init.beta;
            res.params[i].sigma2_eps = std::clamp(init.sigma2_eps, floor, ceil);
        }
    return res;
}

inline FitResult fit_mle(const Dataset& ds, const FitControl& ctl = {}) { return fit_mle(group(ds), ctl); }

}  // namespace saehd
