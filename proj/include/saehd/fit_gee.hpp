#pragma once

// Robust pooled estimating equations for the area-specific nested error model.
//
// For each area i the regression line (alpha_0i, beta_i) and the error variance
// sigma2_eps_i are estimated from the data of *all* areas l, with the working
// covariance
//     V_{l;i} = h_l sigma2_gamma 1 1' + sigma2_eps_i K_l,   U_{l;i} = diag(V_{l;i}),
// and the area-specific (tilted) influence function psi_i. The area-effect
// variance sigma2_gamma is shared and solved from a single global equation;
// beta_0 is the mean of the alpha_0i.
//
// V_{l;i} = D + a 1 1' with D diagonal, so V^{-1} = D^{-1} - c u u' with
// u = D^{-1} 1 and c = a / (1 + a 1'u); no n_l x n_l matrix is ever formed.

#include "saehd/fit_mle.hpp"
#include "saehd/influence.hpp"
#include "saehd/linalg.hpp"
#include "saehd/model.hpp"
#include "saehd/numerics.hpp"
#include "saehd/parallel.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

namespace saehd {

struct GeeOptions {
    FitControl ctl;
    int workers = 1;
    // areas whose data enter the equations; empty = all. Excluded areas still
    // receive parameters through the pooled equations of the others.
    std::vector<char> active;
    // start from these parameters instead of the homogeneous REML fit
    std::optional<FitResult> warm_start;
    // w_i = E[psi_i^2] with the tilted psi_i; false uses the untilted E[psi^2]
    bool tilted_w = true;
};

/// Everything fixed during one GEE fit.
class GeeProblem {
public:
    GeeProblem(const GroupedData& data, const PsiSpec& psi_base, const std::vector<double>& taus,
               const FitControl& ctl, std::vector<char> active = {}, bool tilted_w = true)
        : data_(&data), psi_base_(psi_base.untilted()), active_(std::move(active)) {
        ctl.check();
        if (taus.size() != data.m()) throw std::invalid_argument("one tau per area required");
        if (active_.empty()) active_.assign(data.m(), 1);
        if (active_.size() != data.m()) throw std::invalid_argument("active mask length != m");
        floor_ = ctl.var_floor;
        ceil_ = ctl.bracket_max > 0 ? ctl.bracket_max : 1e6 * std::max(data.y_variance(), floor_);
        tol_ = ctl.tol;
        for (double t : taus) {
            psi_.push_back(psi_base_.with_tau(t));
            w_.push_back(expected_square(tilted_w ? psi_.back() : psi_base_));
        }
        w_star_ = expected_square(psi_base_);
        // scales for the relative-change convergence test
        const double sd = std::sqrt(std::max(data.y_variance(), 0.0));
        var_scale_ = std::max(sd * sd, floor_);
        coef_scale_.assign(data.p() + 1, std::max(sd, 1e-12));
        for (std::size_t c = 0; c < data.p(); ++c) {
            double s = 0, ss = 0;
            Eigen::Index n = 0;
            for (std::size_t l = 0; l < data.m(); ++l) {
                s += data[l].X.col(static_cast<Eigen::Index>(c)).sum();
                ss += data[l].X.col(static_cast<Eigen::Index>(c)).squaredNorm();
                n += data[l].n();
            }
            const double var = n > 1 ? (ss - s * s / n) / (n - 1) : 0.0;
            coef_scale_[c + 1] = var > 0 ? std::max(sd, 1e-12) / std::sqrt(var) : std::max(sd, 1e-12);
        }
    }

    const GroupedData& data() const { return *data_; }
    std::size_t m() const { return data_->m(); }
    const PsiSpec& psi(std::size_t i) const { return psi_[i]; }
    const PsiSpec& psi_untilted() const { return psi_base_; }
    double w(std::size_t i) const { return w_[i]; }
    double w_star() const { return w_star_; }
    bool active(std::size_t l) const { return active_[l] != 0; }
    double var_floor() const { return floor_; }
    double bracket_max() const { return ceil_; }
    double tol() const { return tol_; }
    double var_scale() const { return var_scale_; }
    double coef_scale(Eigen::Index c) const { return coef_scale_[static_cast<std::size_t>(c)]; }

private:
    const GroupedData* data_;
    PsiSpec psi_base_;
    std::vector<PsiSpec> psi_;
    std::vector<double> w_;
    double w_star_ = 1.0;
    std::vector<char> active_;
    double floor_ = 1e-8, ceil_ = 1.0, tol_ = 1e-6;
    double var_scale_ = 1.0;
    std::vector<double> coef_scale_;
};

struct BetaSolve {
    Eigen::VectorXd coef;  // (alpha_0i, beta_i)
    int iterations = 0;
    bool converged = false;
};

namespace detail {

inline double line_residual(const AreaBlock& b, Eigen::Index j, const Eigen::VectorXd& coef) {
    double fit = coef(0);
    for (Eigen::Index c = 0; c < b.X.cols(); ++c) fit += b.X(j, c) * coef(c + 1);
    return b.y(j) - fit;
}

}  // namespace detail

/// Left-hand side of area i's regression equations,
///   sum_l X~_l' V_{l;i}^{-1} U_{l;i}^{1/2} psi_i(U_{l;i}^{-1/2} e_l).
inline Eigen::VectorXd beta_equation(const GeeProblem& pb, std::size_t i, const Eigen::VectorXd& coef,
                                     double s2g, double s2e) {
    const auto q = coef.size();
    Eigen::VectorXd F = Eigen::VectorXd::Zero(q);
    Eigen::VectorXd xg(q), xu(q);
    for (std::size_t l = 0; l < pb.m(); ++l) {
        if (!pb.active(l)) continue;
        const auto& b = pb.data()[l];
        const double a = b.h * s2g;
        double S = 0.0, ug_sum = 0.0;
        xg.setZero();
        xu.setZero();
        for (Eigen::Index j = 0; j < b.n(); ++j) {
            const double d = s2e * b.k(j);
            const double u = 1.0 / d;
            const double sqU = std::sqrt(a + d);
            const double g = sqU * psi(pb.psi(i), detail::line_residual(b, j, coef) / sqU);
            S += u;
            ug_sum += u * g;
            xg(0) += u * g;
            xu(0) += u;
            for (Eigen::Index c = 1; c < q; ++c) {
                xg(c) += u * g * b.X(j, c - 1);
                xu(c) += u * b.X(j, c - 1);
            }
        }
        const double cc = a / (1.0 + a * S);
        F += xg - cc * ug_sum * xu;
    }
    return F;
}

/// Solves area i's pooled regression equations by IRLS (weights psi_i(r)/r).
inline BetaSolve solve_beta(const GeeProblem& pb, std::size_t i, const Eigen::VectorXd& start, double s2g,
                            double s2e, int max_inner = 100) {
    const auto q = start.size();
    BetaSolve out{start, 0, false};
    Eigen::MatrixXd M(q, q);
    Eigen::VectorXd v(q), xu(q), xwu(q), xt(q);
    for (int it = 1; it <= max_inner; ++it) {
        out.iterations = it;
        M.setZero();
        v.setZero();
        for (std::size_t l = 0; l < pb.m(); ++l) {
            if (!pb.active(l)) continue;
            const auto& b = pb.data()[l];
            const double a = b.h * s2g;
            double S = 0.0, wuy = 0.0;
            xu.setZero();
            xwu.setZero();
            for (Eigen::Index j = 0; j < b.n(); ++j) {
                const double d = s2e * b.k(j);
                const double u = 1.0 / d;
                const double sqU = std::sqrt(a + d);
                const double wt = psi_weight(pb.psi(i), detail::line_residual(b, j, out.coef) / sqU);
                xt(0) = 1.0;
                for (Eigen::Index c = 1; c < q; ++c) xt(c) = b.X(j, c - 1);
                const double uw = u * wt;
                S += u;
                xu.noalias() += u * xt;
                xwu.noalias() += uw * xt;
                wuy += uw * b.y(j);
                M.noalias() += uw * xt * xt.transpose();
                v.noalias() += uw * b.y(j) * xt;
            }
            const double cc = a / (1.0 + a * S);
            M.noalias() -= cc * xu * xwu.transpose();
            v.noalias() -= cc * wuy * xu;
        }
        const Eigen::VectorXd next = detail::solve_small(M, v, "GEE regression step");
        double delta = 0.0;
        for (Eigen::Index c = 0; c < q; ++c)
            delta = std::max(delta, std::abs(next(c) - out.coef(c)) / (std::abs(out.coef(c)) + pb.coef_scale(c)));
        out.coef = next;
        if (delta < pb.tol()) {
            out.converged = true;
            break;
        }
    }
    return out;
}

/// Area i's error-variance equation at trial value s2e (regression line fixed):
///   sum_l [ q' V^{-1} K_l V^{-1} q - w_i tr(V^{-1} K_l) ],  q = U^{1/2} psi_i(U^{-1/2} e).
inline double sigma_eps_equation(const GeeProblem& pb, std::size_t i, const Eigen::VectorXd& coef, double s2g,
                                 double s2e) {
    double total = 0.0;
    for (std::size_t l = 0; l < pb.m(); ++l) {
        if (!pb.active(l)) continue;
        const auto& b = pb.data()[l];
        const double a = b.h * s2g;
        double S = 0.0, uq = 0.0;
        for (Eigen::Index j = 0; j < b.n(); ++j) {
            const double d = s2e * b.k(j);
            const double sqU = std::sqrt(a + d);
            const double qj = sqU * psi(pb.psi(i), detail::line_residual(b, j, coef) / sqU);
            S += 1.0 / d;
            uq += qj / d;
        }
        const double cc = a / (1.0 + a * S);
        double quad = 0.0;
        for (Eigen::Index j = 0; j < b.n(); ++j) {
            const double d = s2e * b.k(j);
            const double sqU = std::sqrt(a + d);
            const double qj = sqU * psi(pb.psi(i), detail::line_residual(b, j, coef) / sqU);
            const double g = (qj - cc * uq) / d;
            quad += b.k(j) * g * g;
        }
        const double trace = (static_cast<double>(b.n()) - cc * S) / s2e;
        total += quad - pb.w(i) * trace;
    }
    return total;
}

inline num::RootResult solve_sigma_eps(const GeeProblem& pb, std::size_t i, const Eigen::VectorXd& coef,
                                       double s2g, double start) {
    return num::positive_root([&](double s) { return sigma_eps_equation(pb, i, coef, s2g, s); }, pb.var_floor(),
                              pb.bracket_max(), start);
}

/// Global area-effect variance equation at trial value s2g:
///   sum_i [ (1' G_i^{-1} q_i)^2 - w* 1' G_i^{-1} 1 ],  q_i = A_i^{1/2} psi(A_i^{-1/2} r*_i),
/// with r*_i = y_i - beta0 - X_i beta_i and the untilted psi.
inline double sigma_gamma_equation(const GeeProblem& pb, double beta0, const std::vector<Eigen::VectorXd>& beta,
                                   const std::vector<double>& s2e, double s2g) {
    double total = 0.0;
    for (std::size_t i = 0; i < pb.m(); ++i) {
        if (!pb.active(i)) continue;
        const auto& b = pb.data()[i];
        const double a = b.h * s2g;
        double S = 0.0, uq = 0.0;
        for (Eigen::Index j = 0; j < b.n(); ++j) {
            const double d = s2e[i] * b.k(j);
            const double sqA = std::sqrt(a + d);
            const double r = b.y(j) - beta0 - b.X.row(j).dot(beta[i]);
            S += 1.0 / d;
            uq += sqA * psi(pb.psi_untilted(), r / sqA) / d;
        }
        const double one_g_q = uq / (1.0 + a * S);
        total += one_g_q * one_g_q - pb.w_star() * S / (1.0 + a * S);
    }
    return total;
}

inline num::RootResult solve_sigma_gamma(const GeeProblem& pb, double beta0, const std::vector<Eigen::VectorXd>& beta,
                                         const std::vector<double>& s2e, double start) {
    return num::positive_root([&](double g) { return sigma_gamma_equation(pb, beta0, beta, s2e, g); },
                              pb.var_floor(), pb.bracket_max(), start);
}

/// Homogeneous REML fit (active areas only) replicated into every area.
inline std::vector<ParamVector> initial_values(const GroupedData& data, const std::vector<double>& taus,
                                               const std::vector<char>& active = {}) {
    const BhfFit bhf = [&] {
        if (active.empty() || std::all_of(active.begin(), active.end(), [](char a) { return a != 0; }))
            return fit_bhf_reml(data);
        std::vector<AreaBlock> keep;
        for (std::size_t l = 0; l < data.m(); ++l)
            if (active[l]) keep.push_back(data[l]);
        return fit_bhf_reml(GroupedData(std::move(keep), data.p()));
    }();
    auto params = bhf.as_params(data.m());
    for (std::size_t i = 0; i < params.size(); ++i) params[i].tau = taus.empty() ? 0.5 : taus[i];
    return params;
}

inline FitResult fit_gee(const GroupedData& data, const PsiSpec& psi_base, const std::vector<double>& taus,
                         const GeeOptions& opt = {}) {
    const GeeProblem pb(data, psi_base, taus, opt.ctl, opt.active, opt.tilted_w);
    const std::size_t m = data.m();
    const auto q = static_cast<Eigen::Index>(data.p()) + 1;
    const double floor = pb.var_floor(), ceil = pb.bracket_max();

    std::vector<Eigen::VectorXd> coef(m, Eigen::VectorXd(q));
    std::vector<double> s2e(m);
    double s2g;
    if (opt.warm_start) {
        const auto& ws = *opt.warm_start;
        for (std::size_t i = 0; i < m; ++i) {
            const auto& pv = ws.params[i];
            coef[i](0) = ws.area_intercepts.size() == m ? ws.area_intercepts[i] : pv.beta0;
            coef[i].tail(q - 1) = pv.beta;
            s2e[i] = std::clamp(pv.sigma2_eps, floor, ceil);
        }
        s2g = std::clamp(ws.sigma2_gamma(), floor, ceil);
    } else {
        const auto init = initial_values(data, taus, opt.active);
        for (std::size_t i = 0; i < m; ++i) {
            coef[i](0) = init[i].beta0;
            coef[i].tail(q - 1) = init[i].beta;
            s2e[i] = std::clamp(init[i].sigma2_eps, floor, ceil);
        }
        s2g = std::clamp(init[0].sigma2_gamma, floor, ceil);
    }

    FitResult res;
    res.method = FitMethod::GEE;
    std::vector<Eigen::VectorXd> next_coef(m);
    std::vector<double> next_s2e(m);
    std::vector<char> warned(m, 0);
    std::vector<Eigen::VectorXd> slopes(m);
    double beta0 = 0.0;

    for (int it = 1; it <= opt.ctl.max_iter; ++it) {
        res.iterations = it;
        // Step 2 then Step 3, per area, with sigma2_gamma from the previous iterate
        parallel_for(m, opt.workers, [&](std::size_t i) {
            next_coef[i] = solve_beta(pb, i, coef[i], s2g, s2e[i]).coef;
            const auto root = solve_sigma_eps(pb, i, next_coef[i], s2g, s2e[i]);
            next_s2e[i] = root.x;
            warned[i] = root.bracketed ? 0 : 1;
        });
        // Step 4
        beta0 = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            beta0 += next_coef[i](0);
            slopes[i] = next_coef[i].tail(q - 1);
        }
        beta0 /= static_cast<double>(m);
        const auto groot = solve_sigma_gamma(pb, beta0, slopes, next_s2e, s2g);

        double delta = std::abs(groot.x - s2g) / (s2g + pb.var_scale());
        for (std::size_t i = 0; i < m; ++i) {
            for (Eigen::Index c = 0; c < q; ++c)
                delta = std::max(delta, std::abs(next_coef[i](c) - coef[i](c)) / (std::abs(coef[i](c)) + pb.coef_scale(c)));
            delta = std::max(delta, std::abs(next_s2e[i] - s2e[i]) / (s2e[i] + pb.var_scale()));
        }
        coef.swap(next_coef);
        s2e.swap(next_s2e);
        s2g = groot.x;
        res.bracket_warning = !groot.bracketed || std::any_of(warned.begin(), warned.end(), [](char w) { return w != 0; });
        res.trace.push_back(delta);
        res.max_param_delta = delta;
        if (delta < opt.ctl.tol) {
            res.converged = true;
            break;
        }
    }

    res.params.resize(m);
    res.area_intercepts.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
        res.params[i] = {beta0, coef[i].tail(q - 1), s2g, s2e[i], taus[i]};
        res.area_intercepts[i] = coef[i](0);
    }
    return res;
}

inline FitResult fit_gee(const Dataset& ds, const PsiSpec& psi_base, const std::vector<double>& taus,
                         const GeeOptions& opt = {}) {
    return fit_gee(group(ds), psi_base, taus, opt);
}

}  // namespace saehd
