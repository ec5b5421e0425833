#pragma once

#include "saehd/influence.hpp"
#include "saehd/linalg.hpp"
#include "saehd/model.hpp"
#include "saehd/numerics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace saehd {

class TauGrid {
public:
    TauGrid() : TauGrid(0.02, 0.98, 0.02) {}

    TauGrid(double lo, double hi, double step) {
        if (!(step > 0.0) || lo > hi) throw std::invalid_argument("bad tau grid range");
        const auto count = static_cast<int>(std::floor((hi - lo) / step + 1e-9)) + 1;
        for (int i = 0; i < count; ++i) values_.push_back(lo + i * step);
        check();
    }

    explicit TauGrid(std::vector<double> values) : values_(std::move(values)) { check(); }

    const std::vector<double>& values() const { return values_; }
    std::size_t size() const { return values_.size(); }
    double min() const { return values_.front(); }
    double max() const { return values_.back(); }

private:
    void check() const {
        if (values_.empty()) throw std::invalid_argument("empty tau grid");
        for (std::size_t i = 0; i < values_.size(); ++i) {
            if (values_[i] < 0.01 - 1e-12 || values_[i] > 0.99 + 1e-12)
                throw std::invalid_argument("tau grid values must lie in [0.01, 0.99]");
            if (i > 0 && !(values_[i] > values_[i - 1]))
                throw std::invalid_argument("tau grid must be strictly increasing");
        }
    }

    std::vector<double> values_;
};

struct TauEstimates {
    std::vector<std::vector<double>> unit_tau;  // per area, per unit
    std::vector<double> area_mean_tau;
    std::vector<double> elb_tau;
    std::vector<double> shrinkage;  // B_i of the ELB predictor
    double mu_hat = 0.0;
    double eta2_hat = 0.0;
    double nu2_hat = 0.0;
};

namespace detail {

struct Stacked {
    Eigen::MatrixXd X;  // with intercept
    Eigen::VectorXd y;
};

inline Stacked stack(const GroupedData& data) {
    const auto n = data.total_n();
    const auto p = static_cast<Eigen::Index>(data.p());
    Stacked s{Eigen::MatrixXd(n, p + 1), Eigen::VectorXd(n)};
    Eigen::Index row = 0;
    for (const auto& b : data.blocks()) {
        s.X.block(row, 0, b.n(), 1).setOnes();
        s.X.block(row, 1, b.n(), p) = b.X;
        s.y.segment(row, b.n()) = b.y;
        row += b.n();
    }
    return s;
}

inline double mad_scale(const Eigen::VectorXd& r) {
    std::vector<double> v(r.data(), r.data() + r.size());
    const double med = num::median(v);
    for (auto& x : v) x = std::abs(x - med);
    return num::median(std::move(v)) / 0.6745;
}

}  // namespace detail

/// Pooled M-quantile regression at quantile `tau` with a Huber(c) influence
/// function, by IRLS with a MAD scale refreshed every iteration.
/// Returns (intercept, slopes).
inline Eigen::VectorXd fit_mquantile(const GroupedData& data, double tau, double c, int max_iter = 100,
                                     double tol = 1e-8) {
    const auto psi_spec = PsiSpec::huber(c, tau);
    const auto s = detail::stack(data);
    const auto n = s.X.rows();
    const auto q = s.X.cols();
    if (n <= q) throw SingularSystemError("M-quantile fit needs more units than coefficients");

    Eigen::VectorXd b = detail::solve_small(s.X.transpose() * s.X, s.X.transpose() * s.y, "M-quantile OLS start");
    const double yscale = s.y.cwiseAbs().maxCoeff() + 1.0;
    Eigen::VectorXd w(n);
    for (int it = 0; it < max_iter; ++it) {
        const Eigen::VectorXd r = s.y - s.X * b;
        if (r.cwiseAbs().maxCoeff() <= 1e-13 * yscale) break;  // interpolating fit
        double scale = detail::mad_scale(r);
        if (!(scale > 1e-13 * yscale)) scale = r.cwiseAbs().mean() / 0.8;
        for (Eigen::Index j = 0; j < n; ++j) w(j) = psi_weight(psi_spec, r(j) / scale);
        const Eigen::MatrixXd XtW = s.X.transpose() * w.asDiagonal();
        const Eigen::VectorXd next = detail::solve_small(XtW * s.X, XtW * s.y, "M-quantile IRLS");
        const double delta = ((next - b).array().abs() / (1.0 + b.array().abs())).maxCoeff();
        b = next;
        if (delta < tol) break;
    }
    return b;
}

inline Eigen::VectorXd fit_mquantile(const Dataset& ds, double tau, double c) {
    return fit_mquantile(group(ds), tau, c);
}

/// Coefficients of the M-quantile line at every grid point.
inline std::vector<Eigen::VectorXd> fit_grid(const GroupedData& data, const TauGrid& grid, double c) {
    std::vector<Eigen::VectorXd> out;
    out.reserve(grid.size());
    for (double t : grid.values()) out.push_back(fit_mquantile(data, t, c));
    return out;
}

/// For each unit, the grid tau whose fitted line passes closest (absolute
/// prediction error). Ties go to the value nearest 0.5, then the smaller one.
inline std::vector<std::vector<double>> unit_coefficients(const GroupedData& data, const TauGrid& grid,
                                                          const std::vector<Eigen::VectorXd>& fits) {
    const auto& taus = grid.values();
    std::vector<std::vector<double>> out(data.m());
    for (std::size_t i = 0; i < data.m(); ++i) {
        const auto& b = data[i];
        out[i].resize(static_cast<std::size_t>(b.n()));
        for (Eigen::Index j = 0; j < b.n(); ++j) {
            const double tie_tol = 1e-9 * (1.0 + std::abs(b.y(j)));
            std::size_t best = 0;
            double best_err = std::numeric_limits<double>::infinity();
            for (std::size_t g = 0; g < taus.size(); ++g) {
                const auto& coef = fits[g];
                const double pred = coef(0) + b.X.row(j).dot(coef.tail(coef.size() - 1));
                const double err = std::abs(b.y(j) - pred);
                bool take = err < best_err - tie_tol;
                if (!take && err <= best_err + tie_tol) {
                    const double dn = std::abs(taus[g] - 0.5), db = std::abs(taus[best] - 0.5);
                    take = dn < db - 1e-12 || (std::abs(dn - db) <= 1e-12 && taus[g] < taus[best]);
                }
                if (take) {
                    best = g;
                    best_err = std::min(err, best_err);
                }
            }
            out[i][static_cast<std::size_t>(j)] = taus[best];
        }
    }
    return out;
}

inline std::vector<std::vector<double>> unit_coefficients(const GroupedData& data, const TauGrid& grid, double c) {
    return unit_coefficients(data, grid, fit_grid(data, grid, c));
}

/// Empirical linear best shrinkage of area-mean M-quantile coefficients.
inline TauEstimates elb_tau(std::vector<std::vector<double>> unit_tau, double grid_min, double grid_max) {
    const std::size_t m = unit_tau.size();
    if (m < 2) throw std::invalid_argument("elb_tau needs at least 2 areas");
    TauEstimates est;
    est.area_mean_tau.resize(m);
    std::size_t n_total = 0;
    double inv_n_sum = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        if (unit_tau[i].empty()) throw std::invalid_argument("elb_tau: area without units");
        est.area_mean_tau[i] = num::mean(unit_tau[i]);
        n_total += unit_tau[i].size();
        inv_n_sum += 1.0 / static_cast<double>(unit_tau[i].size());
    }
    const double md = static_cast<double>(m);
    est.mu_hat = num::mean(est.area_mean_tau);

    double within = 0.0;
    for (std::size_t i = 0; i < m; ++i)
        for (double t : unit_tau[i]) within += (t - est.area_mean_tau[i]) * (t - est.area_mean_tau[i]);
    est.nu2_hat = n_total > m ? within / static_cast<double>(n_total - m) : 0.0;

    double between = 0.0;
    for (double t : est.area_mean_tau) between += (t - est.mu_hat) * (t - est.mu_hat);
    est.eta2_hat = std::max(0.0, between / (md - 1.0) - est.nu2_hat * inv_n_sum / md);

    est.elb_tau.resize(m);
    est.shrinkage.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
        const double sampling = est.nu2_hat / static_cast<double>(unit_tau[i].size());
        const double denom = sampling + est.eta2_hat;
        const double B = denom > 0.0 ? sampling / denom : 1.0;
        est.shrinkage[i] = B;
        est.elb_tau[i] = std::clamp((1.0 - B) * est.area_mean_tau[i] + B * est.mu_hat, grid_min, grid_max);
    }
    est.unit_tau = std::move(unit_tau);
    return est;
}

inline TauEstimates estimate_taus(const GroupedData& data, const TauGrid& grid, double c) {
    return elb_tau(unit_coefficients(data, grid, c), grid.min(), grid.max());
}

}  // namespace saehd
