#pragma once

#include "saehd/model.hpp"

#include <boost/math/distributions/chi_squared.hpp>

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace saehd {

/// Upper quantile of the chi-square distribution with `df` degrees of freedom.
inline double chi2_quantile(double p, double df) {
    if (!(df > 0.0) || !(p > 0.0 && p < 1.0)) throw std::invalid_argument("chi2_quantile: bad arguments");
    return boost::math::quantile(boost::math::chi_squared_distribution<double>(df), p);
}

/// Within-area sample variance over n (variance of the sample mean); NaN when n < 2.
inline std::vector<double> direct_variance(const GroupedData& data) {
    std::vector<double> out;
    for (const auto& b : data.blocks()) {
        const auto n = static_cast<double>(b.n());
        if (b.n() < 2) {
            out.push_back(std::nan(""));
            continue;
        }
        const double s2 = (b.y.array() - b.ybar()).square().sum() / (n - 1.0);
        out.push_back(s2 / n);
    }
    return out;
}

struct WaldResult {
    double W = 0.0;
    int df = 0;
    double critical = 0.0;  // chi-square 0.95 quantile at df
    bool reject = false;
    std::vector<std::size_t> excluded;  // areas without a usable variance
};

/// W = sum_i (direct_i - ebp_i)^2 / (var_direct_i + mse_ebp_i).
inline WaldResult wald_gof(const std::vector<double>& direct, const std::vector<double>& ebp,
                           const std::vector<double>& var_direct, const std::vector<double>& mse_ebp) {
    const auto m = direct.size();
    if (ebp.size() != m || var_direct.size() != m || mse_ebp.size() != m)
        throw std::invalid_argument("wald_gof: length mismatch");
    WaldResult w;
    for (std::size_t i = 0; i < m; ++i) {
        const double den = var_direct[i] + mse_ebp[i];
        if (!std::isfinite(var_direct[i]) || !(den > 0.0)) {
            w.excluded.push_back(i);
            continue;
        }
        w.W += (direct[i] - ebp[i]) * (direct[i] - ebp[i]) / den;
        ++w.df;
    }
    if (w.df > 0) {
        w.critical = chi2_quantile(0.95, w.df);
        w.reject = w.W > w.critical;
    }
    return w;
}

struct CvRatio {
    std::vector<double> ratio;  // NaN for excluded areas
    double mean = 0.0;
    std::vector<std::size_t> excluded;
};

/// CV(direct) / CV(EBP) per area, with CV = sd / |estimate|.
inline CvRatio cv_ratio(const std::vector<double>& direct, const std::vector<double>& var_direct,
                        const std::vector<double>& ebp, const std::vector<double>& rmse_ebp) {
    const auto m = direct.size();
    if (var_direct.size() != m || ebp.size() != m || rmse_ebp.size() != m)
        throw std::invalid_argument("cv_ratio: length mismatch");
    CvRatio out;
    double s = 0.0;
    int used = 0;
    for (std::size_t i = 0; i < m; ++i) {
        const double cv_d = std::sqrt(var_direct[i]) / std::abs(direct[i]);
        const double cv_e = rmse_ebp[i] / std::abs(ebp[i]);
        if (direct[i] == 0.0 || ebp[i] == 0.0 || !std::isfinite(cv_d) || !(cv_e > 0.0)) {
            out.excluded.push_back(i);
            out.ratio.push_back(std::nan(""));
            continue;
        }
        out.ratio.push_back(cv_d / cv_e);
        s += out.ratio.back();
        ++used;
    }
    out.mean = used ? s / used : std::nan("");
    return out;
}

}  // namespace saehd
