#pragma once

#include "saehd/fit_mle.hpp"
#include "saehd/model.hpp"
#include "saehd/mq.hpp"

#include <Eigen/Dense>

#include <map>
#include <optional>
#include <vector>

namespace saehd {

/// (sigma2_eps / n) / (sigma2_eps / n + sigma2_gamma); 1 when both are zero.
inline double shrinkage(double sigma2_eps, double n, double sigma2_gamma) {
    const double se = sigma2_eps / n;
    return se + sigma2_gamma > 0.0 ? se / (se + sigma2_gamma) : 1.0;
}

inline std::vector<double> direct(const GroupedData& data) {
    std::vector<double> out;
    out.reserve(data.m());
    for (const auto& b : data.blocks()) out.push_back(b.ybar());
    return out;
}

/// Empirical best predictor, convex form:
///   (Xbar - xbar)' beta_i + B_i (beta0 + xbar' beta_i) + (1 - B_i) ybar.
inline double ebp_area(const AreaBlock& b, const ParamVector& pv) {
    const double B = shrinkage(pv.sigma2_eps, static_cast<double>(b.n()), pv.sigma2_gamma);
    const Eigen::VectorXd xb = b.xbar();
    return (b.Xbar - xb).dot(pv.beta) + B * (pv.beta0 + xb.dot(pv.beta)) + (1.0 - B) * b.ybar();
}

/// Same predictor in survey-regression form: ybar + (Xbar - xbar)' beta_i - B_i (ybar - beta0 - xbar' beta_i).
inline double ebp_area_regression_form(const AreaBlock& b, const ParamVector& pv) {
    const double B = shrinkage(pv.sigma2_eps, static_cast<double>(b.n()), pv.sigma2_gamma);
    const Eigen::VectorXd xb = b.xbar();
    const double ybar = b.ybar();
    return ybar + (b.Xbar - xb).dot(pv.beta) - B * (ybar - pv.beta0 - xb.dot(pv.beta));
}

inline std::vector<double> ebp(const GroupedData& data, const FitResult& fit) {
    std::vector<double> out;
    for (std::size_t i = 0; i < data.m(); ++i) out.push_back(ebp_area(data[i], fit.params[i]));
    return out;
}

inline std::vector<double> ebp_shrinkage(const GroupedData& data, const FitResult& fit) {
    std::vector<double> out;
    for (std::size_t i = 0; i < data.m(); ++i)
        out.push_back(shrinkage(fit.params[i].sigma2_eps, static_cast<double>(data[i].n()), fit.params[i].sigma2_gamma));
    return out;
}

/// f_i ybar + (1 - f_i) theta_hat with f_i = n_i / N_i.
inline std::vector<double> ebp_finite(const GroupedData& data, const FitResult& fit) {
    std::vector<double> out;
    for (std::size_t i = 0; i < data.m(); ++i) {
        const auto& b = data[i];
        const double f = static_cast<double>(b.n()) / static_cast<double>(b.N);
        out.push_back(f * b.ybar() + (1.0 - f) * ebp_area(b, fit.params[i]));
    }
    return out;
}

/// BHF EBLUP: beta0 + Xbar' beta + (1 - B_i)(ybar - beta0 - xbar' beta).
inline std::vector<double> eblup_bhf(const GroupedData& data, const BhfFit& fit) {
    std::vector<double> out;
    for (std::size_t i = 0; i < data.m(); ++i) {
        const auto& b = data[i];
        const double B = shrinkage(fit.sigma2_eps, static_cast<double>(b.n()), fit.sigma2_gamma);
        out.push_back(fit.beta0 + b.Xbar.dot(fit.beta) + (1.0 - B) * (b.ybar() - fit.beta0 - b.xbar().dot(fit.beta)));
    }
    return out;
}

/// Cache of pooled M-quantile fits keyed by tau.
class MQFits {
public:
    MQFits(const GroupedData& data, double c) : data_(&data), c_(c) {}

    const Eigen::VectorXd& at(double tau) {
        auto it = cache_.find(tau);
        if (it == cache_.end()) it = cache_.emplace(tau, fit_mquantile(*data_, tau, c_)).first;
        return it->second;
    }

private:
    const GroupedData* data_;
    double c_;
    std::map<double, Eigen::VectorXd> cache_;
};

/// Synthetic M-quantile predictor beta0(tau_i) + Xbar_i' beta(tau_i).
inline std::vector<double> mq_synthetic(const GroupedData& data, const std::vector<double>& area_tau, MQFits& fits) {
    std::vector<double> out;
    for (std::size_t i = 0; i < data.m(); ++i) {
        const auto& coef = fits.at(area_tau[i]);
        out.push_back(coef(0) + data[i].Xbar.dot(coef.tail(coef.size() - 1)));
    }
    return out;
}

/// Bias-corrected M-quantile predictor ybar + (Xbar - xbar)' beta_i.
inline std::vector<double> mqcd(const GroupedData& data, const std::vector<Eigen::VectorXd>& slopes) {
    std::vector<double> out;
    for (std::size_t i = 0; i < data.m(); ++i)
        out.push_back(data[i].ybar() + (data[i].Xbar - data[i].xbar()).dot(slopes[i]));
    return out;
}

inline std::vector<double> mqcd(const GroupedData& data, const std::vector<double>& area_tau, MQFits& fits) {
    std::vector<Eigen::VectorXd> slopes;
    for (std::size_t i = 0; i < data.m(); ++i) {
        const auto& coef = fits.at(area_tau[i]);
        slopes.push_back(coef.tail(coef.size() - 1));
    }
    return mqcd(data, slopes);
}

struct PredictorSet {
    std::vector<std::string> area_id;
    std::vector<double> direct, eblup_bhf, ebp, ebp_mle, ebp_finite, mq_synth, mqcd;
    std::vector<double> B_ebp, B_bhf, B_mle;
};

}  // namespace saehd
