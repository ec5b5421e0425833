#pragma once

#include "saehd/fit_gee.hpp"
#include "saehd/fit_mle.hpp"
#include "saehd/influence.hpp"
#include "saehd/model.hpp"
#include "saehd/numerics.hpp"
#include "saehd/parallel.hpp"
#include "saehd/predict.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace saehd {

enum class Distance { SquaredError, AbsoluteError };

/// f applied to the averaged distance. RelativeToMean takes the square root
/// first when the distance is squared, then divides by |mean prediction|.
enum class Transform { Identity, Sqrt, RelativeToMean, Log };

struct MeasureSpec {
    Distance distance = Distance::SquaredError;
    Transform transform = Transform::Sqrt;

    static MeasureSpec rmse() { return {Distance::SquaredError, Transform::Sqrt}; }
    static MeasureSpec rrmse() { return {Distance::SquaredError, Transform::RelativeToMean}; }
    static MeasureSpec mse() { return {Distance::SquaredError, Transform::Identity}; }
    static MeasureSpec log_mse() { return {Distance::SquaredError, Transform::Log}; }

    double distance_of(double err) const {
        return distance == Distance::SquaredError ? err * err : std::abs(err);
    }
    double apply(double mean_distance, double mean_prediction) const {
        switch (transform) {
            case Transform::Identity: return mean_distance;
            case Transform::Sqrt: return std::sqrt(mean_distance);
            case Transform::RelativeToMean: {
                const double v = distance == Distance::SquaredError ? std::sqrt(mean_distance) : mean_distance;
                return v / std::abs(mean_prediction);
            }
            case Transform::Log: return std::log(mean_distance);
        }
        return mean_distance;
    }
    /// True when the value is on the scale of the predictor (RMSE-like).
    bool rmse_scale() const {
        return (transform == Transform::Sqrt && distance == Distance::SquaredError) ||
               (transform == Transform::Identity && distance == Distance::AbsoluteError);
    }
};

enum class UncertaintyMethod { Naive, Bootstrap, McJack };

inline std::string to_string(UncertaintyMethod m) {
    switch (m) {
        case UncertaintyMethod::Naive: return "naive";
        case UncertaintyMethod::Bootstrap: return "bootstrap";
        case UncertaintyMethod::McJack: return "mcjack";
    }
    return "?";
}

struct Interval {
    double lo = 0.0;
    double hi = 0.0;
};

struct UncertaintyEstimate {
    std::vector<double> value;
    UncertaintyMethod method = UncertaintyMethod::Naive;
    int R = 0;
    std::uint64_t seed = 0;
    std::vector<Interval> interval;  // empty when not produced
    int failed_replicates = 0;
};

/// g1 = sigma2_gamma (sigma2_eps / n) / (sigma2_gamma + sigma2_eps / n).
inline double g1(double sigma2_gamma, double sigma2_eps, double n) {
    const double se = sigma2_eps / n;
    return sigma2_gamma + se > 0.0 ? sigma2_gamma * se / (sigma2_gamma + se) : 0.0;
}

inline UncertaintyEstimate naive_rmse(const GroupedData& data, const FitResult& fit) {
    UncertaintyEstimate out;
    out.method = UncertaintyMethod::Naive;
    const auto theta = ebp(data, fit);
    for (std::size_t i = 0; i < data.m(); ++i) {
        const auto& pv = fit.params[i];
        const double r = std::sqrt(g1(pv.sigma2_gamma, pv.sigma2_eps, static_cast<double>(data[i].n())));
        out.value.push_back(r);
        out.interval.push_back({theta[i] - 2.0 * r, theta[i] + 2.0 * r});
    }
    return out;
}

/// How bootstrap samples are refitted and predicted.
struct BootstrapSetup {
    PsiSpec psi = PsiSpec::huber(1.345);
    GeeOptions gee;             // workers here are ignored inside replicates
    int workers = 1;            // replicate-level parallelism
    bool warm_start = true;     // start each refit at the generating parameters
    double max_fail_fraction = 0.2;
};

/// Standard-normal draws for one bootstrap replicate; shared across
/// parameter settings for common random numbers.
struct BootstrapNoise {
    std::vector<double> z_gamma;
    std::vector<Eigen::VectorXd> z_eps;
};

inline BootstrapNoise bootstrap_noise(const GroupedData& data, std::uint64_t seed, std::uint64_t r) {
    std::mt19937_64 rng(num::derive_seed(seed, r));
    std::normal_distribution<double> z;
    BootstrapNoise nz;
    nz.z_gamma.resize(data.m());
    nz.z_eps.resize(data.m());
    for (std::size_t i = 0; i < data.m(); ++i) nz.z_gamma[i] = z(rng);
    for (std::size_t i = 0; i < data.m(); ++i) {
        nz.z_eps[i].resize(data[i].n());
        for (Eigen::Index j = 0; j < data[i].n(); ++j) nz.z_eps[i](j) = z(rng);
    }
    return nz;
}

/// Bootstrap population under parameters `gen`: returns the resampled data and
/// the true area means beta0 + Xbar' beta_i + gamma_i.
inline std::pair<GroupedData, std::vector<double>> bootstrap_sample(const GroupedData& data,
                                                                    const std::vector<ParamVector>& gen,
                                                                    const BootstrapNoise& nz) {
    GroupedData out = data;
    std::vector<double> theta(data.m());
    for (std::size_t i = 0; i < data.m(); ++i) {
        auto& b = out[i];
        const auto& pv = gen[i];
        const double gamma = std::sqrt(b.h * pv.sigma2_gamma) * nz.z_gamma[i];
        theta[i] = pv.beta0 + b.Xbar.dot(pv.beta) + gamma;
        for (Eigen::Index j = 0; j < b.n(); ++j)
            b.y(j) = pv.beta0 + b.X.row(j).dot(pv.beta) + gamma + std::sqrt(b.k(j) * pv.sigma2_eps) * nz.z_eps[i](j);
    }
    return {std::move(out), std::move(theta)};
}

/// Refits a bootstrap sample with the same fitter as `fit` (tau held fixed).
inline FitResult refit_like(const GroupedData& sample, const FitResult& fit, const BootstrapSetup& setup) {
    if (fit.method == FitMethod::MLE) return fit_mle(sample, setup.gee.ctl);
    GeeOptions opt = setup.gee;
    opt.workers = 1;
    opt.active.clear();
    if (setup.warm_start) opt.warm_start = fit;
    std::vector<double> taus;
    for (const auto& pv : fit.params) taus.push_back(pv.tau);
    return fit_gee(sample, setup.psi, taus, opt);
}

/// Prediction errors theta_hat^(r) - theta^(r) for every replicate and area
/// (rows = replicates; a failed replicate yields an empty row).
struct BootstrapErrors {
    std::vector<std::vector<double>> err;
    std::vector<std::vector<double>> pred;
    int failed = 0;
};

inline BootstrapErrors bootstrap_errors(const GroupedData& data, const FitResult& gen, const FitResult& fitter_like,
                                        int R, std::uint64_t seed, const BootstrapSetup& setup) {
    if (R < 2) throw std::invalid_argument("bootstrap needs R >= 2");
    BootstrapErrors be;
    be.err.resize(static_cast<std::size_t>(R));
    be.pred.resize(static_cast<std::size_t>(R));
    parallel_for(static_cast<std::size_t>(R), setup.workers, [&](std::size_t r) {
        const auto nz = bootstrap_noise(data, seed, r);
        auto [sample, theta] = bootstrap_sample(data, gen.params, nz);
        try {
            FitResult start = fitter_like;
            start.params = gen.params;
            start.area_intercepts = gen.area_intercepts;
            const auto refit = refit_like(sample, start, setup);
            const auto pred = ebp(sample, refit);
            std::vector<double> e(data.m());
            for (std::size_t i = 0; i < data.m(); ++i) {
                e[i] = pred[i] - theta[i];
                if (!std::isfinite(e[i])) throw NumericalError("non-finite bootstrap prediction");
            }
            be.err[r] = std::move(e);
            be.pred[r] = pred;
        } catch (const NumericalError&) {
            be.err[r].clear();
        }
    });
    for (const auto& row : be.err)
        if (row.empty()) ++be.failed;
    if (be.failed > setup.max_fail_fraction * R)
        throw NumericalError("bootstrap: " + std::to_string(be.failed) + " of " + std::to_string(R) +
                             " replicate fits failed");
    return be;
}

/// a_boot per area: f(mean_r d(theta_hat^(r), theta^(r))).
inline std::vector<double> measure_from_errors(const BootstrapErrors& be, std::size_t m, const MeasureSpec& spec) {
    std::vector<double> out(m);
    for (std::size_t i = 0; i < m; ++i) {
        double sd = 0.0, sp = 0.0;
        int used = 0;
        for (std::size_t r = 0; r < be.err.size(); ++r) {
            if (be.err[r].empty()) continue;
            sd += spec.distance_of(be.err[r][i]);
            sp += be.pred[r][i];
            ++used;
        }
        out[i] = spec.apply(sd / used, sp / used);
    }
    return out;
}

inline UncertaintyEstimate bootstrap_measure(const GroupedData& data, const FitResult& fit, const MeasureSpec& spec,
                                             int R, std::uint64_t seed, const BootstrapSetup& setup = {}) {
    const auto be = bootstrap_errors(data, fit, fit, R, seed, setup);
    UncertaintyEstimate out;
    out.method = UncertaintyMethod::Bootstrap;
    out.R = R;
    out.seed = seed;
    out.failed_replicates = be.failed;
    out.value = measure_from_errors(be, data.m(), spec);
    // basic bootstrap interval from the error distribution
    const auto theta_hat = ebp(data, fit);
    for (std::size_t i = 0; i < data.m(); ++i) {
        std::vector<double> e;
        for (const auto& row : be.err)
            if (!row.empty()) e.push_back(row[i]);
        out.interval.push_back({theta_hat[i] - num::quantile(e, 0.975), theta_hat[i] - num::quantile(e, 0.025)});
    }
    return out;
}

/// a_full - ((m - 1) / m) sum_l (a_minus[l] - a_full), per area.
inline std::vector<double> mcjack_combine(const std::vector<double>& a_full,
                                          const std::vector<std::vector<double>>& a_minus) {
    const double m = static_cast<double>(a_minus.size());
    std::vector<double> out(a_full.size());
    for (std::size_t i = 0; i < a_full.size(); ++i) {
        double s = 0.0;
        for (const auto& a : a_minus) s += a[i] - a_full[i];
        out[i] = a_full[i] - (m - 1.0) / m * s;
    }
    return out;
}

/// Leave-one-area-out parameter estimates: area l's data are removed from all
/// pooled equations while every area keeps its own parameters.
inline FitResult fit_without_area(const GroupedData& data, const FitResult& fit, std::size_t l,
                                  const BootstrapSetup& setup) {
    GeeOptions opt = setup.gee;
    opt.workers = 1;
    opt.active.assign(data.m(), 1);
    opt.active[l] = 0;
    opt.warm_start = fit;
    std::vector<double> taus;
    for (const auto& pv : fit.params) taus.push_back(pv.tau);
    return fit_gee(data, setup.psi, taus, opt);
}

inline UncertaintyEstimate mcjack_measure(const GroupedData& data, const FitResult& fit, const MeasureSpec& spec,
                                          int R, std::uint64_t seed, const BootstrapSetup& setup = {}) {
    const std::size_t m = data.m();
    if (m < 3) throw std::invalid_argument("McJack needs at least 3 areas");
    if (fit.method != FitMethod::GEE) throw std::invalid_argument("McJack is implemented for GEE fits");
    std::vector<FitResult> loo(m);
    for (std::size_t l = 0; l < m; ++l) {
        try {
            loo[l] = fit_without_area(data, fit, l, setup);
        } catch (const NumericalError& e) {
            throw NumericalError("McJack: fit without area " + data[l].id + " failed: " + e.what());
        }
    }
    BootstrapSetup inner = setup;
    const auto full = bootstrap_errors(data, fit, fit, R, seed, inner);
    const auto a_full = measure_from_errors(full, m, spec);
    std::vector<std::vector<double>> a_minus(m);
    int failed = full.failed;
    for (std::size_t l = 0; l < m; ++l) {
        const auto be = bootstrap_errors(data, loo[l], fit, R, seed, inner);
        failed += be.failed;
        a_minus[l] = measure_from_errors(be, m, spec);
    }
    UncertaintyEstimate out;
    out.method = UncertaintyMethod::McJack;
    out.R = R;
    out.seed = seed;
    out.failed_replicates = failed;
    out.value = mcjack_combine(a_full, a_minus);
    if (spec.rmse_scale()) {
        const auto theta = ebp(data, fit);
        for (std::size_t i = 0; i < m; ++i) {
            const double v = std::max(out.value[i], 0.0);
            out.interval.push_back({theta[i] - 2.0 * v, theta[i] + 2.0 * v});
        }
    }
    return out;
}

}  // namespace saehd
