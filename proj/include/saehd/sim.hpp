#pragma once

#include "saehd/fit_gee.hpp"
#include "saehd/fit_mle.hpp"
#include "saehd/model.hpp"
#include "saehd/numerics.hpp"
#include "saehd/parallel.hpp"
#include "saehd/pipeline.hpp"
#include "saehd/predict.hpp"
#include "saehd/uncertainty.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace saehd {

enum class Scenario { S00, SBeta0, SBetaSigma, OutlierMixture };

inline std::string to_string(Scenario s) {
    switch (s) {
        case Scenario::S00: return "s00";
        case Scenario::SBeta0: return "sbeta0";
        case Scenario::SBetaSigma: return "sbetasigma";
        case Scenario::OutlierMixture: return "outlier";
    }
    return "?";
}

struct ScenarioConfig {
    Scenario kind = Scenario::S00;
    std::size_t m = 100;
    long N = 100;
    long n = 4;
    int T = 200;
    std::uint64_t seed = 1;

    void check() const {
        if (m < 2 || N < 1 || n < 1 || n > N || T < 1) throw std::invalid_argument("invalid scenario config");
    }
};

/// A finite population: every unit of every area.
struct Population {
    std::vector<std::string> ids;
    std::vector<Eigen::VectorXd> y;
    std::vector<Eigen::MatrixXd> X;
    std::size_t p = 0;
    // generating values (model-based populations only)
    std::vector<double> sigma2_eps;
    std::vector<double> slope;
    double sigma2_gamma = 0.0;

    std::size_t m() const { return y.size(); }
    double Ybar(std::size_t i) const { return y[i].mean(); }
    Eigen::VectorXd Xbar(std::size_t i) const { return X[i].colwise().mean().transpose(); }
    std::vector<double> area_means() const {
        std::vector<double> out;
        for (std::size_t i = 0; i < m(); ++i) out.push_back(Ybar(i));
        return out;
    }
};

inline constexpr double kGammaVar = 3.0;
inline constexpr double kEpsVar = 6.0;

/// Unit error variance implied by the outlier mixture 0.97 N(0,6) + 0.03 N(20,150).
inline double outlier_mixture_variance() {
    const double p = 0.97, mu = 0.03 * 20.0;
    return p * kEpsVar + (1 - p) * 150.0 + p * (0 - mu) * (0 - mu) + (1 - p) * (20.0 - mu) * (20.0 - mu);
}

inline Population generate_population(const ScenarioConfig& cfg, std::uint64_t replicate) {
    cfg.check();
    std::mt19937_64 rng(num::derive_seed(cfg.seed, replicate, 0));
    std::lognormal_distribution<double> xdist(1.0, 0.5);
    std::normal_distribution<double> z;
    std::bernoulli_distribution clean(0.97);
    Population pop;
    pop.p = 1;
    pop.sigma2_gamma = kGammaVar;
    const std::size_t half = cfg.m / 2;
    for (std::size_t i = 0; i < cfg.m; ++i) {
        const bool first = i < half;
        pop.ids.push_back("A" + std::to_string(i + 1));
        pop.slope.push_back(cfg.kind == Scenario::S00 || first ? 5.0 : -5.0);
        double s2 = kEpsVar;
        if (cfg.kind == Scenario::SBetaSigma)
            s2 = std::max(0.5, (first ? 6.0 : 12.0) + std::sqrt(2.0) * z(rng));
        if (cfg.kind == Scenario::OutlierMixture) s2 = outlier_mixture_variance();
        pop.sigma2_eps.push_back(s2);
    }
    for (std::size_t i = 0; i < cfg.m; ++i) {
        const double gamma = std::sqrt(kGammaVar) * z(rng);
        Eigen::VectorXd y(cfg.N);
        Eigen::MatrixXd X(cfg.N, 1);
        for (long j = 0; j < cfg.N; ++j) {
            const double x = xdist(rng);
            double e;
            if (cfg.kind == Scenario::OutlierMixture)
                e = clean(rng) ? std::sqrt(kEpsVar) * z(rng) : 20.0 + std::sqrt(150.0) * z(rng);
            else
                e = std::sqrt(pop.sigma2_eps[i]) * z(rng);
            X(j, 0) = x;
            y(j) = 10.0 + pop.slope[i] * x + gamma + e;
        }
        pop.y.push_back(std::move(y));
        pop.X.push_back(std::move(X));
    }
    return pop;
}

/// Population as a Dataset (census: n = N in every area).
inline Dataset population_dataset(const Population& pop) {
    std::vector<AreaBlock> blocks;
    for (std::size_t i = 0; i < pop.m(); ++i) {
        AreaBlock b;
        b.id = pop.ids[i];
        b.y = pop.y[i];
        b.X = pop.X[i];
        b.k = Eigen::VectorXd::Ones(b.y.size());
        b.Xbar = pop.Xbar(i);
        b.N = b.y.size();
        blocks.push_back(std::move(b));
    }
    return to_dataset(GroupedData(std::move(blocks), pop.p));
}

/// Simple random sample without replacement of n_i units per area; area
/// summaries (N_i, Xbar_i) come from the population.
inline GroupedData draw_sample(const Population& pop, const std::vector<long>& n, std::mt19937_64& rng) {
    std::vector<AreaBlock> blocks;
    for (std::size_t i = 0; i < pop.m(); ++i) {
        const auto N = pop.y[i].size();
        if (n[i] < 1 || n[i] > N) throw std::invalid_argument("sample size out of range for area " + pop.ids[i]);
        std::vector<Eigen::Index> idx(static_cast<std::size_t>(N));
        std::iota(idx.begin(), idx.end(), Eigen::Index{0});
        for (long j = 0; j < n[i]; ++j) {
            std::uniform_int_distribution<Eigen::Index> pick(j, N - 1);
            std::swap(idx[static_cast<std::size_t>(j)], idx[static_cast<std::size_t>(pick(rng))]);
        }
        AreaBlock b;
        b.id = pop.ids[i];
        b.y.resize(n[i]);
        b.X.resize(n[i], static_cast<Eigen::Index>(pop.p));
        b.k = Eigen::VectorXd::Ones(n[i]);
        for (long j = 0; j < n[i]; ++j) {
            b.y(j) = pop.y[i](idx[static_cast<std::size_t>(j)]);
            b.X.row(j) = pop.X[i].row(idx[static_cast<std::size_t>(j)]);
        }
        b.Xbar = pop.Xbar(i);
        b.N = N;
        blocks.push_back(std::move(b));
    }
    return {std::move(blocks), pop.p};
}

enum class Predictor { Direct, EBLUP, EBP, EBPMLE, EBPFinite, MQ, MQCD };

inline std::string to_string(Predictor p) {
    switch (p) {
        case Predictor::Direct: return "direct";
        case Predictor::EBLUP: return "eblup";
        case Predictor::EBP: return "ebp";
        case Predictor::EBPMLE: return "ebp_mle";
        case Predictor::EBPFinite: return "ebp_finite";
        case Predictor::MQ: return "mq";
        case Predictor::MQCD: return "mqcd";
    }
    return "?";
}

inline const std::vector<double>& pick(const PredictorSet& ps, Predictor p) {
    switch (p) {
        case Predictor::Direct: return ps.direct;
        case Predictor::EBLUP: return ps.eblup_bhf;
        case Predictor::EBP: return ps.ebp;
        case Predictor::EBPMLE: return ps.ebp_mle;
        case Predictor::EBPFinite: return ps.ebp_finite;
        case Predictor::MQ: return ps.mq_synth;
        case Predictor::MQCD: return ps.mqcd;
    }
    return ps.ebp;
}

struct SimOptions {
    std::vector<Predictor> predictors{Predictor::EBLUP, Predictor::EBP, Predictor::EBPMLE, Predictor::MQ,
                                      Predictor::MQCD};
    std::vector<UncertaintyMethod> rmse_estimators;  // RMSE of the EBP
    int R = 100;
    EstimatorConfig est;
    int workers = 1;
    bool track_variance_ratio = true;
};

struct PredictorMetrics {
    Predictor predictor;
    double arb = 0.0;    // median over areas, percent
    double rrmse = 0.0;  // median over areas, percent
    double eff = 0.0;    // median over areas of RMSE / RMSE(EBLUP)
    double median_abs_rb = 0.0;
    std::vector<double> area_rb, area_rrmse, area_rmse;
};

struct EstimatorMetrics {
    UncertaintyMethod method;
    double rb = 0.0;        // median over areas, percent
    double rrmse = 0.0;     // median over areas, percent
    double coverage = 0.0;  // median over areas, percent
};

struct MetricsTable {
    std::vector<PredictorMetrics> predictors;
    std::vector<EstimatorMetrics> rmse;
    int replicates = 0;
    int failed = 0;
    // mean over areas and replicates of sigma2_eps_hat / sigma2_eps
    double gee_var_ratio = std::numeric_limits<double>::quiet_NaN();
    double mle_var_ratio = std::numeric_limits<double>::quiet_NaN();

    const PredictorMetrics* find(Predictor p) const {
        for (const auto& pm : predictors)
            if (pm.predictor == p) return &pm;
        return nullptr;
    }
    const EstimatorMetrics* find(UncertaintyMethod u) const {
        for (const auto& em : rmse)
            if (em.method == u) return &em;
        return nullptr;
    }
};

/// Outcome of one simulated sample.
struct ReplicateOutcome {
    bool ok = false;
    std::vector<double> truth;
    std::vector<std::vector<double>> pred;  // per predictor
    std::vector<std::vector<double>> rmse_hat;
    std::vector<std::vector<Interval>> interval;
    std::vector<double> gee_ratio, mle_ratio;
};

namespace detail {

inline bool needs(const std::vector<Predictor>& ps, Predictor p) {
    return std::find(ps.begin(), ps.end(), p) != ps.end();
}

inline void check_options(const SimOptions& opt) {
    if (opt.predictors.empty()) throw std::invalid_argument("no predictors requested");
    if (!opt.rmse_estimators.empty() && !needs(opt.predictors, Predictor::EBP))
        throw std::invalid_argument("RMSE estimators target the EBP; include it in the predictor list");
}

inline ReplicateOutcome evaluate_sample(const GroupedData& sample, const std::vector<double>& truth,
                                        const std::vector<double>* true_s2e, const SimOptions& opt,
                                        std::uint64_t boot_seed) {
    ReplicateOutcome out;
    out.truth = truth;
    try {
        EstimatorConfig cfg = opt.est;
        cfg.gee.workers = 1;
        const bool mq = needs(opt.predictors, Predictor::MQ) || needs(opt.predictors, Predictor::MQCD);
        const bool with_mle = needs(opt.predictors, Predictor::EBPMLE) || opt.track_variance_ratio;
        FullFit f;
        if (cfg.estimate_tau || mq) {
            EstimatorConfig tc = cfg;
            tc.estimate_tau = true;
            f.tau = choose_taus(sample, tc);
            if (!cfg.estimate_tau) f.tau.taus.assign(sample.m(), cfg.fixed_tau);
        } else {
            f.tau = choose_taus(sample, cfg);
        }
        f.gee = fit_model(sample, cfg, f.tau.taus);
        f.bhf = fit_bhf_reml(sample);
        if (with_mle && sample.unit_multipliers()) f.mle = fit_mle(sample, cfg.gee.ctl);
        const auto ps = predict_all(sample, cfg, f);
        for (auto p : opt.predictors) out.pred.push_back(pick(ps, p));
        if (opt.track_variance_ratio && true_s2e) {
            for (std::size_t i = 0; i < sample.m(); ++i) {
                out.gee_ratio.push_back(f.gee.params[i].sigma2_eps / (*true_s2e)[i]);
                if (f.mle) out.mle_ratio.push_back(f.mle->params[i].sigma2_eps / (*true_s2e)[i]);
            }
        }
        BootstrapSetup bs;
        bs.psi = cfg.psi;
        bs.gee = cfg.gee;
        for (auto u : opt.rmse_estimators) {
            UncertaintyEstimate ue;
            if (u == UncertaintyMethod::Naive) ue = naive_rmse(sample, f.gee);
            else if (u == UncertaintyMethod::Bootstrap) ue = bootstrap_measure(sample, f.gee, MeasureSpec::rmse(), opt.R, boot_seed, bs);
            else ue = mcjack_measure(sample, f.gee, MeasureSpec::rmse(), opt.R, boot_seed, bs);
            out.rmse_hat.push_back(ue.value);
            out.interval.push_back(ue.interval);
        }
        out.ok = true;
    } catch (const NumericalError&) {
        out.ok = false;
    }
    return out;
}

inline MetricsTable summarize(const std::vector<ReplicateOutcome>& reps, const SimOptions& opt) {
    MetricsTable tab;
    std::size_t m = 0;
    for (const auto& r : reps) {
        if (r.ok) {
            ++tab.replicates;
            m = r.truth.size();
        } else {
            ++tab.failed;
        }
    }
    if (tab.replicates == 0) throw NumericalError("simulation: every replicate failed");
    const double T = tab.replicates;

    std::vector<double> mean_truth(m, 0.0);
    for (const auto& r : reps)
        if (r.ok)
            for (std::size_t i = 0; i < m; ++i) mean_truth[i] += r.truth[i] / T;

    std::vector<double> eblup_rmse;
    for (std::size_t k = 0; k < opt.predictors.size(); ++k) {
        PredictorMetrics pm;
        pm.predictor = opt.predictors[k];
        for (std::size_t i = 0; i < m; ++i) {
            double se = 0.0, sse = 0.0;
            for (const auto& r : reps) {
                if (!r.ok) continue;
                const double e = r.pred[k][i] - r.truth[i];
                se += e;
                sse += e * e;
            }
            const double rmse = std::sqrt(sse / T);
            pm.area_rb.push_back(se / T / std::abs(mean_truth[i]));
            pm.area_rmse.push_back(rmse);
            pm.area_rrmse.push_back(rmse / std::abs(mean_truth[i]));
        }
        if (pm.predictor == Predictor::EBLUP) eblup_rmse = pm.area_rmse;
        std::vector<double> arb;
        for (double v : pm.area_rb) arb.push_back(std::abs(v));
        pm.arb = 100.0 * num::median(arb);
        pm.median_abs_rb = pm.arb;
        pm.rrmse = 100.0 * num::median(pm.area_rrmse);
        tab.predictors.push_back(std::move(pm));
    }
    for (auto& pm : tab.predictors) {
        if (eblup_rmse.empty()) {
            pm.eff = std::numeric_limits<double>::quiet_NaN();
            continue;
        }
        std::vector<double> eff;
        for (std::size_t i = 0; i < m; ++i)
            eff.push_back(pm.predictor == Predictor::EBLUP ? 1.0 : pm.area_rmse[i] / eblup_rmse[i]);
        pm.eff = num::median(eff);
    }

    if (!opt.rmse_estimators.empty()) {
        // empirical RMSE of the EBP is the target of every RMSE estimator
        std::vector<double> target(m, 0.0);
        for (const auto& r : reps) {
            if (!r.ok) continue;
            const std::size_t k = static_cast<std::size_t>(
                std::find(opt.predictors.begin(), opt.predictors.end(), Predictor::EBP) - opt.predictors.begin());
            for (std::size_t i = 0; i < m; ++i) {
                const double e = r.pred[k][i] - r.truth[i];
                target[i] += e * e / T;
            }
        }
        for (auto& t : target) t = std::sqrt(t);
        for (std::size_t u = 0; u < opt.rmse_estimators.size(); ++u) {
            EstimatorMetrics em;
            em.method = opt.rmse_estimators[u];
            std::vector<double> rb, rr, cov;
            for (std::size_t i = 0; i < m; ++i) {
                double s = 0.0, ss = 0.0, hit = 0.0;
                for (const auto& r : reps) {
                    if (!r.ok) continue;
                    const double v = r.rmse_hat[u][i];
                    s += v;
                    ss += (v - target[i]) * (v - target[i]);
                    if (!r.interval[u].empty()) {
                        const auto& iv = r.interval[u][i];
                        if (iv.lo <= r.truth[i] && r.truth[i] <= iv.hi) hit += 1.0;
                    }
                }
                rb.push_back((s / T - target[i]) / target[i]);
                rr.push_back(std::sqrt(ss / T) / target[i]);
                cov.push_back(hit / T);
            }
            em.rb = 100.0 * num::median(rb);
            em.rrmse = 100.0 * num::median(rr);
            em.coverage = 100.0 * num::median(cov);
            tab.rmse.push_back(em);
        }
    }

    auto ratio_mean = [&](auto member) {
        double s = 0.0;
        std::size_t c = 0;
        for (const auto& r : reps) {
            if (!r.ok) continue;
            for (double v : r.*member) {
                s += v;
                ++c;
            }
        }
        return c ? s / static_cast<double>(c) : std::numeric_limits<double>::quiet_NaN();
    };
    tab.gee_var_ratio = ratio_mean(&ReplicateOutcome::gee_ratio);
    tab.mle_var_ratio = ratio_mean(&ReplicateOutcome::mle_ratio);
    return tab;
}

}  // namespace detail

/// Model-based Monte Carlo: a fresh population and sample per replicate;
/// the target is the realized population mean of each area.
inline MetricsTable run_model_based(const ScenarioConfig& cfg, const SimOptions& opt) {
    cfg.check();
    detail::check_options(opt);
    std::vector<ReplicateOutcome> reps(static_cast<std::size_t>(cfg.T));
    parallel_for(reps.size(), opt.workers, [&](std::size_t t) {
        const auto pop = generate_population(cfg, t);
        std::mt19937_64 rng(num::derive_seed(cfg.seed, t, 1));
        const auto sample = draw_sample(pop, std::vector<long>(cfg.m, cfg.n), rng);
        reps[t] = detail::evaluate_sample(sample, pop.area_means(), &pop.sigma2_eps, opt,
                                          num::derive_seed(cfg.seed, t, 2));
    });
    return detail::summarize(reps, opt);
}

struct DesignRun {
    long n = 0;
    MetricsTable table;
    std::size_t smallest_area = 0;  // index of the area with the smallest N
};

/// Design-based Monte Carlo over a fixed population: for each n, T stratified
/// SRSWOR samples (n capped at N_i per area).
inline std::vector<DesignRun> run_design_based(const Population& pop, const std::vector<long>& n_grid, int T,
                                               const SimOptions& opt, std::uint64_t seed) {
    if (T < 1) throw std::invalid_argument("T must be >= 1");
    detail::check_options(opt);
    SimOptions o = opt;
    o.track_variance_ratio = false;
    const auto truth = pop.area_means();
    std::size_t smallest = 0;
    for (std::size_t i = 1; i < pop.m(); ++i)
        if (pop.y[i].size() < pop.y[smallest].size()) smallest = i;
    std::vector<DesignRun> out;
    for (long n : n_grid) {
        std::vector<long> sizes;
        for (std::size_t i = 0; i < pop.m(); ++i) sizes.push_back(std::min<long>(n, pop.y[i].size()));
        std::vector<ReplicateOutcome> reps(static_cast<std::size_t>(T));
        parallel_for(reps.size(), o.workers, [&](std::size_t t) {
            std::mt19937_64 rng(num::derive_seed(seed, static_cast<std::uint64_t>(n), t));
            const auto sample = draw_sample(pop, sizes, rng);
            reps[t] = detail::evaluate_sample(sample, truth, nullptr, o,
                                              num::derive_seed(seed, static_cast<std::uint64_t>(n), t + (1ULL << 32)));
        });
        out.push_back({n, detail::summarize(reps, o), smallest});
    }
    return out;
}

}  // namespace saehd
