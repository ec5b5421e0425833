#pragma once

#include "saehd/fit_gee.hpp"
#include "saehd/fit_mle.hpp"
#include "saehd/mq.hpp"
#include "saehd/predict.hpp"

#include <optional>
#include <vector>

namespace saehd {

/// End-to-end estimation settings shared by the CLI, the bootstrap and the simulations.
struct EstimatorConfig {
    PsiSpec psi = PsiSpec::huber(1.345);
    bool estimate_tau = true;  // ELB tau from the M-quantile grid; else fixed_tau for every area
    double fixed_tau = 0.5;
    TauGrid grid;
    GeeOptions gee;
    bool mq_use_elb = true;  // MQ/MQCD at the ELB tau (else the raw area mean tau)
};

struct TauChoice {
    std::vector<double> taus;
    std::optional<TauEstimates> estimates;
};

inline TauChoice choose_taus(const GroupedData& data, const EstimatorConfig& cfg) {
    TauChoice out;
    if (!cfg.estimate_tau) {
        out.taus.assign(data.m(), cfg.fixed_tau);
        return out;
    }
    // the M-quantile grid always uses the Huber function; identity/sign settings
    // fall back to the conventional c = 1.345 there
    const double c = cfg.psi.kind == PsiKind::Huber ? cfg.psi.c : 1.345;
    out.estimates = estimate_taus(data, cfg.grid, c);
    out.taus = out.estimates->elb_tau;
    return out;
}

inline FitResult fit_model(const GroupedData& data, const EstimatorConfig& cfg, const std::vector<double>& taus) {
    return fit_gee(data, cfg.psi, taus, cfg.gee);
}

struct FullFit {
    TauChoice tau;
    FitResult gee;
    BhfFit bhf;
    std::optional<FitResult> mle;
};

inline FullFit fit_all(const GroupedData& data, const EstimatorConfig& cfg, bool with_mle) {
    FullFit f;
    f.tau = choose_taus(data, cfg);
    f.gee = fit_model(data, cfg, f.tau.taus);
    f.bhf = fit_bhf_reml(data);
    if (with_mle && data.unit_multipliers()) f.mle = fit_mle(data, cfg.gee.ctl);
    return f;
}

inline PredictorSet predict_all(const GroupedData& data, const EstimatorConfig& cfg, const FullFit& f) {
    PredictorSet ps;
    for (const auto& b : data.blocks()) ps.area_id.push_back(b.id);
    ps.direct = direct(data);
    ps.eblup_bhf = eblup_bhf(data, f.bhf);
    ps.B_bhf = f.bhf.B;
    ps.ebp = ebp(data, f.gee);
    ps.ebp_finite = ebp_finite(data, f.gee);
    ps.B_ebp = ebp_shrinkage(data, f.gee);
    if (f.mle) {
        ps.ebp_mle = ebp(data, *f.mle);
        ps.B_mle = ebp_shrinkage(data, *f.mle);
    }
    if (f.tau.estimates) {
        const double c = cfg.psi.kind == PsiKind::Huber ? cfg.psi.c : 1.345;
        MQFits fits(data, c);
        const auto& mq_tau = cfg.mq_use_elb ? f.tau.estimates->elb_tau : f.tau.estimates->area_mean_tau;
        ps.mq_synth = mq_synthetic(data, mq_tau, fits);
        ps.mqcd = mqcd(data, mq_tau, fits);
    }
    return ps;
}

}  // namespace saehd
