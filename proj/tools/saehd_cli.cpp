#include "saehd/saehd.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

using namespace saehd;
using nlohmann::json;

namespace {

class UsageError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Settings {
    std::string units, areas, population, out;
    std::string psi = "huber";
    double c = 1.345;
    std::string tau = "elb";
    std::string grid = "0.02:0.98:0.02";
    double tol = 1e-6;
    int max_iter = 200;
    std::string measure = "rmse";
    std::string method = "bootstrap";
    int R = 100;
    std::string scenario = "s00";
    std::size_t m = 100;
    long N = 100, n = 4;
    std::string n_grid = "5,10,20,50";
    int T = 200;
    std::uint64_t seed = 1;
    int workers = 1;
};

std::vector<double> split_numbers(const std::string& s, char sep, const char* what) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, sep)) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(part, &used));
            if (used != part.size()) throw std::invalid_argument(part);
        } catch (const std::exception&) {
            throw UsageError(std::string("bad ") + what + ": '" + s + "'");
        }
    }
    return out;
}

EstimatorConfig estimator(const Settings& s) {
    EstimatorConfig cfg;
    try {
        if (s.psi == "huber") cfg.psi = PsiSpec::huber(s.c);
        else if (s.psi == "identity") cfg.psi = PsiSpec::identity();
        else if (s.psi == "sign") cfg.psi = PsiSpec::sign();
        else throw UsageError("--psi must be huber, identity or sign");
        if (s.tau == "elb") {
            cfg.estimate_tau = true;
        } else if (s.tau.rfind("fixed:", 0) == 0) {
            cfg.estimate_tau = false;
            const auto v = split_numbers(s.tau.substr(6), ',', "--tau");
            if (v.size() != 1 || !(v[0] > 0 && v[0] < 1)) throw UsageError("--tau fixed:<v> needs 0 < v < 1");
            cfg.fixed_tau = v[0];
        } else {
            throw UsageError("--tau must be elb or fixed:<v>");
        }
        const auto g = split_numbers(s.grid, ':', "--grid");
        if (g.size() != 3) throw UsageError("--grid must be min:max:step");
        cfg.grid = TauGrid(g[0], g[1], g[2]);
        cfg.gee.ctl.tol = s.tol;
        cfg.gee.ctl.max_iter = s.max_iter;
        cfg.gee.ctl.check();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    cfg.gee.workers = s.workers;
    return cfg;
}

MeasureSpec measure(const std::string& m) {
    if (m == "rmse") return MeasureSpec::rmse();
    if (m == "rrmse") return MeasureSpec::rrmse();
    if (m == "mse") return MeasureSpec::mse();
    if (m == "log-mse") return MeasureSpec::log_mse();
    throw UsageError("--measure must be rmse, rrmse, mse or log-mse");
}

UncertaintyMethod method(const std::string& m) {
    if (m == "naive") return UncertaintyMethod::Naive;
    if (m == "bootstrap") return UncertaintyMethod::Bootstrap;
    if (m == "mcjack") return UncertaintyMethod::McJack;
    throw UsageError("--method must be naive, bootstrap or mcjack");
}

Scenario scenario(const std::string& s) {
    if (s == "s00") return Scenario::S00;
    if (s == "sbeta0") return Scenario::SBeta0;
    if (s == "sbetasigma") return Scenario::SBetaSigma;
    if (s == "outlier") return Scenario::OutlierMixture;
    throw UsageError("--scenario must be s00, sbeta0, sbetasigma or outlier");
}

json settings_json(const Settings& s, const std::string& cmd) {
    return {{"command", cmd},       {"units", s.units},     {"areas", s.areas},       {"population", s.population},
            {"out", s.out},         {"psi", s.psi},         {"c", s.c},               {"tau", s.tau},
            {"grid", s.grid},       {"tol", s.tol},         {"max_iter", s.max_iter}, {"measure", s.measure},
            {"method", s.method},   {"R", s.R},             {"scenario", s.scenario}, {"m", s.m},
            {"N", s.N},             {"n", s.n},             {"n_grid", s.n_grid},     {"T", s.T},
            {"seed", s.seed},       {"workers", s.workers}};
}

/// CSV to --out (or stdout) and the manifest next to it as <out>.json.
class Output {
public:
    explicit Output(const Settings& s, const std::string& cmd) : path_(s.out), manifest_{{"settings", settings_json(s, cmd)}} {
        if (!path_.empty()) {
            file_.open(path_);
            if (!file_) throw UsageError("cannot write " + path_);
        }
    }
    std::ostream& csv() { return path_.empty() ? std::cout : file_; }
    json& manifest() { return manifest_; }
    void finish() {
        manifest_["outputs"] = {{"csv", path_.empty() ? "stdout" : path_}};
        if (path_.empty()) return;
        std::ofstream(path_ + ".json") << manifest_.dump(2) << '\n';
    }

private:
    std::string path_;
    std::ofstream file_;
    json manifest_;
};

GroupedData load(const Settings& s) {
    if (s.units.empty() || s.areas.empty()) throw UsageError("--units and --areas are required");
    return read_unit_csv(s.units, s.areas);
}

json fit_summary(const FitResult& f) {
    return {{"method", f.method == FitMethod::GEE ? "gee" : "mle"},
            {"converged", f.converged},
            {"iterations", f.iterations},
            {"max_param_delta", f.max_param_delta},
            {"bracket_warning", f.bracket_warning},
            {"beta0", f.beta0()},
            {"sigma2_gamma", f.sigma2_gamma()},
            {"flagged_areas", f.flagged_areas}};
}

void warn_if_unconverged(const FitResult& f) {
    if (!f.converged) std::cerr << "warning: fit did not converge (max change " << f.max_param_delta << ")\n";
    if (f.bracket_warning) std::cerr << "warning: a variance root was clamped to the bracket\n";
}

/// GEE fit plus the optional MLE and BHF comparators; MLE failures are recorded, not fatal.
FullFit fit_everything(const GroupedData& d, const EstimatorConfig& cfg, json& man) {
    FullFit f = fit_all(d, cfg, false);
    if (d.unit_multipliers()) {
        try {
            f.mle = fit_mle(d, cfg.gee.ctl);
        } catch (const NumericalError& e) {
            man["mle_error"] = e.what();
        }
    }
    warn_if_unconverged(f.gee);
    man["gee"] = fit_summary(f.gee);
    if (f.mle) man["mle"] = fit_summary(*f.mle);
    man["bhf"] = {{"beta0", f.bhf.beta0}, {"sigma2_gamma", f.bhf.sigma2_gamma}, {"sigma2_eps", f.bhf.sigma2_eps}};
    return f;
}

int cmd_fit(const Settings& s) {
    const auto d = load(s);
    const auto cfg = estimator(s);
    Output out(s, "fit");
    const auto f = fit_everything(d, cfg, out.manifest());
    auto& o = out.csv();
    o << "area_id,method,tau,alpha0,beta0";
    for (std::size_t c = 1; c <= d.p(); ++c) o << ",beta" << c;
    o << ",sigma2_gamma,sigma2_eps\n";
    auto rows = [&](const FitResult& fr, const char* name) {
        for (std::size_t i = 0; i < d.m(); ++i) {
            const auto& pv = fr.params[i];
            o << d[i].id << ',' << name << ',' << detail::fmt(pv.tau) << ','
              << (fr.area_intercepts.empty() ? "" : detail::fmt(fr.area_intercepts[i])) << ',' << detail::fmt(pv.beta0);
            for (Eigen::Index c = 0; c < pv.beta.size(); ++c) o << ',' << detail::fmt(pv.beta(c));
            o << ',' << detail::fmt(pv.sigma2_gamma) << ',' << detail::fmt(pv.sigma2_eps) << '\n';
        }
    };
    rows(f.gee, "gee");
    if (f.mle) rows(*f.mle, "mle");
    out.finish();
    return 0;
}

int cmd_predict(const Settings& s) {
    const auto d = load(s);
    auto cfg = estimator(s);
    Output out(s, "predict");
    // MQ predictors need the tau grid even when the GEE uses a fixed tau
    FullFit f = fit_everything(d, cfg, out.manifest());
    if (!f.tau.estimates) {
        EstimatorConfig tc = cfg;
        tc.estimate_tau = true;
        f.tau.estimates = choose_taus(d, tc).estimates;
    }
    write_predictions(out.csv(), predict_all(d, cfg, f));
    out.finish();
    return 0;
}

int cmd_uncertainty(const Settings& s) {
    const auto d = load(s);
    const auto cfg = estimator(s);
    const auto spec = measure(s.measure);
    const auto how = method(s.method);
    if (how == UncertaintyMethod::Naive && s.measure != "rmse") throw UsageError("--method naive supports --measure rmse only");
    if (how != UncertaintyMethod::Naive && s.R < 2) throw UsageError("--R must be at least 2");
    Output out(s, "uncertainty");
    const auto tc = choose_taus(d, cfg);
    const auto fit = fit_model(d, cfg, tc.taus);
    warn_if_unconverged(fit);
    out.manifest()["gee"] = fit_summary(fit);
    BootstrapSetup bs;
    bs.psi = cfg.psi;
    bs.gee = cfg.gee;
    bs.workers = s.workers;
    UncertaintyEstimate ue;
    if (how == UncertaintyMethod::Naive) ue = naive_rmse(d, fit);
    else if (how == UncertaintyMethod::Bootstrap) ue = bootstrap_measure(d, fit, spec, s.R, s.seed, bs);
    else ue = mcjack_measure(d, fit, spec, s.R, s.seed, bs);
    out.manifest()["failed_replicates"] = ue.failed_replicates;
    const auto theta = ebp(d, fit);
    auto& o = out.csv();
    o << "area_id,ebp,measure,method,value,lo,hi\n";
    for (std::size_t i = 0; i < d.m(); ++i) {
        o << d[i].id << ',' << detail::fmt(theta[i]) << ',' << s.measure << ',' << to_string(how) << ','
          << detail::fmt(ue.value[i]);
        if (ue.interval.empty()) o << ",,\n";
        else o << ',' << detail::fmt(ue.interval[i].lo) << ',' << detail::fmt(ue.interval[i].hi) << '\n';
    }
    out.finish();
    return 0;
}

int cmd_simulate(const Settings& s, bool with_rmse) {
    SimOptions opt;
    opt.est = estimator(s);
    opt.est.gee.workers = 1;
    opt.workers = s.workers;
    opt.R = s.R;
    if (with_rmse) opt.rmse_estimators = {method(s.method)};
    Output out(s, "simulate");
    if (!s.population.empty()) {
        const auto pop = read_population_csv(s.population);
        std::vector<long> grid;
        for (double v : split_numbers(s.n_grid, ',', "--n-grid")) {
            if (!(v >= 1) || v != std::floor(v)) throw UsageError("--n-grid entries must be positive integers");
            grid.push_back(static_cast<long>(v));
        }
        if (s.T < 1) throw UsageError("--T must be >= 1");
        opt.track_variance_ratio = false;
        opt.predictors = {Predictor::Direct, Predictor::EBLUP, Predictor::EBP, Predictor::EBPFinite, Predictor::MQ,
                          Predictor::MQCD};
        const auto runs = run_design_based(pop, grid, s.T, opt, s.seed);
        out.csv() << "label,kind,name,arb_pct,rrmse_pct,eff,rb_pct,coverage_pct\n";
        json per_n = json::array();
        for (const auto& r : runs) {
            std::ostringstream tmp;
            write_metrics(tmp, r.table, "n" + std::to_string(r.n));
            const auto text = tmp.str();
            out.csv() << text.substr(text.find('\n') + 1);
            per_n.push_back({{"n", r.n}, {"replicates", r.table.replicates}, {"failed", r.table.failed}});
        }
        out.manifest()["design_based"] = per_n;
    } else {
        ScenarioConfig cfg;
        cfg.kind = scenario(s.scenario);
        cfg.m = s.m;
        cfg.N = s.N;
        cfg.n = s.n;
        cfg.T = s.T;
        cfg.seed = s.seed;
        try {
            cfg.check();
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        }
        const auto tab = run_model_based(cfg, opt);
        write_metrics(out.csv(), tab, s.scenario);
        out.manifest()["model_based"] = {{"replicates", tab.replicates},
                                         {"failed", tab.failed},
                                         {"gee_var_ratio", tab.gee_var_ratio},
                                         {"mle_var_ratio", tab.mle_var_ratio}};
    }
    out.finish();
    return 0;
}

int cmd_diagnose(const Settings& s) {
    const auto d = load(s);
    const auto cfg = estimator(s);
    const auto how = method(s.method);
    Output out(s, "diagnose");
    const auto f = fit_everything(d, cfg, out.manifest());
    BootstrapSetup bs;
    bs.psi = cfg.psi;
    bs.gee = cfg.gee;
    bs.workers = s.workers;
    UncertaintyEstimate ue;
    if (how == UncertaintyMethod::Naive) ue = naive_rmse(d, f.gee);
    else if (how == UncertaintyMethod::Bootstrap) ue = bootstrap_measure(d, f.gee, MeasureSpec::rmse(), s.R, s.seed, bs);
    else ue = mcjack_measure(d, f.gee, MeasureSpec::rmse(), s.R, s.seed, bs);
    const auto dir = direct(d), e = ebp(d, f.gee), var = direct_variance(d);
    std::vector<double> mse;
    for (double r : ue.value) mse.push_back(r * r);
    const auto w = wald_gof(dir, e, var, mse);
    const auto cv = cv_ratio(dir, var, e, ue.value);
    const auto B = ebp_shrinkage(d, f.gee);
    auto& o = out.csv();
    o << "area_id,n,direct,var_direct,ebp,rmse_ebp,B_ebp,B_eblup,cv_ratio\n";
    for (std::size_t i = 0; i < d.m(); ++i)
        o << d[i].id << ',' << d[i].n() << ',' << detail::fmt(dir[i]) << ',' << detail::fmt(var[i]) << ','
          << detail::fmt(e[i]) << ',' << detail::fmt(ue.value[i]) << ',' << detail::fmt(B[i]) << ','
          << detail::fmt(f.bhf.B[i]) << ',' << detail::fmt(cv.ratio[i]) << '\n';
    std::vector<std::string> excl;
    for (auto i : w.excluded) excl.push_back(d[i].id);
    out.manifest()["wald"] = {{"W", w.W}, {"df", w.df}, {"critical_95", w.critical}, {"reject", w.reject},
                              {"excluded_areas", excl}};
    out.manifest()["cv_ratio_mean"] = cv.mean;
    out.manifest()["rmse_method"] = to_string(how);
    std::cerr << "W = " << w.W << " on " << w.df << " df (0.95 quantile " << w.critical << "): "
              << (w.reject ? "EBP differs from direct" : "not statistically different") << "; mean CV ratio "
              << cv.mean << '\n';
    out.finish();
    return 0;
}

void add_common(CLI::App* c, Settings& s) {
    c->add_option("--psi", s.psi, "influence function: huber|identity|sign");
    c->add_option("--c", s.c, "Huber tuning constant");
    c->add_option("--tau", s.tau, "tuning parameter: elb or fixed:<v>");
    c->add_option("--grid", s.grid, "M-quantile tau grid min:max:step");
    c->add_option("--tol", s.tol, "convergence tolerance");
    c->add_option("--max-iter", s.max_iter, "maximum outer iterations");
    c->add_option("--seed", s.seed, "random seed");
    c->add_option("--workers", s.workers, "worker threads")->check(CLI::PositiveNumber);
    c->add_option("--out", s.out, "output CSV path (manifest written to <out>.json)");
}

void add_data(CLI::App* c, Settings& s) {
    c->add_option("--units", s.units, "unit CSV: area_id,y,x1..xp[,k]")->required();
    c->add_option("--areas", s.areas, "area CSV: area_id,N,Xbar1..Xbarp[,h]")->required();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Small-area estimation under the nested error model with area-specific parameters"};
    app.require_subcommand(1);
    Settings s;

    auto* fit = app.add_subcommand("fit", "estimate area-specific parameters");
    add_data(fit, s);
    add_common(fit, s);

    auto* pred = app.add_subcommand("predict", "point predictions of area means");
    add_data(pred, s);
    add_common(pred, s);

    auto* unc = app.add_subcommand("uncertainty", "uncertainty of the EBP");
    add_data(unc, s);
    add_common(unc, s);
    unc->add_option("--measure", s.measure, "rmse|rrmse|mse|log-mse");
    unc->add_option("--method", s.method, "naive|bootstrap|mcjack");
    unc->add_option("--R", s.R, "bootstrap replicates");

    auto* sim = app.add_subcommand("simulate", "Monte Carlo experiments");
    add_common(sim, s);
    sim->add_option("--scenario", s.scenario, "s00|sbeta0|sbetasigma|outlier");
    sim->add_option("--m", s.m, "areas");
    sim->add_option("--N", s.N, "population units per area");
    sim->add_option("--n", s.n, "sample units per area");
    sim->add_option("--T", s.T, "replicates");
    sim->add_option("--R", s.R, "bootstrap replicates per RMSE estimate");
    auto* sim_method = sim->add_option("--method", s.method, "RMSE estimator to evaluate: naive|bootstrap|mcjack");
    sim->add_option("--population", s.population, "fixed population CSV (area_id,y,x1..); runs the design-based study");
    sim->add_option("--n-grid", s.n_grid, "comma-separated per-area sample sizes (design-based)");

    auto* diag = app.add_subcommand("diagnose", "goodness of fit and CV gains");
    add_data(diag, s);
    add_common(diag, s);
    diag->add_option("--method", s.method, "RMSE estimator: naive|bootstrap|mcjack");
    diag->add_option("--R", s.R, "bootstrap replicates");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (fit->parsed()) return cmd_fit(s);
        if (pred->parsed()) return cmd_predict(s);
        if (unc->parsed()) return cmd_uncertainty(s);
        if (sim->parsed()) return cmd_simulate(s, sim_method->count() > 0);
        if (diag->parsed()) return cmd_diagnose(s);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return 1;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 2;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return 3;
    } catch (const std::invalid_argument& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
