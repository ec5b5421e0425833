// Walkthrough on the bundled sample: fit, predict, bootstrap RMSE, diagnostics.
#include "saehd/saehd.hpp"

#include <cstdio>
#include <string>

using namespace saehd;

int main(int argc, char** argv) {
    const std::string dir = argc > 1 ? argv[1] : "demo/data";
    const auto data = read_unit_csv(dir + "/sample_units.csv", dir + "/sample_areas.csv");

    EstimatorConfig cfg;
    const auto fit = fit_all(data, cfg, true);
    const auto ps = predict_all(data, cfg, fit);
    std::printf("GEE: %s after %d iterations, sigma2_gamma = %.3f\n", fit.gee.converged ? "converged" : "not converged",
                fit.gee.iterations, fit.gee.sigma2_gamma());

    BootstrapSetup bs;
    bs.psi = cfg.psi;
    const auto rmse = bootstrap_measure(data, fit.gee, MeasureSpec::rmse(), 50, 2024, bs);

    std::printf("%-5s %3s %8s %8s %8s %8s %7s %6s\n", "area", "n", "direct", "eblup", "ebp", "mqcd", "rmse", "B");
    for (std::size_t i = 0; i < data.m(); ++i)
        std::printf("%-5s %3ld %8.2f %8.2f %8.2f %8.2f %7.3f %6.3f\n", ps.area_id[i].c_str(), static_cast<long>(data[i].n()),
                    ps.direct[i], ps.eblup_bhf[i], ps.ebp[i], ps.mqcd[i], rmse.value[i], ps.B_ebp[i]);

    std::vector<double> mse;
    for (double r : rmse.value) mse.push_back(r * r);
    const auto var = direct_variance(data);
    const auto w = wald_gof(ps.direct, ps.ebp, var, mse);
    const auto cv = cv_ratio(ps.direct, var, ps.ebp, rmse.value);
    std::printf("Wald W = %.2f on %d df (0.95 quantile %.2f); mean CV ratio %.2f\n", w.W, w.df, w.critical, cv.mean);
}
