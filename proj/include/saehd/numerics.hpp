#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <vector>

namespace saehd::num {

inline double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }
inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

struct RootResult {
    double x = 0.0;
    double fx = 0.0;
    int iterations = 0;
    bool bracketed = true;
};

/// Brent's method on [a, b]; requires f(a), f(b) of opposite sign (or one zero).
template <class F>
RootResult brent_root(F&& f, double a, double b, double fa, double fb, double xtol, int max_iter = 200) {
    RootResult res;
    if (fa == 0.0) return {a, fa, 0, true};
    if (fb == 0.0) return {b, fb, 0, true};
    double c = a, fc = fa, d = b - a, e = d;
    for (int it = 1; it <= max_iter; ++it) {
        res.iterations = it;
        if ((fb > 0) == (fc > 0)) {
            c = a;
            fc = fa;
            d = e = b - a;
        }
        if (std::abs(fc) < std::abs(fb)) {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        const double tol1 = 2.0 * std::numeric_limits<double>::epsilon() * std::abs(b) + 0.5 * xtol;
        const double xm = 0.5 * (c - b);
        if (std::abs(xm) <= tol1 || fb == 0.0) {
            res.x = b;
            res.fx = fb;
            return res;
        }
        if (std::abs(e) >= tol1 && std::abs(fa) > std::abs(fb)) {
            // secant or inverse quadratic step
            double p, q, r;
            const double s = fb / fa;
            if (a == c) {
                p = 2.0 * xm * s;
                q = 1.0 - s;
            } else {
                q = fa / fc;
                r = fb / fc;
                p = s * (2.0 * xm * q * (q - r) - (b - a) * (r - 1.0));
                q = (q - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if (p > 0) q = -q;
            p = std::abs(p);
            const double min1 = 3.0 * xm * q - std::abs(tol1 * q);
            const double min2 = std::abs(e * q);
            if (2.0 * p < std::min(min1, min2)) {
                e = d;
                d = p / q;
            } else {
                d = xm;
                e = d;
            }
        } else {
            d = xm;
            e = d;
        }
        a = b;
        fa = fb;
        b += std::abs(d) > tol1 ? d : (xm > 0 ? tol1 : -tol1);
        fb = f(b);
    }
    res.x = b;
    res.fx = fb;
    return res;
}

/// Root of a scalar equation in a positive variable v on [lo, hi], assuming
/// g(v) > 0 for small v and g(v) < 0 for large v. Searches outward from
/// `start` on the log scale. When no sign change exists the result is clamped
/// to lo (g < 0 everywhere) or hi (g > 0 everywhere) and bracketed = false.
template <class G>
RootResult positive_root(G&& g, double lo, double hi, double start, double rel_tol = 1e-10) {
    auto f = [&](double t) { return g(std::exp(t)); };
    const double tlo = std::log(lo), thi = std::log(hi);
    double t0 = std::clamp(std::log(std::clamp(start, lo, hi)), tlo, thi);
    double f0 = f(t0);
    if (f0 == 0.0) return {std::exp(t0), 0.0, 0, true};
    constexpr double step = 1.3862943611198906;  // log 4
    double ta = t0, fa = f0, tb = t0, fb = f0;
    int evals = 1;
    if (f0 > 0) {
        // root lies above
        while (fb > 0) {
            if (tb >= thi) return {hi, fb, evals, false};
            ta = tb;
            fa = fb;
            tb = std::min(tb + step, thi);
            fb = f(tb);
            ++evals;
        }
    } else {
        while (fa < 0) {
            if (ta <= tlo) return {lo, fa, evals, false};
            tb = ta;
            fb = fa;
            ta = std::max(ta - step, tlo);
            fa = f(ta);
            ++evals;
        }
    }
    auto r = brent_root(f, ta, tb, fa, fb, rel_tol);
    r.iterations += evals;
    r.x = std::exp(r.x);
    return r;
}

struct MaxResult {
    double x = 0.0;
    double fx = 0.0;
};

/// Golden-section maximization of a unimodal f on [a, b].
template <class F>
MaxResult golden_max(F&& f, double a, double b, double xtol, int max_iter = 300) {
    constexpr double invphi = 0.6180339887498949;
    double c = b - invphi * (b - a), d = a + invphi * (b - a);
    double fc = f(c), fd = f(d);
    for (int it = 0; it < max_iter && std::abs(b - a) > xtol; ++it) {
        if (fc >= fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - invphi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + invphi * (b - a);
            fd = f(d);
        }
    }
    return fc >= fd ? MaxResult{c, fc} : MaxResult{d, fd};
}

/// Linear-interpolation quantile (R type 7). Sorts a copy.
inline double quantile(std::vector<double> v, double q) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const double h = (static_cast<double>(v.size()) - 1.0) * q;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline double median(std::vector<double> v) { return quantile(std::move(v), 0.5); }

inline double mean(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? std::numeric_limits<double>::quiet_NaN() : s / static_cast<double>(v.size());
}

/// SplitMix64 finalizer; used to derive independent stream seeds.
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t sub = 0) {
    return mix64(mix64(seed ^ mix64(stream + 0x632be59bd9b4e019ULL)) ^ mix64(sub + 0x8cb92ba72f3d8dd7ULL));
}

}  // namespace saehd::num
