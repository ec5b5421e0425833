#pragma once

#include "saehd/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace saehd {

enum class PsiKind { Huber, Identity, Sign };

/// Base influence function plus an asymmetric tilt tau (0.5 = untilted):
///   psi_tau(r) = 2 psi(r) [tau 1(r > 0) + (1 - tau) 1(r <= 0)].
struct PsiSpec {
    PsiKind kind = PsiKind::Huber;
    double c = 1.345;  // Huber only
    double tau = 0.5;

    static PsiSpec huber(double c, double tau = 0.5) { return checked({PsiKind::Huber, c, tau}); }
    static PsiSpec identity(double tau = 0.5) { return checked({PsiKind::Identity, 0.0, tau}); }
    static PsiSpec sign(double tau = 0.5) { return checked({PsiKind::Sign, 0.0, tau}); }

    PsiSpec with_tau(double t) const { return checked({kind, c, t}); }
    PsiSpec untilted() const { return with_tau(0.5); }

    static PsiSpec checked(PsiSpec s) {
        if (s.kind == PsiKind::Huber && !(s.c > 0.0))
            throw std::invalid_argument("Huber tuning constant must be > 0");
        if (!(s.tau > 0.0 && s.tau < 1.0)) throw std::invalid_argument("tau must lie in (0, 1)");
        return s;
    }
};

inline std::string to_string(PsiKind k) {
    switch (k) {
        case PsiKind::Huber: return "huber";
        case PsiKind::Identity: return "identity";
        case PsiKind::Sign: return "sign";
    }
    return "?";
}

inline double psi_base(const PsiSpec& s, double r) {
    switch (s.kind) {
        case PsiKind::Huber: return std::clamp(r, -s.c, s.c);
        case PsiKind::Identity: return r;
        case PsiKind::Sign: return r > 0 ? 1.0 : (r < 0 ? -1.0 : 0.0);
    }
    return r;
}

inline double tilt_factor(double tau, double r) { return 2.0 * (r > 0 ? tau : 1.0 - tau); }

inline double psi(const PsiSpec& s, double r) { return tilt_factor(s.tau, r) * psi_base(s, r); }

/// Almost-everywhere derivative; left limit at kinks.
inline double psi_deriv(const PsiSpec& s, double r) {
    double d = 0.0;
    switch (s.kind) {
        case PsiKind::Huber: d = (r > -s.c && r <= s.c) ? 1.0 : 0.0; break;
        case PsiKind::Identity: d = 1.0; break;
        case PsiKind::Sign: d = 0.0; break;
    }
    return tilt_factor(s.tau, r) * d;
}

/// IRLS weight psi(r)/r, with the derivative convention at r = 0.
inline double psi_weight(const PsiSpec& s, double r) {
    if (std::abs(r) < 1e-12) return psi_deriv(s, r);
    return psi(s, r) / r;
}

/// E[psi(U)^2] for U ~ N(0, 1), closed form, split at 0 for the tilt.
inline double expected_square(const PsiSpec& s) {
    // half = integral over (0, inf) of psi_base(u)^2 phi(u) du
    double half = 0.5;
    if (s.kind == PsiKind::Huber) {
        const double c = s.c;
        const double Phi = num::normal_cdf(c);
        half = (Phi - 0.5) - c * num::normal_pdf(c) + c * c * (1.0 - Phi);
    }
    return 4.0 * (s.tau * s.tau + (1.0 - s.tau) * (1.0 - s.tau)) * half;
}

}  // namespace saehd
