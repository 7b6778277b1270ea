#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "unidistill/error.hpp"

namespace unidistill {

enum class SdeKind { VP, VE };

struct TransitionParams {
    double alpha = 1.0;
    double sigma = 0.0;
};

// VP uses the linear beta(t) = beta_min + t (beta_max - beta_min).
// VE uses sigma_t^2 = sigma_min^2 ((sigma_max / sigma_min)^(2t) - 1) so that
// sigma_0 = 0 and the kernel starts at the identity.
struct SdeSchedule {
    SdeKind kind = SdeKind::VP;
    double beta_min = 0.1;
    double beta_max = 20.0;
    double sigma_min = 0.01;
    double sigma_max = 50.0;
    double horizon_T = 1.0;
    double t_min = 1e-3;

    void validate() const {
        if (!(t_min > 0.0 && t_min < horizon_T)) throw ValidationError("schedule.t_min", "need 0 < t_min < T");
        if (kind == SdeKind::VP) {
            if (!(beta_min > 0.0)) throw ValidationError("schedule.beta_min", "must be > 0");
            if (!(beta_max >= beta_min)) throw ValidationError("schedule.beta_max", "must be >= beta_min");
        } else {
            if (!(sigma_min > 0.0)) throw ValidationError("schedule.sigma_min", "must be > 0");
            if (!(sigma_max > sigma_min)) throw ValidationError("schedule.sigma_max", "must be > sigma_min");
        }
    }

    void check_time(double t) const {
        if (!(t >= 0.0 && t <= horizon_T))
            throw ContractError("schedule: t = " + std::to_string(t) + " outside [0, " + std::to_string(horizon_T) + "]");
    }

    double beta_integral(double t) const { return beta_min * t + 0.5 * t * t * (beta_max - beta_min); }

    TransitionParams transition(double t) const {
        check_time(t);
        if (kind == SdeKind::VP) {
            const double b = beta_integral(t);
            return {std::exp(-0.5 * b), std::sqrt(-std::expm1(-b))};
        }
        const double ratio2 = std::pow(sigma_max / sigma_min, 2.0 * t);
        return {1.0, sigma_min * std::sqrt(ratio2 - 1.0)};
    }

    // g(t)^2 of the forward SDE dx = f(t) x dt + g(t) dw.
    double g2(double t) const {
        check_time(t);
        if (kind == SdeKind::VP) return beta_min + t * (beta_max - beta_min);
        const double lr = std::log(sigma_max / sigma_min);
        return sigma_min * sigma_min * 2.0 * lr * std::pow(sigma_max / sigma_min, 2.0 * t);
    }

    // Linear drift coefficient f(t) = d log alpha_t / dt.
    double drift(double t) const {
        check_time(t);
        return kind == SdeKind::VP ? -0.5 * g2(t) : 0.0;
    }
};

inline std::vector<double> diffuse_sample(const SdeSchedule& s, std::span<const double> x0, double t,
                                          std::span<const double> noise) {
    if (x0.size() != noise.size()) throw ShapeError("diffuse_sample: noise dimension does not match x0");
    const auto tp = s.transition(t);
    std::vector<double> xt(x0.size());
    for (std::size_t i = 0; i < x0.size(); ++i) xt[i] = tp.alpha * x0[i] + tp.sigma * noise[i];
    return xt;
}

inline std::vector<double> conditional_score(const SdeSchedule& s, std::span<const double> xt,
                                             std::span<const double> x0, double t) {
    if (xt.size() != x0.size()) throw ShapeError("conditional_score: dimension mismatch");
    const auto tp = s.transition(t);
    if (!(tp.sigma > 0.0)) throw DomainError("conditional_score: kernel is singular at t = " + std::to_string(t));
    std::vector<double> out(xt.size());
    const double inv = 1.0 / (tp.sigma * tp.sigma);
    for (std::size_t i = 0; i < xt.size(); ++i) out[i] = -(xt[i] - tp.alpha * x0[i]) * inv;
    return out;
}

}  // namespace unidistill
