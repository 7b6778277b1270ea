#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "unidistill/autodiff.hpp"
#include "unidistill/error.hpp"
#include "unidistill/fdivergence.hpp"

namespace unidistill {

struct SurrogateOptions {
    double ratio_lo = 0.0;
    double ratio_hi = std::numeric_limits<double>::infinity();
    bool c_normalize = false;
    // Keep C1's dependence on x_t live (densities or discriminator frozen).
    bool c1_x_gradient = true;
};

struct SurrogateTerms {
    ad::Var sim;  // per-row C1 * 2 (s_q - s_p) . (s_p - cond)
    ad::Var di;   // per-row SG(C2 (s_q - s_p) |s_q - s_p|^2) . x_t
    Eigen::VectorXd ratio;
    Eigen::VectorXd c1;
    Eigen::VectorXd c2;
    std::size_t clamped = 0;
};

namespace detail {

inline double median_abs(const Eigen::VectorXd& v) {
    std::vector<double> a(v.data(), v.data() + v.size());
    for (auto& x : a) x = std::abs(x);
    if (a.empty()) return 0.0;
    std::nth_element(a.begin(), a.begin() + static_cast<std::ptrdiff_t>(a.size() / 2), a.end());
    return a[a.size() / 2];
}

}  // namespace detail

// The two per-row terms of the composed loss. s_p is the stop-gradient fake
// score evaluated at the live x_t; cond is the conditional score -eps/sigma.
// log_ratio is log(q_t/p_t) at x_t, n x 1.
inline SurrogateTerms uni_instruct_terms(DivergenceKind kind, ad::Var x_t, ad::Var s_q, ad::Var s_p,
                                         const ad::Matrix& cond, ad::Var log_ratio, const SurrogateOptions& opt) {
    const auto n = x_t.rows();
    if (s_q.rows() != n || s_p.rows() != n || cond.rows() != n || log_ratio.rows() != n || log_ratio.cols() != 1)
        throw ShapeError("uni_instruct_terms: inconsistent batch shapes");
    ad::Tape& tape = *x_t.tape;
    const double llo = opt.ratio_lo > 0.0 ? std::log(opt.ratio_lo) : -std::numeric_limits<double>::infinity();
    constexpr double floor_lr = -700.0;  // keeps r representable when no clamp is configured
    const double lhi = std::log(opt.ratio_hi);

    SurrogateTerms out;
    out.ratio.resize(n);
    out.c1.resize(n);
    out.c2.resize(n);
    Eigen::VectorXd slope(n);
    for (ad::Index i = 0; i < n; ++i) {
        const double lr = log_ratio.value()(i, 0);
        if (std::isnan(lr)) throw NumericError("uni_instruct_terms: NaN log-ratio at sample " + std::to_string(i));
        const bool clamped = lr < llo || lr > lhi;
        out.clamped += clamped ? 1 : 0;
        const double r = std::exp(std::max(std::clamp(lr, llo, lhi), floor_lr));
        const auto cw = curvature(kind, r);
        out.ratio(i) = r;
        out.c1(i) = cw.c1;
        out.c2(i) = cw.c2;
        slope(i) = clamped ? 0.0 : c1_slope(kind, r) * r;  // dC1/dlog r
        if (!std::isfinite(cw.c1) || !std::isfinite(cw.c2) || !std::isfinite(slope(i)))
            throw NumericError("uni_instruct_terms: non-finite curvature weight at sample " + std::to_string(i) +
                               " (ratio " + std::to_string(r) + ")");
    }
    double s1 = 1.0, s2 = 1.0;
    if (opt.c_normalize) {
        const double m1 = detail::median_abs(out.c1), m2 = detail::median_abs(out.c2);
        if (m1 > 0.0) s1 = 1.0 / m1;
        if (m2 > 0.0) s2 = 1.0 / m2;
    }

    ad::Matrix c1v = out.c1 * s1;
    ad::Var c1;
    if (opt.c1_x_gradient) {
        const Eigen::VectorXd dslope = slope * s1;
        c1 = tape.push(c1v, {log_ratio}, [lr = log_ratio.id, dslope](ad::Tape& t, std::size_t s) {
            t.accumulate(lr, t.node(s).grad.cwiseProduct(dslope));
        });
    } else {
        c1 = tape.constant(c1v);
    }

    ad::Var delta = s_q - s_p;
    ad::Var sim = c1 * ad::row_sum(2.0 * delta * (s_p - tape.constant(cond)));

    const ad::Matrix dv = delta.value();
    ad::Matrix di_coef = dv.array().colwise() * (out.c2.array() * s2 * dv.rowwise().squaredNorm().array());
    ad::Var di = ad::row_sum(tape.constant(di_coef) * x_t);
    out.sim = sim;
    out.di = di;
    return out;
}

}  // namespace unidistill
