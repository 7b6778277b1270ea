#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "unidistill/autodiff.hpp"
#include "unidistill/error.hpp"
#include "unidistill/fdivergence.hpp"
#include "unidistill/gmm.hpp"
#include "unidistill/quadrature.hpp"
#include "unidistill/sde.hpp"
#include "unidistill/surrogate.hpp"

namespace unidistill {

struct VerificationReport {
    double lhs = 0.0;
    double rhs = 0.0;
    double terminal_term = 0.0;
    double cutoff_term = 0.0;  // contribution of (0, t_min)
    double residual = 0.0;
    double rel_residual = 0.0;
    std::vector<std::pair<double, double>> per_time_integrand;

    void finish() {
        residual = std::abs(lhs - rhs);
        rel_residual = residual / std::max(std::abs(lhs), 1e-12);
    }
};

// E_{p_t}[ r^2 f''(r) |s_p - s_q|^2 ] on a fixed space grid.
inline double expansion_rate(DivergenceKind kind, const GaussianMixture& qt, const GaussianMixture& pt,
                             const SpaceGrid& g, double t) {
    Eigen::VectorXd lq, lp;
    Eigen::MatrixXd sq, sp;
    qt.evaluate(g.points, &lq, &sq);
    pt.evaluate(g.points, &lp, &sp);
    double total = 0.0;
    for (Eigen::Index i = 0; i < g.points.rows(); ++i) {
        const double v = curvature_density(kind, lq(i), lp(i)) * (sp.row(i) - sq.row(i)).squaredNorm();
        if (!std::isfinite(v))
            throw NumericError("expansion integrand overflow at t = " + std::to_string(t) + ", " +
                               describe_point(g.points, i));
        total += g.weights(i) * v;
    }
    return total;
}

// 1/2 g(t)^2 times the expansion rate at time t.
inline double expansion_integrand(const SdeSchedule& s, DivergenceKind kind, const GaussianMixture& q0,
                                  const GaussianMixture& p0, const QuadratureGrid& grid, double t) {
    const auto qt = q0.diffused(s, t), pt = p0.diffused(s, t);
    return 0.5 * s.g2(t) * expansion_rate(kind, qt, pt, make_space_grid({&qt, &pt}, grid), t);
}

inline void check_verifiable(const GaussianMixture& q0, const GaussianMixture& p0) {
    if (q0.dim() != p0.dim()) throw ShapeError("verifier: q0 and p0 differ in dimension");
    if (q0.dim() > 2) throw ContractError("verifier: dimension must be <= 2");
}

inline VerificationReport verify_expansion(const SdeSchedule& s, const GaussianMixture& q0, const GaussianMixture& p0,
                                           const DivergenceSpec& spec, const QuadratureGrid& grid = {}) {
    s.validate();
    grid.validate();
    check_verifiable(q0, p0);
    VerificationReport rep;
    rep.lhs = divergence_quadrature(spec, q0, p0, grid);
    const auto main = grid.time_nodes(s.t_min, s.horizon_T);
    double body = 0.0;
    for (std::size_t i = 0; i < main.size(); ++i) {
        const double v = expansion_integrand(s, spec.kind, q0, p0, grid, main.nodes[i]);
        rep.per_time_integrand.emplace_back(main.nodes[i], v);
        body += main.weights[i] * v;
    }
    const auto cut = grid.cutoff_nodes(s.t_min);
    for (std::size_t i = 0; i < cut.size(); ++i)
        rep.cutoff_term += cut.weights[i] * expansion_integrand(s, spec.kind, q0, p0, grid, cut.nodes[i]);
    rep.terminal_term =
        divergence_quadrature(spec, q0.diffused(s, s.horizon_T), p0.diffused(s, s.horizon_T), grid);
    rep.rhs = body + rep.cutoff_term + rep.terminal_term;
    rep.finish();
    return rep;
}

// W(t) = integral of w on [0, t].
inline double integrate_weight(const std::function<double(double)>& w, double t, std::size_t nodes = 32) {
    if (t <= 0.0) return 0.0;
    const auto rule = gauss_legendre(nodes, 0.0, t);
    double total = 0.0;
    for (std::size_t i = 0; i < rule.size(); ++i) total += rule.weights[i] * w(rule.nodes[i]);
    return total;
}

// lhs = int 1/2 g^2 W(t) rate dt; rhs = int w(t) D_f(q_t||p_t) dt - W(T) D_f(q_T||p_T).
inline VerificationReport verify_weighting_equivalence(const SdeSchedule& s, const GaussianMixture& q0,
                                                       const GaussianMixture& p0, const DivergenceSpec& spec,
                                                       const std::function<double(double)>& w,
                                                       const QuadratureGrid& grid = {}) {
    s.validate();
    grid.validate();
    check_verifiable(q0, p0);
    VerificationReport rep;
    auto accumulate = [&](const QuadratureRule& rule, bool record) {
        double l = 0.0, r = 0.0;
        for (std::size_t i = 0; i < rule.size(); ++i) {
            const double t = rule.nodes[i];
            const auto qt = q0.diffused(s, t), pt = p0.diffused(s, t);
            const auto g = make_space_grid({&qt, &pt}, grid);
            const double li = 0.5 * s.g2(t) * integrate_weight(w, t) * expansion_rate(spec.kind, qt, pt, g, t);
            const double ri = w(t) * divergence_on_grid(spec.kind, qt, pt, g);
            if (record) rep.per_time_integrand.emplace_back(t, li);
            l += rule.weights[i] * li;
            r += rule.weights[i] * ri;
        }
        return std::pair{l, r};
    };
    const auto [lm, rm] = accumulate(grid.time_nodes(s.t_min, s.horizon_T), true);
    const auto [lc, rc] = accumulate(grid.cutoff_nodes(s.t_min), false);
    rep.cutoff_term = lc;
    const auto qT = q0.diffused(s, s.horizon_T), pT = p0.diffused(s, s.horizon_T);
    rep.terminal_term = integrate_weight(w, s.horizon_T) * divergence_quadrature(spec, qT, pT, grid);
    rep.lhs = lm + lc;
    rep.rhs = rm + rc - rep.terminal_term;
    rep.residual = std::abs(rep.lhs - rep.rhs);
    rep.rel_residual = rep.residual / std::max(std::abs(rep.rhs), 1e-12);
    return rep;
}

struct DensityRatio {
    double ratio = 1.0;
    bool clamped = false;
};

inline DensityRatio analytic_density_ratio(const GaussianMixture& q, const GaussianMixture& p, std::span<const double> x,
                                           double lo = 1e-4, double hi = 1e4) {
    const double lr = q.log_density(x) - p.log_density(x);
    const double r = std::exp(lr);
    if (!std::isfinite(lr) || r < lo || r > hi) return {std::clamp(std::isnan(r) ? 1.0 : r, lo, hi), true};
    return {r, false};
}

// 1-D affine generator x = scale z + shift, z ~ N(0, 1).
struct AffineGenerator {
    double scale = 1.0;
    double shift = 0.0;
};

struct GradientReport {
    std::vector<double> lhs_grad;    // central differences of the expanded rate
    std::vector<double> rhs_grad;    // autodiff of the tractable surrogate
    std::vector<double> exact_grad;  // closed-form derivative of the expanded rate (diagnostic)
    double rel_err = 0.0;
    double exact_rel_err = 0.0;  // exact_grad against lhs_grad
};

namespace detail {

struct AffineMarginal {
    double alpha, sigma, P, mean;
};

inline AffineMarginal affine_marginal(const SdeSchedule& s, const AffineGenerator& g, double t) {
    const auto tp = s.transition(t);
    return {tp.alpha, tp.sigma, tp.alpha * tp.alpha * g.scale * g.scale + tp.sigma * tp.sigma, tp.alpha * g.shift};
}

// Interval in x that carries the integrands at time t. For chi-squared the
// weight q^2/p decays with variance 1 / (2/v_k - 1/P) per component.
inline std::pair<double, double> affine_support(const GaussianMixture& qt, const AffineMarginal& m,
                                                DivergenceKind kind, double extent, double t) {
    double lo = m.mean - extent * std::sqrt(m.P), hi = m.mean + extent * std::sqrt(m.P);
    for (const auto& c : qt.components()) {
        double v = c.diag_cov[0];
        if (kind == DivergenceKind::ChiSq) {
            const double prec = 2.0 / v - 1.0 / m.P;
            if (!(prec > 0.0))
                throw NumericError("chi-squared integrand is not integrable at t = " + std::to_string(t) +
                                   " (generator variance " + std::to_string(m.P) + " <= half a teacher component variance)");
            v = std::max(v, 1.0 / prec);
        }
        lo = std::min(lo, c.mean[0] - extent * std::sqrt(v));
        hi = std::max(hi, c.mean[0] + extent * std::sqrt(v));
    }
    return {lo, hi};
}

inline std::vector<double> time_rule_concat(const QuadratureRule& a, const QuadratureRule& b, bool nodes) {
    std::vector<double> out = nodes ? a.nodes : a.weights;
    const auto& tail = nodes ? b.nodes : b.weights;
    out.insert(out.end(), tail.begin(), tail.end());
    return out;
}

inline double gaussian_logpdf(double x, double mean, double var) {
    const double d = x - mean;
    return -0.5 * (std::log(2.0 * std::numbers::pi * var) + d * d / var);
}

}  // namespace detail

// The expanded rate  int_0^T 1/2 g^2 E_p[r^2 f'' (s_p - s_q)^2] dt  for an affine
// generator, on per-time x grids fixed by `frame` so finite differences are smooth.
inline double affine_expanded_rate(const SdeSchedule& s, const GaussianMixture& q0, const AffineGenerator& gen,
                                   DivergenceKind kind, const QuadratureGrid& grid, const AffineGenerator& frame) {
    const auto main = grid.time_nodes(s.t_min, s.horizon_T);
    const auto cut = grid.cutoff_nodes(s.t_min);
    const auto ts = detail::time_rule_concat(main, cut, true), tw = detail::time_rule_concat(main, cut, false);
    double total = 0.0;
    for (std::size_t k = 0; k < ts.size(); ++k) {
        const double t = ts[k];
        const auto qt = q0.diffused(s, t);
        const auto mf = detail::affine_marginal(s, frame, t);
        const auto [lo, hi] = detail::affine_support(qt, mf, kind, grid.space_extent, t);
        const auto rule = trapezoid(grid.space_points, lo, hi);
        const auto m = detail::affine_marginal(s, gen, t);
        Eigen::MatrixXd x(static_cast<Eigen::Index>(rule.size()), 1);
        for (std::size_t i = 0; i < rule.size(); ++i) x(static_cast<Eigen::Index>(i), 0) = rule.nodes[i];
        Eigen::VectorXd lq;
        Eigen::MatrixXd sq;
        qt.evaluate(x, &lq, &sq);
        double acc = 0.0;
        for (std::size_t i = 0; i < rule.size(); ++i) {
            const double xi = rule.nodes[i];
            const double lp = detail::gaussian_logpdf(xi, m.mean, m.P);
            const double d = -(xi - m.mean) / m.P - sq(static_cast<Eigen::Index>(i), 0);
            acc += rule.weights[i] * curvature_density(kind, lq(static_cast<Eigen::Index>(i)), lp) * d * d;
        }
        total += tw[k] * 0.5 * s.g2(t) * acc;
    }
    return total;
}

// Closed-form derivative of the expanded rate:
//   E[C2 d^3 dx/dth] + 2 E[u d ds_p/dth] - 2 E[v d J dx/dth],
// d = s_p - s_q, u = r^2 f'', v = u + C1, J = d/dx d, with the conditional
// expectation E[dx/dth | x] of the reparameterised sample.
inline std::vector<double> affine_exact_gradient(const SdeSchedule& s, const GaussianMixture& q0,
                                                 const AffineGenerator& gen, DivergenceKind kind,
                                                 const QuadratureGrid& grid) {
    const auto main = grid.time_nodes(s.t_min, s.horizon_T);
    const auto cut = grid.cutoff_nodes(s.t_min);
    const auto ts = detail::time_rule_concat(main, cut, true), tw = detail::time_rule_concat(main, cut, false);
    std::vector<double> out(2, 0.0);
    for (std::size_t k = 0; k < ts.size(); ++k) {
        const double t = ts[k];
        const auto qt = q0.diffused(s, t);
        const auto m = detail::affine_marginal(s, gen, t);
        const auto [lo, hi] = detail::affine_support(qt, m, kind, grid.space_extent, t);
        const auto rule = trapezoid(grid.space_points, lo, hi);
        Eigen::MatrixXd x(static_cast<Eigen::Index>(rule.size()), 1);
        for (std::size_t i = 0; i < rule.size(); ++i) x(static_cast<Eigen::Index>(i), 0) = rule.nodes[i];
        Eigen::VectorXd lq;
        Eigen::MatrixXd sq, resp;
        qt.evaluate(x, &lq, &sq, &resp);
        const double g = 0.5 * s.g2(t);
        for (std::size_t i = 0; i < rule.size(); ++i) {
            const auto ii = static_cast<Eigen::Index>(i);
            const double xi = rule.nodes[i];
            const double lp = detail::gaussian_logpdf(xi, m.mean, m.P);
            const double p = std::exp(lp);
            if (p == 0.0) continue;
            const double r = std::exp(std::clamp(lq(ii) - lp, -700.0, 700.0));
            const double sp = -(xi - m.mean) / m.P;
            // d/dx of the mixture score
            double dsq = -sq(ii, 0) * sq(ii, 0);
            for (std::size_t c = 0; c < qt.size(); ++c) {
                const auto& comp = qt.components()[c];
                const double sk = -(xi - comp.mean[0]) / comp.diag_cov[0];
                dsq += resp(ii, static_cast<Eigen::Index>(c)) * (-1.0 / comp.diag_cov[0] + sk * sk);
            }
            const double d = sp - sq(ii, 0);
            const double J = -1.0 / m.P - dsq;
            const auto cw = curvature(kind, r);
            const double u = r2_f2(kind, r);
            const double v = u + cw.c1;
            const double dxdth[2] = {m.alpha * m.alpha * gen.scale * (xi - m.mean) / m.P, m.alpha};
            const double dsdth[2] = {(xi - m.mean) * 2.0 * m.alpha * m.alpha * gen.scale / (m.P * m.P),
                                     m.alpha / m.P};
            for (int j = 0; j < 2; ++j)
                out[j] += tw[k] * g * rule.weights[i] * p *
                          (cw.c2 * d * d * d * dxdth[j] + 2.0 * u * d * dsdth[j] - 2.0 * v * d * J * dxdth[j]);
        }
    }
    return out;
}

// Gradient of the composed surrogate loss for the affine generator, by
// autodiff through x_t(theta). The expectation over (z, eps) is computed on a
// rotated grid: u = (a z + sigma eps)/sqrt(P) fixes x_t and is integrated by
// trapezoid against the normal density; the orthogonal direction enters at
// most quadratically and is integrated exactly by 3-point Gauss-Hermite.
inline std::vector<double> affine_surrogate_gradient(const SdeSchedule& s, const GaussianMixture& q0,
                                                     const AffineGenerator& gen, DivergenceKind kind,
                                                     const QuadratureGrid& grid, const SurrogateOptions& opt = {}) {
    const auto main = grid.time_nodes(s.t_min, s.horizon_T);
    const auto cut = grid.cutoff_nodes(s.t_min);
    const auto ts = detail::time_rule_concat(main, cut, true), tw = detail::time_rule_concat(main, cut, false);
    const auto gh = gauss_hermite_normal(3);
    std::vector<double> out(2, 0.0);
    for (std::size_t k = 0; k < ts.size(); ++k) {
        const double t = ts[k];
        const auto qt = q0.diffused(s, t);
        const auto m = detail::affine_marginal(s, gen, t);
        const auto [lo, hi] = detail::affine_support(qt, m, kind, grid.space_extent, t);
        const double sP = std::sqrt(m.P);
        const auto rule = trapezoid(grid.space_points, (lo - m.mean) / sP, (hi - m.mean) / sP);
        const double a = m.alpha * gen.scale;
        const auto n = static_cast<ad::Index>(rule.size() * gh.size());
        ad::Matrix Z(n, 2), eps(n, 1);
        Eigen::VectorXd w(n), alpha = Eigen::VectorXd::Constant(n, m.alpha), sigma = Eigen::VectorXd::Constant(n, m.sigma);
        ad::Index row = 0;
        for (std::size_t i = 0; i < rule.size(); ++i)
            for (std::size_t j = 0; j < gh.size(); ++j, ++row) {
                const double u = rule.nodes[i], v = gh.nodes[j];
                Z(row, 0) = (a * u + m.sigma * v) / sP;
                Z(row, 1) = 1.0;
                eps(row, 0) = (m.sigma * u - a * v) / sP;
                w(row) = rule.weights[i] * std::exp(-0.5 * u * u) / std::sqrt(2.0 * std::numbers::pi) * gh.weights[j];
            }
        ad::Tape tape;
        ad::Var theta = tape.leaf((ad::Matrix(2, 1) << gen.scale, gen.shift).finished(), true);
        ad::Var x0 = ad::matmul(tape.constant(Z), theta);
        ad::Var xt = ad::add(ad::scale(x0, m.alpha), tape.constant(m.sigma * eps));
        ad::Var s_q = ad::mixture_score(q0, xt, alpha, sigma);
        ad::Var s_p = ad::add_scalar(ad::scale(xt, -1.0 / m.P), m.mean / m.P);
        // log p_t at live x_t with frozen generator parameters
        ad::Var log_p = ad::add_scalar(ad::scale(ad::square(ad::add_scalar(xt, -m.mean)), -0.5 / m.P),
                                       -0.5 * std::log(2.0 * std::numbers::pi * m.P));
        ad::Var log_ratio = ad::sub(ad::mixture_logpdf(q0, xt, alpha, sigma), log_p);
        const ad::Matrix cond = -eps / m.sigma;
        const auto terms = uni_instruct_terms(kind, xt, s_q, s_p, cond, log_ratio, opt);
        ad::Var loss = ad::weighted_sum(ad::add(terms.sim, terms.di), w * (-0.5 * s.g2(t)));
        tape.backward(loss);
        out[0] += tw[k] * tape.grad(theta)(0, 0);
        out[1] += tw[k] * tape.grad(theta)(1, 0);
    }
    return out;
}

inline double rel_error(const std::vector<double>& a, const std::vector<double>& b) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        den += b[i] * b[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-12);
}

inline GradientReport verify_gradient_equality(const SdeSchedule& s, const GaussianMixture& q0,
                                               const AffineGenerator& gen, const DivergenceSpec& spec,
                                               const QuadratureGrid& grid = {}, const SurrogateOptions& opt = {},
                                               double h = 1e-4) {
    s.validate();
    grid.validate();
    if (!(gen.scale > 0.0)) throw ContractError("verify_gradient_equality: generator scale must be > 0");
    if (q0.dim() != 1) throw ContractError("verify_gradient_equality: teacher must be one-dimensional");
    if (!(gen.scale - h > 0.0)) throw ContractError("verify_gradient_equality: scale too small for the difference step");
    GradientReport rep;
    auto rate = [&](double sc, double sh) { return affine_expanded_rate(s, q0, {sc, sh}, spec.kind, grid, gen); };
    rep.lhs_grad = {(rate(gen.scale + h, gen.shift) - rate(gen.scale - h, gen.shift)) / (2.0 * h),
                    (rate(gen.scale, gen.shift + h) - rate(gen.scale, gen.shift - h)) / (2.0 * h)};
    rep.rhs_grad = affine_surrogate_gradient(s, q0, gen, spec.kind, grid, opt);
    rep.exact_grad = affine_exact_gradient(s, q0, gen, spec.kind, grid);
    rep.rel_err = rel_error(rep.rhs_grad, rep.lhs_grad);
    rep.exact_rel_err = rel_error(rep.exact_grad, rep.lhs_grad);
    return rep;
}

}  // namespace unidistill
