#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "unidistill/autodiff.hpp"
#include "unidistill/error.hpp"
#include "unidistill/gmm.hpp"
#include "unidistill/quadrature.hpp"

namespace unidistill {

enum class DivergenceKind { FKL, RKL, JKL, ChiSq, JS };
enum class ModeClass { ModeSeeking, ModeCovering };

inline constexpr std::array<DivergenceKind, 5> all_divergences{DivergenceKind::FKL, DivergenceKind::RKL,
                                                               DivergenceKind::JKL, DivergenceKind::ChiSq,
                                                               DivergenceKind::JS};

inline std::string to_string(DivergenceKind k) {
    switch (k) {
        case DivergenceKind::FKL: return "fkl";
        case DivergenceKind::RKL: return "rkl";
        case DivergenceKind::JKL: return "jkl";
        case DivergenceKind::ChiSq: return "chi2";
        case DivergenceKind::JS: return "js";
    }
    return "?";
}

inline DivergenceKind parse_divergence(std::string_view s, const std::string& field = "divergence") {
    for (auto k : all_divergences)
        if (to_string(k) == s) return k;
    throw ValidationError(field, "unknown divergence '" + std::string(s) + "' (expected fkl|rkl|jkl|chi2|js)");
}

inline std::string to_string(ModeClass c) { return c == ModeClass::ModeSeeking ? "mode-seeking" : "mode-covering"; }

struct DivergenceSpec {
    DivergenceKind kind = DivergenceKind::RKL;
    double ratio_lo = 1e-4;
    double ratio_hi = 1e4;
};

// order-th derivative of the generator f at r, orders 0..4.
inline double f_eval(DivergenceKind kind, double r, int order) {
    if (!(r > 0.0)) throw DomainError("f_eval: ratio must be > 0, got " + std::to_string(r));
    if (order < 0 || order > 4) throw ContractError("f_eval: order must be in 0..4");
    const double lr = std::log(r);
    switch (kind) {
        case DivergenceKind::FKL: {
            const std::array<double, 5> v{r * lr, 1.0 + lr, 1.0 / r, -1.0 / (r * r), 2.0 / (r * r * r)};
            return v[order];
        }
        case DivergenceKind::RKL: {
            const std::array<double, 5> v{-lr, -1.0 / r, 1.0 / (r * r), -2.0 / (r * r * r), 6.0 / (r * r * r * r)};
            return v[order];
        }
        case DivergenceKind::JKL:
            return f_eval(DivergenceKind::FKL, r, order) + f_eval(DivergenceKind::RKL, r, order);
        case DivergenceKind::ChiSq: {
            const std::array<double, 5> v{(r - 1.0) * (r - 1.0), 2.0 * (r - 1.0), 2.0, 0.0, 0.0};
            return v[order];
        }
        case DivergenceKind::JS: {
            const double s = 1.0 + r;
            const double lh = std::log(0.5 * s);
            const std::array<double, 5> v{r * lr - s * lh, lr - lh, 1.0 / (r * s), -1.0 / (r * r) + 1.0 / (s * s),
                                          2.0 / (r * r * r) - 2.0 / (s * s * s)};
            return v[order];
        }
    }
    return 0.0;
}

struct CurvatureWeights {
    double c1 = 0.0;
    double c2 = 0.0;
    double at_ratio = 1.0;
};

// C1 = r^3 f'''(r), C2 = 2 r^2 f''(r) + 4 r^3 f'''(r) + r^4 f''''(r), with the
// powers of r cancelled symbolically so tiny and huge ratios stay finite.
inline CurvatureWeights curvature(DivergenceKind kind, double r) {
    if (!(r > 0.0)) throw DomainError("curvature: ratio must be > 0, got " + std::to_string(r));
    switch (kind) {
        case DivergenceKind::FKL: return {-r, 0.0, r};
        case DivergenceKind::RKL: return {-2.0, 0.0, r};
        case DivergenceKind::JKL: return {-r - 2.0, 0.0, r};
        case DivergenceKind::ChiSq: return {0.0, 4.0 * r * r, r};
        case DivergenceKind::JS: {
            const double s = r + 1.0, a = r / s;
            return {-a * (2.0 * r + 1.0) / s, -2.0 * a * a / s, r};
        }
    }
    return {0.0, 0.0, r};
}

// r^2 f''(r) with the powers of r cancelled.
inline double r2_f2(DivergenceKind kind, double r) {
    switch (kind) {
        case DivergenceKind::FKL: return r;
        case DivergenceKind::RKL: return 1.0;
        case DivergenceKind::JKL: return r + 1.0;
        case DivergenceKind::ChiSq: return 2.0 * r * r;
        case DivergenceKind::JS: return r / (1.0 + r);
    }
    return 0.0;
}

// d C1 / d r = 3 r^2 f''' + r^3 f''''.
inline double c1_slope(DivergenceKind kind, double r) {
    if (!(r > 0.0)) throw DomainError("c1_slope: ratio must be > 0, got " + std::to_string(r));
    switch (kind) {
        case DivergenceKind::FKL:
        case DivergenceKind::JKL: return -1.0;
        case DivergenceKind::RKL:
        case DivergenceKind::ChiSq: return 0.0;
        case DivergenceKind::JS: {
            const double s = r + 1.0, a = r / s;
            return -((4.0 * r + 1.0) / s) / s + 2.0 * a * ((2.0 * r + 1.0) / s) / s;
        }
    }
    return 0.0;
}

// lim_{r -> inf} f(r)/r is finite exactly for the reverse-KL and Jensen-Shannon generators.
inline ModeClass mode_seeking_class(DivergenceKind kind) {
    return kind == DivergenceKind::RKL || kind == DivergenceKind::JS ? ModeClass::ModeSeeking
                                                                    : ModeClass::ModeCovering;
}

// p f(q/p) from log-densities, arranged so that underflow of either density
// does not produce 0 * inf.
inline double divergence_density(DivergenceKind kind, double lq, double lp) {
    const double lr = lq - lp;
    const double q = std::exp(lq), p = std::exp(lp);
    switch (kind) {
        case DivergenceKind::FKL: return q * lr;
        case DivergenceKind::RKL: return -p * lr;
        case DivergenceKind::JKL: return (q - p) * lr;
        case DivergenceKind::ChiSq: {
            const double d = std::expm1(lr);
            return p * d * d;
        }
        case DivergenceKind::JS: return q * lr - (p + q) * (ad::softplus_scalar(lr) - std::numbers::ln2);
    }
    return 0.0;
}

// p r^2 f''(r) from log-densities; the weight of the squared score gap.
inline double curvature_density(DivergenceKind kind, double lq, double lp) {
    const double q = std::exp(lq), p = std::exp(lp);
    switch (kind) {
        case DivergenceKind::FKL: return q;
        case DivergenceKind::RKL: return p;
        case DivergenceKind::JKL: return p + q;
        case DivergenceKind::ChiSq: return 2.0 * std::exp(2.0 * lq - lp);
        case DivergenceKind::JS: return std::exp(lq + lp - std::max(lq, lp) - std::log1p(std::exp(-std::abs(lq - lp))));
    }
    return 0.0;
}

// Tensor-product grid covering space_extent overall standard deviations of
// every mixture given; rows are points, weights are trapezoid products.
struct SpaceGrid {
    Eigen::MatrixXd points;
    Eigen::VectorXd weights;
};

inline SpaceGrid make_space_grid(const std::vector<const GaussianMixture*>& mixtures, const QuadratureGrid& grid) {
    if (mixtures.empty()) throw ContractError("make_space_grid: no mixtures");
    const std::size_t d = mixtures.front()->dim();
    if (d < 1 || d > 2) throw ContractError("quadrature supports dimension 1 or 2, got " + std::to_string(d));
    std::vector<double> lo(d, 1e300), hi(d, -1e300);
    for (const auto* m : mixtures) {
        if (m->dim() != d) throw ShapeError("make_space_grid: mixtures differ in dimension");
        const auto [mu, sd] = m->moments();
        for (std::size_t j = 0; j < d; ++j) {
            lo[j] = std::min(lo[j], mu[j] - grid.space_extent * sd[j]);
            hi[j] = std::max(hi[j], mu[j] + grid.space_extent * sd[j]);
        }
    }
    SpaceGrid g;
    if (d == 1) {
        const auto rule = trapezoid(grid.space_points, lo[0], hi[0]);
        g.points.resize(static_cast<Eigen::Index>(rule.size()), 1);
        g.weights.resize(static_cast<Eigen::Index>(rule.size()));
        for (std::size_t i = 0; i < rule.size(); ++i) {
            g.points(static_cast<Eigen::Index>(i), 0) = rule.nodes[i];
            g.weights(static_cast<Eigen::Index>(i)) = rule.weights[i];
        }
    } else {
        const auto rx = trapezoid(grid.space_points_2d, lo[0], hi[0]);
        const auto ry = trapezoid(grid.space_points_2d, lo[1], hi[1]);
        const auto n = static_cast<Eigen::Index>(rx.size() * ry.size());
        g.points.resize(n, 2);
        g.weights.resize(n);
        Eigen::Index k = 0;
        for (std::size_t i = 0; i < rx.size(); ++i)
            for (std::size_t j = 0; j < ry.size(); ++j, ++k) {
                g.points(k, 0) = rx.nodes[i];
                g.points(k, 1) = ry.nodes[j];
                g.weights(k) = rx.weights[i] * ry.weights[j];
            }
    }
    return g;
}

inline std::string describe_point(const Eigen::MatrixXd& pts, Eigen::Index i) {
    std::ostringstream os;
    os.precision(6);
    os << "x = (";
    for (Eigen::Index j = 0; j < pts.cols(); ++j) os << (j ? ", " : "") << pts(i, j);
    os << ")";
    return os.str();
}

inline double divergence_on_grid(DivergenceKind kind, const GaussianMixture& q, const GaussianMixture& p,
                                 const SpaceGrid& g) {
    const Eigen::VectorXd lq = q.log_density(g.points), lp = p.log_density(g.points);
    double total = 0.0;
    for (Eigen::Index i = 0; i < g.points.rows(); ++i) {
        const double v = divergence_density(kind, lq(i), lp(i));
        if (!std::isfinite(v))
            throw NumericError("divergence quadrature: non-finite integrand at " + describe_point(g.points, i));
        total += g.weights(i) * v;
    }
    return total;
}

// D_f(q || p) = integral of p f(q/p).
inline double divergence_quadrature(const DivergenceSpec& spec, const GaussianMixture& q, const GaussianMixture& p,
                                    const QuadratureGrid& grid = {}) {
    grid.validate();
    if (q.dim() != p.dim()) throw ShapeError("divergence_quadrature: q and p differ in dimension");
    return divergence_on_grid(spec.kind, q, p, make_space_grid({&q, &p}, grid));
}

}  // namespace unidistill
