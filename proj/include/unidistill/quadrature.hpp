#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <numbers>
#include <utility>
#include <vector>

#include "unidistill/error.hpp"

namespace unidistill {

struct QuadratureRule {
    std::vector<double> nodes;
    std::vector<double> weights;
    std::size_t size() const { return nodes.size(); }
};

// Golub-Welsch: nodes are eigenvalues of the Jacobi matrix, weights come from
// the first eigenvector components.
namespace detail {
inline QuadratureRule golub_welsch(const Eigen::VectorXd& offdiag, double mu0) {
    const auto n = offdiag.size() + 1;
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
    for (Eigen::Index i = 0; i + 1 < n; ++i) J(i, i + 1) = J(i + 1, i) = offdiag(i);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
    QuadratureRule r;
    for (Eigen::Index i = 0; i < n; ++i) {
        r.nodes.push_back(es.eigenvalues()(i));
        const double v0 = es.eigenvectors()(0, i);
        r.weights.push_back(mu0 * v0 * v0);
    }
    return r;
}
}  // namespace detail

// Gauss-Legendre on [a, b].
inline QuadratureRule gauss_legendre(std::size_t n, double a = -1.0, double b = 1.0) {
    if (n < 1) throw ContractError("gauss_legendre: need at least one node");
    QuadratureRule r;
    if (n == 1) {
        r.nodes = {0.0};
        r.weights = {2.0};
    } else {
        Eigen::VectorXd off(static_cast<Eigen::Index>(n - 1));
        for (std::size_t k = 1; k < n; ++k) {
            const double kk = static_cast<double>(k);
            off(static_cast<Eigen::Index>(k - 1)) = kk / std::sqrt(4.0 * kk * kk - 1.0);
        }
        r = detail::golub_welsch(off, 2.0);
    }
    const double half = 0.5 * (b - a), mid = 0.5 * (a + b);
    for (std::size_t i = 0; i < r.size(); ++i) {
        r.nodes[i] = mid + half * r.nodes[i];
        r.weights[i] *= half;
    }
    return r;
}

// Gauss-Hermite for the standard normal weight: sum w_i f(x_i) ~ E[f(Z)].
inline QuadratureRule gauss_hermite_normal(std::size_t n) {
    if (n < 1) throw ContractError("gauss_hermite_normal: need at least one node");
    if (n == 1) return {{0.0}, {1.0}};
    Eigen::VectorXd off(static_cast<Eigen::Index>(n - 1));
    for (std::size_t k = 1; k < n; ++k) off(static_cast<Eigen::Index>(k - 1)) = std::sqrt(static_cast<double>(k));
    return detail::golub_welsch(off, 1.0);
}

// Composite trapezoid on [a, b] with n points (n >= 2).
inline QuadratureRule trapezoid(std::size_t n, double a, double b) {
    if (n < 2) throw ContractError("trapezoid: need at least two points");
    QuadratureRule r;
    const double h = (b - a) / static_cast<double>(n - 1);
    for (std::size_t i = 0; i < n; ++i) {
        r.nodes.push_back(a + h * static_cast<double>(i));
        r.weights.push_back(i == 0 || i + 1 == n ? 0.5 * h : h);
    }
    return r;
}

// Space and time resolution shared by divergence quadrature and the verifier.
// Time nodes are Gauss-Legendre on [t_min, T]; the (0, t_min) segment gets
// its own Gauss-Legendre rule so time integrals cover [0, T].
struct QuadratureGrid {
    std::size_t space_points = 2048;    // per axis in 1-D
    std::size_t space_points_2d = 512;  // per axis in 2-D
    double space_extent = 10.0;         // half-width in standard deviations
    std::size_t time_points = 64;
    std::size_t cutoff_points = 16;

    void validate() const {
        const std::pair<const char*, std::size_t> counts[] = {{"grid.space_points", space_points},
                                                              {"grid.space_points_2d", space_points_2d},
                                                              {"grid.time_points", time_points},
                                                              {"grid.cutoff_points", cutoff_points}};
        for (const auto& [field, n] : counts)
            if (n < 16) throw ValidationError(field, "must be >= 16");
        if (!(space_extent >= 8.0)) throw ValidationError("grid.space_extent", "must cover >= 8 standard deviations");
    }

    QuadratureRule time_nodes(double t_min, double T) const { return gauss_legendre(time_points, t_min, T); }
    QuadratureRule cutoff_nodes(double t_min) const { return gauss_legendre(cutoff_points, 0.0, t_min); }

    QuadratureGrid doubled() const {
        QuadratureGrid g = *this;
        g.space_points = 2 * space_points - 1;
        g.space_points_2d = 2 * space_points_2d - 1;
        g.time_points *= 2;
        g.cutoff_points *= 2;
        return g;
    }
};

}  // namespace unidistill
