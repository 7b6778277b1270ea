#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "unidistill/error.hpp"
#include "unidistill/gmm.hpp"
#include "unidistill/rng.hpp"

namespace unidistill {

struct ModeCoverageReport {
    std::vector<double> per_mode_fraction;
    int covered_count = 0;
    double capture_radius_sigmas = 3.0;
};

// A sample is captured by its nearest mode (distance in units of that
// component's standard deviations) when that distance is within the radius.
inline ModeCoverageReport mode_coverage(const Eigen::MatrixXd& samples, const GaussianMixture& teacher,
                                        double radius_sigmas = 3.0, double threshold = 0.01) {
    if (samples.rows() == 0) throw ContractError("mode_coverage: empty sample set");
    if (samples.cols() != static_cast<Eigen::Index>(teacher.dim())) throw ShapeError("mode_coverage: dimension mismatch");
    const auto& comps = teacher.components();
    const double reach = 2.0 * radius_sigmas * teacher.max_std();
    for (std::size_t a = 0; a < comps.size(); ++a)
        for (std::size_t b = a + 1; b < comps.size(); ++b) {
            double d2 = 0.0;
            for (std::size_t j = 0; j < teacher.dim(); ++j) d2 += std::pow(comps[a].mean[j] - comps[b].mean[j], 2);
            if (!(std::sqrt(d2) > reach))
                throw ContractError("mode_coverage: modes " + std::to_string(a) + " and " + std::to_string(b) +
                                    " are not separated by more than 2 capture radii");
        }
    ModeCoverageReport rep;
    rep.capture_radius_sigmas = radius_sigmas;
    std::vector<std::size_t> counts(comps.size(), 0);
    for (Eigen::Index i = 0; i < samples.rows(); ++i) {
        double best = radius_sigmas;
        std::size_t who = comps.size();
        for (std::size_t k = 0; k < comps.size(); ++k) {
            double d2 = 0.0;
            for (std::size_t j = 0; j < teacher.dim(); ++j)
                d2 += std::pow(samples(i, static_cast<Eigen::Index>(j)) - comps[k].mean[j], 2) / comps[k].diag_cov[j];
            const double d = std::sqrt(d2);
            if (d <= best) {
                best = d;
                who = k;
            }
        }
        if (who < comps.size()) ++counts[who];
    }
    for (std::size_t k = 0; k < comps.size(); ++k) {
        const double f = static_cast<double>(counts[k]) / static_cast<double>(samples.rows());
        rep.per_mode_fraction.push_back(f);
        if (f >= threshold) ++rep.covered_count;
    }
    return rep;
}

// 2-Wasserstein distance between two 1-D empirical measures via their
// quantile functions; sizes may differ.
inline double wasserstein_1d(std::vector<double> a, std::vector<double> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    std::size_t i = 0, j = 0;
    double u = 0.0, total = 0.0;
    while (i < a.size() && j < b.size()) {
        const double ua = static_cast<double>(i + 1) / na, ub = static_cast<double>(j + 1) / nb;
        const double next = std::min(ua, ub);
        const double d = a[i] - b[j];
        total += (next - u) * d * d;
        u = next;
        if (ua <= next) ++i;
        if (ub <= next) ++j;
    }
    return std::sqrt(std::max(total, 0.0));
}

inline double sliced_wasserstein(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, std::size_t n_projections = 128,
                                 std::uint64_t seed = 0) {
    if (a.cols() != b.cols()) throw ShapeError("sliced_wasserstein: dimension mismatch");
    if (a.rows() < 2 || b.rows() < 2) throw ContractError("sliced_wasserstein: need at least two points per set");
    if (n_projections < 1) throw ContractError("sliced_wasserstein: need at least one projection");
    CounterRng rng(seed, "sliced_wasserstein");
    const auto d = a.cols();
    double total = 0.0;
    for (std::size_t p = 0; p < n_projections; ++p) {
        Eigen::VectorXd dir(d);
        do {
            for (Eigen::Index j = 0; j < d; ++j) dir(j) = rng.normal();
        } while (dir.norm() < 1e-12);
        dir.normalize();
        const Eigen::VectorXd pa = a * dir, pb = b * dir;
        total += wasserstein_1d({pa.data(), pa.data() + pa.size()}, {pb.data(), pb.data() + pb.size()});
    }
    return total / static_cast<double>(n_projections);
}

// KL(hist(a) || hist(b)) on a shared grid, add-one smoothed.
inline double histogram_kl(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, std::size_t bins = 100) {
    if (a.cols() != b.cols()) throw ShapeError("histogram_kl: dimension mismatch");
    const auto d = a.cols();
    if (d < 1 || d > 2) throw ContractError("histogram_kl: supports 1-D or 2-D samples");
    if (a.rows() == 0 || b.rows() == 0 || bins < 1) throw ContractError("histogram_kl: empty input");
    std::vector<double> lo(d), hi(d);
    for (Eigen::Index j = 0; j < d; ++j) {
        lo[j] = std::min(a.col(j).minCoeff(), b.col(j).minCoeff());
        hi[j] = std::max(a.col(j).maxCoeff(), b.col(j).maxCoeff());
        if (hi[j] <= lo[j]) hi[j] = lo[j] + 1.0;
    }
    const std::size_t cells = d == 1 ? bins : bins * bins;
    auto histogram = [&](const Eigen::MatrixXd& x) {
        std::vector<double> h(cells, 1.0);
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            std::size_t idx = 0;
            for (Eigen::Index j = 0; j < d; ++j) {
                const double u = (x(i, j) - lo[j]) / (hi[j] - lo[j]);
                const auto k = std::min(bins - 1, static_cast<std::size_t>(std::max(0.0, u) * static_cast<double>(bins)));
                idx = idx * bins + k;
            }
            h[idx] += 1.0;
        }
        const double n = static_cast<double>(x.rows() + static_cast<Eigen::Index>(cells));
        for (auto& v : h) v /= n;
        return h;
    };
    const auto ha = histogram(a), hb = histogram(b);
    double kl = 0.0;
    for (std::size_t c = 0; c < cells; ++c) kl += ha[c] * std::log(ha[c] / hb[c]);
    return std::max(kl, 0.0);
}

}  // namespace unidistill
