#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "unidistill/autodiff.hpp"
#include "unidistill/error.hpp"
#include "unidistill/rng.hpp"
#include "unidistill/sde.hpp"

namespace unidistill {

struct MixtureComponent {
    double weight = 1.0;
    std::vector<double> mean;
    std::vector<double> diag_cov;
};

// Mixture of axis-aligned Gaussians.
class GaussianMixture {
public:
    GaussianMixture() = default;
    explicit GaussianMixture(std::vector<MixtureComponent> comps) : comps_(std::move(comps)) { validate(); }

    static GaussianMixture normal(double mean, double var) { return GaussianMixture({{1.0, {mean}, {var}}}); }

    // Equal-weight isotropic modes evenly spaced on a circle.
    static GaussianMixture ring(std::size_t modes, double radius, double stddev) {
        std::vector<MixtureComponent> c;
        for (std::size_t k = 0; k < modes; ++k) {
            const double a = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(modes);
            c.push_back({1.0 / static_cast<double>(modes), {radius * std::cos(a), radius * std::sin(a)},
                         {stddev * stddev, stddev * stddev}});
        }
        return GaussianMixture(std::move(c));
    }

    void validate() const {
        if (comps_.empty()) throw ValidationError("teacher.components", "at least one component required");
        const std::size_t d = comps_.front().mean.size();
        if (d < 1) throw ValidationError("teacher.components.mean", "dimension must be >= 1");
        double total = 0.0;
        for (const auto& c : comps_) {
            if (c.mean.size() != d || c.diag_cov.size() != d)
                throw ValidationError("teacher.components.mean", "all components need the same dimension");
            if (!(c.weight > 0.0)) throw ValidationError("teacher.components.weight", "weights must be > 0");
            for (double v : c.diag_cov)
                if (!(v > 0.0)) throw ValidationError("teacher.components.diag_cov", "entries must be > 0");
            for (double m : c.mean)
                if (!std::isfinite(m)) throw ValidationError("teacher.components.mean", "must be finite");
            total += c.weight;
        }
        if (std::abs(total - 1.0) > 1e-12)
            throw ValidationError("teacher.components.weight", "weights sum to " + std::to_string(total) + ", not 1");
    }

    std::size_t dim() const { return comps_.empty() ? 0 : comps_.front().mean.size(); }
    std::size_t size() const { return comps_.size(); }
    const std::vector<MixtureComponent>& components() const { return comps_; }

    // Exact marginal under the forward kernel: N(alpha mu, alpha^2 S + sigma^2 I).
    GaussianMixture diffused(const TransitionParams& tp) const {
        GaussianMixture out = *this;
        for (auto& c : out.comps_)
            for (std::size_t i = 0; i < c.mean.size(); ++i) {
                c.mean[i] *= tp.alpha;
                c.diag_cov[i] = tp.alpha * tp.alpha * c.diag_cov[i] + tp.sigma * tp.sigma;
            }
        return out;
    }
    GaussianMixture diffused(const SdeSchedule& s, double t) const { return diffused(s.transition(t)); }

    // Per-row log-density and score for points stored as rows of x.
    void evaluate(const Eigen::MatrixXd& x, Eigen::VectorXd* logp, Eigen::MatrixXd* score,
                  Eigen::MatrixXd* resp = nullptr) const {
        const auto n = x.rows();
        const auto d = static_cast<Eigen::Index>(dim());
        if (x.cols() != d) throw ShapeError("mixture: point dimension does not match mixture");
        const auto K = static_cast<Eigen::Index>(comps_.size());
        Eigen::MatrixXd lc(n, K);
        for (Eigen::Index k = 0; k < K; ++k) {
            const auto& c = comps_[static_cast<std::size_t>(k)];
            double base = std::log(c.weight);
            for (Eigen::Index j = 0; j < d; ++j) base -= 0.5 * std::log(2.0 * std::numbers::pi * c.diag_cov[j]);
            for (Eigen::Index i = 0; i < n; ++i) {
                double q = 0.0;
                for (Eigen::Index j = 0; j < d; ++j) {
                    const double dx = x(i, j) - c.mean[j];
                    q += dx * dx / c.diag_cov[j];
                }
                lc(i, k) = base - 0.5 * q;
            }
        }
        Eigen::VectorXd lse(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const double m = lc.row(i).maxCoeff();
            lse(i) = m + std::log((lc.row(i).array() - m).exp().sum());
        }
        if (logp) *logp = lse;
        if (!score && !resp) return;
        Eigen::MatrixXd g = (lc.colwise() - lse).array().exp();
        if (score) {
            score->setZero(n, d);
            for (Eigen::Index k = 0; k < K; ++k) {
                const auto& c = comps_[static_cast<std::size_t>(k)];
                for (Eigen::Index j = 0; j < d; ++j)
                    score->col(j).array() -= g.col(k).array() * (x.col(j).array() - c.mean[j]) / c.diag_cov[j];
            }
        }
        if (resp) *resp = std::move(g);
    }

    std::pair<double, std::vector<double>> logdensity_score(std::span<const double> x) const {
        Eigen::MatrixXd m(1, static_cast<Eigen::Index>(x.size()));
        for (std::size_t j = 0; j < x.size(); ++j) m(0, static_cast<Eigen::Index>(j)) = x[j];
        if (!m.allFinite()) throw NumericError("logdensity_score: non-finite point");
        Eigen::VectorXd lp;
        Eigen::MatrixXd s;
        evaluate(m, &lp, &s);
        return {lp(0), std::vector<double>(s.data(), s.data() + s.size())};
    }

    double log_density(std::span<const double> x) const { return logdensity_score(x).first; }

    Eigen::VectorXd log_density(const Eigen::MatrixXd& x) const {
        Eigen::VectorXd lp;
        evaluate(x, &lp, nullptr);
        return lp;
    }

    Eigen::MatrixXd score(const Eigen::MatrixXd& x) const {
        Eigen::MatrixXd s;
        evaluate(x, nullptr, &s);
        return s;
    }

    // Draws n points (rows); component choice and noise come from one stream.
    Eigen::MatrixXd sample(CounterRng& rng, std::size_t n, std::vector<std::size_t>* labels = nullptr) const {
        const auto d = static_cast<Eigen::Index>(dim());
        Eigen::MatrixXd out(static_cast<Eigen::Index>(n), d);
        if (labels) labels->assign(n, 0);
        for (std::size_t i = 0; i < n; ++i) {
            const double u = rng.uniform();
            std::size_t k = 0;
            double acc = comps_[0].weight;
            while (u >= acc && k + 1 < comps_.size()) acc += comps_[++k].weight;
            for (Eigen::Index j = 0; j < d; ++j)
                out(static_cast<Eigen::Index>(i), j) = comps_[k].mean[j] + std::sqrt(comps_[k].diag_cov[j]) * rng.normal();
            if (labels) (*labels)[i] = k;
        }
        return out;
    }

    // Largest per-axis standard deviation over components.
    double max_std() const {
        double s = 0.0;
        for (const auto& c : comps_)
            for (double v : c.diag_cov) s = std::max(s, std::sqrt(v));
        return s;
    }

    // Overall mean and per-axis standard deviation of the mixture.
    std::pair<std::vector<double>, std::vector<double>> moments() const {
        const std::size_t d = dim();
        std::vector<double> mu(d, 0.0), var(d, 0.0);
        for (const auto& c : comps_)
            for (std::size_t j = 0; j < d; ++j) mu[j] += c.weight * c.mean[j];
        for (const auto& c : comps_)
            for (std::size_t j = 0; j < d; ++j) {
                const double dm = c.mean[j] - mu[j];
                var[j] += c.weight * (c.diag_cov[j] + dm * dm);
            }
        for (auto& v : var) v = std::sqrt(v);
        return {mu, var};
    }

private:
    std::vector<MixtureComponent> comps_;
};

namespace ad {

// Score of the diffused mixture at the rows of x, where row i is diffused
// with its own (alpha_i, sigma_i). Differentiable in x through the exact
// Hessian of the log-density.
inline Var mixture_score(const GaussianMixture& q0, Var x, const Vector& alpha, const Vector& sigma) {
    const auto n = x.rows();
    const auto d = x.cols();
    if (d != static_cast<Index>(q0.dim())) throw ShapeError("mixture_score: dimension mismatch");
    if (alpha.size() != n || sigma.size() != n) throw ShapeError("mixture_score: one (alpha, sigma) per row");
    const auto K = static_cast<Index>(q0.size());
    Matrix score = Matrix::Zero(n, d);
    // Per-row responsibilities and component scores, kept for the backward rule.
    Matrix resp(n, K);
    std::vector<Matrix> comp_score(static_cast<std::size_t>(K), Matrix(n, d));
    std::vector<Matrix> comp_var(static_cast<std::size_t>(K), Matrix(n, d));
    const Matrix& xv = x.value();
    for (Index i = 0; i < n; ++i) {
        Eigen::VectorXd lc(K);
        for (Index k = 0; k < K; ++k) {
            const auto& c = q0.components()[static_cast<std::size_t>(k)];
            double l = std::log(c.weight);
            for (Index j = 0; j < d; ++j) {
                const double v = alpha(i) * alpha(i) * c.diag_cov[j] + sigma(i) * sigma(i);
                const double dx = xv(i, j) - alpha(i) * c.mean[j];
                l -= 0.5 * (std::log(2.0 * std::numbers::pi * v) + dx * dx / v);
                comp_var[k](i, j) = v;
                comp_score[k](i, j) = -dx / v;
            }
            lc(k) = l;
        }
        const double m = lc.maxCoeff();
        const double lse = m + std::log((lc.array() - m).exp().sum());
        for (Index k = 0; k < K; ++k) {
            resp(i, k) = std::exp(lc(k) - lse);
            score.row(i) += resp(i, k) * comp_score[k].row(i);
        }
    }
    Matrix sv = score;
    return x.tape->push(std::move(sv), {x}, [x = x.id, resp, comp_score, comp_var, score, K, n, d](Tape& t, std::size_t s) {
        const Matrix& g = t.node(s).grad;
        Matrix gx = Matrix::Zero(n, d);
        // H = sum_k r_k (-diag(1/v_k) + s_k s_k^T) - s s^T, symmetric.
        for (Index k = 0; k < K; ++k) {
            const Matrix& sk = comp_score[k];
            const Eigen::VectorXd dot = sk.cwiseProduct(g).rowwise().sum();
            for (Index j = 0; j < d; ++j)
                gx.col(j).array() += resp.col(k).array() *
                                     (-g.col(j).array() / comp_var[k].col(j).array() + sk.col(j).array() * dot.array());
        }
        const Eigen::VectorXd dot = score.cwiseProduct(g).rowwise().sum();
        for (Index j = 0; j < d; ++j) gx.col(j).array() -= score.col(j).array() * dot.array();
        t.accumulate(x, gx);
    });
}

// Log-density of the diffused mixture, differentiable in x (gradient = score).
inline Var mixture_logpdf(const GaussianMixture& q0, Var x, const Vector& alpha, const Vector& sigma) {
    const auto n = x.rows();
    const auto d = x.cols();
    Matrix lp(n, 1), sc(n, d);
    for (Index i = 0; i < n; ++i) {
        const auto mix = q0.diffused(TransitionParams{alpha(i), sigma(i)});
        Eigen::VectorXd l;
        Eigen::MatrixXd s;
        mix.evaluate(x.value().row(i), &l, &s);
        lp(i, 0) = l(0);
        sc.row(i) = s.row(0);
    }
    return x.tape->push(std::move(lp), {x}, [x = x.id, sc](Tape& t, std::size_t s) {
        Matrix g = sc.array().colwise() * t.node(s).grad.col(0).array();
        t.accumulate(x, g);
    });
}

}  // namespace ad

}  // namespace unidistill
