#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "unidistill/adam.hpp"
#include "unidistill/autodiff.hpp"
#include "unidistill/error.hpp"
#include "unidistill/fdivergence.hpp"
#include "unidistill/gmm.hpp"
#include "unidistill/metrics.hpp"
#include "unidistill/nn.hpp"
#include "unidistill/rng.hpp"
#include "unidistill/sde.hpp"
#include "unidistill/surrogate.hpp"

namespace unidistill {

enum class DsmWeight { Sigma2, One };
enum class TimeSampler { Uniform, LogNormal };
enum class RatioSource { Discriminator, Analytic };
enum class FakeScoreSource { Network, Analytic };
enum class GeneratorKind { Mlp, Affine, MixtureAffine };

struct TrainConfig {
    DivergenceKind divergence = DivergenceKind::RKL;
    std::optional<DivergenceKind> stage2_divergence;
    std::size_t stage2_step = 0;
    double gan_weight = 0.0;
    DsmWeight dsm_weight = DsmWeight::Sigma2;
    TimeSampler time_sampler = TimeSampler::Uniform;
    double lognormal_mean = -1.2;  // of log t
    double lognormal_std = 1.2;
    std::size_t batch_size = 256;
    std::size_t steps = 20000;
    std::size_t n_discriminator = 1;
    std::size_t n_fake_score = 2;
    std::size_t n_generator = 1;
    std::uint64_t seed = 0;
    RatioSource ratio_source = RatioSource::Discriminator;
    FakeScoreSource fake_score_source = FakeScoreSource::Network;
    bool c_normalize = false;
    bool c1_x_gradient = true;
    bool clean_discriminator = false;
    double ratio_lo = 1e-4;
    double ratio_hi = 1e4;
    double lr_generator = 1e-3;
    double lr_fake_score = 1e-3;
    double lr_discriminator = 1e-3;
    bool cosine_decay = false;  // anneal all learning rates to lr_floor times their base value
    double lr_floor = 0.05;
    std::size_t eval_interval = 1000;
    std::size_t n_eval = 10000;
    std::size_t sw_projections = 128;
    GeneratorKind generator = GeneratorKind::Mlp;
    std::size_t latent_dim = 0;  // 0 means the data dimension
    std::vector<std::size_t> generator_hidden{64, 64};
    std::vector<std::size_t> fake_score_hidden{128, 128};
    std::vector<std::size_t> discriminator_hidden{128, 128};
    std::size_t time_frequencies = 8;
    std::size_t mixture_components = 0;  // 0 means as many as the teacher
    bool init_from_teacher = false;      // affine / mixture generators start as the teacher sampler

    void validate() const {
        if (!(lr_floor >= 0.0 && lr_floor <= 1.0)) throw ValidationError("train.lr_floor", "must be in [0, 1]");
        if (batch_size < 2) throw ValidationError("train.batch_size", "must be >= 2");
        if (!(gan_weight >= 0.0)) throw ValidationError("train.gan_weight", "must be >= 0");
        if (!(ratio_lo > 0.0 && ratio_hi > ratio_lo)) throw ValidationError("train.ratio_clamp", "need 0 < lo < hi");
        if (!(lr_generator > 0.0 && lr_fake_score > 0.0 && lr_discriminator > 0.0))
            throw ValidationError("train.learning_rate", "must be > 0");
        if (eval_interval < 1) throw ValidationError("train.eval_interval", "must be >= 1");
        if (n_eval < 2) throw ValidationError("train.n_eval", "must be >= 2");
        if (sw_projections < 1) throw ValidationError("train.sw_projections", "must be >= 1");
        if (n_generator < 1) throw ValidationError("train.updates", "need at least one generator update per step");
        if (!(lognormal_std > 0.0)) throw ValidationError("train.lognormal_std", "must be > 0");
        if (generator == GeneratorKind::Mlp &&
            (ratio_source == RatioSource::Analytic || fake_score_source == FakeScoreSource::Analytic))
            throw ValidationError("train.generator", "analytic ratio or fake score needs an affine or mixture_affine generator");
        if (generator != GeneratorKind::Mlp && latent_dim != 0)
            throw ValidationError("train.latent_dim", "affine generators use the data dimension");
        for (auto h : generator_hidden)
            if (h < 1) throw ValidationError("train.generator_hidden", "must be >= 1");
    }
};

struct LossBreakdown {
    double l_sim = 0.0;
    double l_di = 0.0;
    double l_gan = 0.0;
    double l_dsm = 0.0;
    double l_disc = 0.0;
    double ratio_min = 1.0;
    double ratio_median = 1.0;
    double ratio_max = 1.0;
    std::size_t clamped = 0;
};

struct MetricRow {
    std::size_t iteration = 0;
    LossBreakdown losses;
    double sw_distance = 0.0;
    double modes_covered = std::numeric_limits<double>::quiet_NaN();
};

struct GeneratorBatch {
    ad::Matrix z;                        // latent draws, n x latent
    std::vector<std::size_t> component;  // mixture component per row
    std::vector<double> t;
    Eigen::VectorXd time_weight;  // importance weight of each t, already divided by n
    ad::Matrix eps;               // forward noise, n x d
    std::size_t size() const { return t.size(); }
};

struct TrainerState {
    ParamStore generator, fake_score, discriminator;
    AdamState adam_generator, adam_fake_score, adam_discriminator;
    std::size_t iteration = 0;
    CounterRng latent_rng, time_rng, noise_rng, teacher_rng;
};

struct TrainResult {
    TrainerState state;
    std::vector<MetricRow> series;
    Eigen::MatrixXd samples;
    std::string error;  // non-empty when training aborted
    std::size_t clamp_events = 0;
    std::vector<std::string> warnings;
};

struct GeneratorGradients {
    std::vector<double> generator, fake_score, discriminator;
    LossBreakdown parts;
};

// Denoising score matching: mean over rows of lambda(t) |s(x_t, t) - cond|^2
// with x_t = alpha x0 + sigma eps. `score` maps (x_t, t, sigma) to a score.
using ScoreFn = std::function<ad::Var(ad::Var, const std::vector<double>&, const Eigen::VectorXd&)>;

inline ad::Var dsm_loss(ad::Tape& tape, const ScoreFn& score, const ad::Matrix& x0, const std::vector<double>& t,
                        const ad::Matrix& eps, const SdeSchedule& s, DsmWeight weight) {
    const auto n = x0.rows();
    if (eps.rows() != n || eps.cols() != x0.cols() || static_cast<ad::Index>(t.size()) != n)
        throw ShapeError("dsm_loss: batch shapes differ");
    Eigen::VectorXd alpha(n), sigma(n), lambda(n);
    for (ad::Index i = 0; i < n; ++i) {
        if (!(t[i] > 0.0)) throw DomainError("dsm_loss: t must be > 0");
        const auto tp = s.transition(t[i]);
        alpha(i) = tp.alpha;
        sigma(i) = tp.sigma;
        lambda(i) = (weight == DsmWeight::Sigma2 ? tp.sigma * tp.sigma : 1.0) / static_cast<double>(n);
    }
    const ad::Matrix xt = (x0.array().colwise() * alpha.array()).matrix() + (eps.array().colwise() * sigma.array()).matrix();
    const ad::Matrix cond = -(eps.array().colwise() / sigma.array()).matrix();
    ad::Var diff = ad::sub(score(tape.constant(xt), t, sigma), tape.constant(cond));
    return ad::weighted_sum(ad::row_sum(ad::square(diff)), lambda);
}

inline double discriminator_ratio(double logit, double lo, double hi) { return std::clamp(std::exp(logit), lo, hi); }

inline double median_of(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
    std::nth_element(v.begin(), mid, v.end());
    return *mid;
}

class Distiller {
public:
    Distiller(GaussianMixture teacher, SdeSchedule schedule, TrainConfig cfg)
        : teacher_(std::move(teacher)), schedule_(schedule), cfg_(std::move(cfg)) {
        schedule_.validate();
        cfg_.validate();
        dim_ = teacher_.dim();
        latent_ = cfg_.latent_dim ? cfg_.latent_dim : dim_;
        const std::size_t emb = cfg_.time_frequencies;
        gen_spec_ = MlpSpec{latent_, cfg_.generator_hidden, dim_, Activation::Tanh, TimeEmbedding::None};
        fake_spec_ = MlpSpec{dim_, cfg_.fake_score_hidden, dim_, Activation::Tanh, TimeEmbedding::Sinusoidal, emb};
        disc_spec_ = MlpSpec{dim_, cfg_.discriminator_hidden, 1, Activation::SmoothRectifier, TimeEmbedding::Sinusoidal, emb};
        const std::size_t K = cfg_.mixture_components ? cfg_.mixture_components : teacher_.size();
        if (cfg_.generator == GeneratorKind::MixtureAffine) {
            if (cfg_.init_from_teacher) {
                if (K != teacher_.size())
                    throw ValidationError("train.mixture_components", "teacher initialisation needs the teacher's component count");
                for (const auto& c : teacher_.components()) mix_weights_.push_back(c.weight);
            } else {
                mix_weights_.assign(K, 1.0 / static_cast<double>(K));
            }
        }
        state_ = initial_state();
    }

    const TrainConfig& config() const { return cfg_; }
    const GaussianMixture& teacher() const { return teacher_; }
    const SdeSchedule& schedule() const { return schedule_; }
    TrainerState& state() { return state_; }
    const TrainerState& state() const { return state_; }
    const MlpSpec& fake_score_spec() const { return fake_spec_; }
    const MlpSpec& discriminator_spec() const { return disc_spec_; }
    std::size_t dim() const { return dim_; }
    std::size_t latent_dim() const { return latent_; }

    TrainerState initial_state() const {
        const std::uint64_t seed = cfg_.seed;
        TrainerState st{ParamStore{}, ParamStore{}, ParamStore{}, AdamState{}, AdamState{}, AdamState{}, 0,
                        CounterRng(seed, "latent"), CounterRng(seed, "time"), CounterRng(seed, "noise"),
                        CounterRng(seed, "teacher")};
        CounterRng gen_init(seed, "generator.init");
        switch (cfg_.generator) {
            case GeneratorKind::Mlp: st.generator = init_mlp(gen_spec_, gen_init); break;
            case GeneratorKind::Affine: {
                st.generator.add_segment("scale", 1, dim_, 1.0);
                st.generator.add_segment("shift", 1, dim_, 0.0);
                if (cfg_.init_from_teacher) {
                    if (teacher_.size() != 1)
                        throw ValidationError("train.init_from_teacher", "affine generator needs a single-component teacher");
                    const auto& c = teacher_.components().front();
                    for (std::size_t j = 0; j < dim_; ++j) {
                        st.generator.segment_values("scale")[j] = std::sqrt(c.diag_cov[j]);
                        st.generator.segment_values("shift")[j] = c.mean[j];
                    }
                }
                break;
            }
            case GeneratorKind::MixtureAffine: {
                const std::size_t K = mix_weights_.size();
                st.generator.add_segment("means", K, dim_);
                st.generator.add_segment("scales", K, dim_, 1.0);
                auto means = st.generator.segment_values("means");
                auto scales = st.generator.segment_values("scales");
                for (std::size_t k = 0; k < K; ++k)
                    for (std::size_t j = 0; j < dim_; ++j) {
                        if (cfg_.init_from_teacher) {
                            means[k * dim_ + j] = teacher_.components()[k].mean[j];
                            scales[k * dim_ + j] = std::sqrt(teacher_.components()[k].diag_cov[j]);
                        } else {
                            means[k * dim_ + j] = gen_init.normal();
                        }
                    }
                break;
            }
        }
        CounterRng fake_init(seed, "fake_score.init"), disc_init(seed, "discriminator.init");
        st.fake_score = init_mlp(fake_spec_, fake_init, 0.1);
        st.discriminator = init_mlp(disc_spec_, disc_init, 0.1);
        st.adam_generator = AdamState::for_params(st.generator, cfg_.lr_generator);
        st.adam_fake_score = AdamState::for_params(st.fake_score, cfg_.lr_fake_score);
        st.adam_discriminator = AdamState::for_params(st.discriminator, cfg_.lr_discriminator);
        return st;
    }

    // Times in [t_min, T] with their importance weights 1/density.
    std::pair<std::vector<double>, Eigen::VectorXd> sample_times(CounterRng& rng, std::size_t n) const {
        std::vector<double> t(n);
        Eigen::VectorXd w(static_cast<Eigen::Index>(n));
        const double lo = schedule_.t_min, hi = schedule_.horizon_T;
        if (cfg_.time_sampler == TimeSampler::Uniform) {
            for (std::size_t i = 0; i < n; ++i) {
                t[i] = rng.uniform(lo, hi);
                w(static_cast<Eigen::Index>(i)) = hi - lo;
            }
            return {t, w};
        }
        const double mu = cfg_.lognormal_mean, sd = cfg_.lognormal_std;
        auto cdf = [](double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); };
        const double mass = cdf((std::log(hi) - mu) / sd) - cdf((std::log(lo) - mu) / sd);
        for (std::size_t i = 0; i < n; ++i) {
            double ti;
            do ti = std::exp(mu + sd * rng.normal());
            while (ti < lo || ti > hi);
            const double zt = (std::log(ti) - mu) / sd;
            const double pdf = std::exp(-0.5 * zt * zt) / (std::sqrt(2.0 * std::numbers::pi) * sd * ti * mass);
            t[i] = ti;
            w(static_cast<Eigen::Index>(i)) = 1.0 / pdf;
        }
        return {t, w};
    }

    GeneratorBatch sample_generator_batch(std::size_t n) {
        GeneratorBatch b;
        b.z.resize(static_cast<ad::Index>(n), static_cast<ad::Index>(latent_));
        b.component.assign(n, 0);
        for (std::size_t i = 0; i < n; ++i) {
            if (!mix_weights_.empty()) {
                const double u = state_.latent_rng.uniform();
                double acc = 0.0;
                std::size_t k = 0;
                for (; k + 1 < mix_weights_.size(); ++k) {
                    acc += mix_weights_[k];
                    if (u < acc) break;
                }
                b.component[i] = k;
            }
            for (std::size_t j = 0; j < latent_; ++j)
                b.z(static_cast<ad::Index>(i), static_cast<ad::Index>(j)) = state_.latent_rng.normal();
        }
        auto [t, w] = sample_times(state_.time_rng, n);
        b.t = std::move(t);
        b.time_weight = w / static_cast<double>(n);
        b.eps.resize(static_cast<ad::Index>(n), static_cast<ad::Index>(dim_));
        for (ad::Index i = 0; i < b.eps.size(); ++i) b.eps(i) = state_.noise_rng.normal();
        return b;
    }

    ad::Var generator_forward(ad::Tape& tape, const BoundParams& p, const ad::Matrix& z,
                              const std::vector<std::size_t>& component) const {
        const auto n = z.rows();
        switch (cfg_.generator) {
            case GeneratorKind::Mlp: return forward_mlp(gen_spec_, p, tape.constant(z));
            case GeneratorKind::Affine: {
                ad::Var ones = tape.constant(ad::Matrix::Ones(n, 1));
                return ad::add(ad::mul(tape.constant(z), ad::matmul(ones, p["scale"])), ad::matmul(ones, p["shift"]));
            }
            case GeneratorKind::MixtureAffine: {
                ad::Matrix onehot = ad::Matrix::Zero(n, static_cast<ad::Index>(mix_weights_.size()));
                for (ad::Index i = 0; i < n; ++i) onehot(i, static_cast<ad::Index>(component[i])) = 1.0;
                ad::Var O = tape.constant(onehot);
                return ad::add(ad::matmul(O, p["means"]), ad::mul(tape.constant(z), ad::matmul(O, p["scales"])));
            }
        }
        throw ContractError("generator_forward: unknown generator kind");
    }

    // Clean-sample distribution of an affine or mixture generator.
    GaussianMixture generator_marginal(const ParamStore& p) const {
        std::vector<MixtureComponent> comps;
        if (cfg_.generator == GeneratorKind::Affine) {
            MixtureComponent c{1.0, {}, {}};
            for (std::size_t j = 0; j < dim_; ++j) {
                c.mean.push_back(p.segment_values("shift")[j]);
                c.diag_cov.push_back(std::pow(p.segment_values("scale")[j], 2));
            }
            comps.push_back(std::move(c));
        } else if (cfg_.generator == GeneratorKind::MixtureAffine) {
            const auto means = p.segment_values("means"), scales = p.segment_values("scales");
            for (std::size_t k = 0; k < mix_weights_.size(); ++k) {
                MixtureComponent c{mix_weights_[k], {}, {}};
                for (std::size_t j = 0; j < dim_; ++j) {
                    c.mean.push_back(means[k * dim_ + j]);
                    c.diag_cov.push_back(std::pow(scales[k * dim_ + j], 2));
                }
                comps.push_back(std::move(c));
            }
        } else {
            throw ContractError("generator_marginal: the MLP generator has no closed-form marginal");
        }
        for (auto& c : comps)
            for (double v : c.diag_cov)
                if (!(v > 0.0)) throw NumericError("generator_marginal: degenerate generator scale");
        // Renormalise against rounding in the stored weights.
        double tot = 0.0;
        for (const auto& c : comps) tot += c.weight;
        for (auto& c : comps) c.weight /= tot;
        return GaussianMixture(std::move(comps));
    }

    ad::Var fake_score(ad::Tape& tape, const BoundParams& p, ad::Var xt, const std::vector<double>& t,
                       const Eigen::VectorXd& sigma) const {
        (void)tape;
        ad::Var eps_hat = forward_mlp(fake_spec_, p, xt, std::span<const double>(t));
        return ad::mul_col(eps_hat, xt.tape->constant((-sigma.array().inverse()).matrix()));
    }

    ad::Var discriminator_logit(const BoundParams& p, ad::Var x, const std::vector<double>& t) const {
        return forward_mlp(disc_spec_, p, x, std::span<const double>(t));
    }

    // Generator loss on one batch with frozen fake score and discriminator.
    struct GeneratorLoss {
        ad::Var total;
        LossBreakdown parts;
    };

    GeneratorLoss generator_loss(ad::Tape& tape, const BoundParams& gen, const BoundParams& fake,
                                 const BoundParams& disc, const GeneratorBatch& b, DivergenceKind kind,
                                 const std::optional<GaussianMixture>& marginal) const {
        const auto n = static_cast<ad::Index>(b.size());
        Eigen::VectorXd alpha(n), sigma(n), weight(n);
        for (ad::Index i = 0; i < n; ++i) {
            const auto tp = schedule_.transition(b.t[i]);
            alpha(i) = tp.alpha;
            sigma(i) = tp.sigma;
            weight(i) = -0.5 * schedule_.g2(b.t[i]) * b.time_weight(i);
        }
        ad::Var x0 = generator_forward(tape, gen, b.z, b.component);
        ad::Var xt = ad::add(ad::mul_col(x0, tape.constant(alpha)),
                             tape.constant((b.eps.array().colwise() * sigma.array()).matrix()));
        const ad::Matrix cond = -(b.eps.array().colwise() / sigma.array()).matrix();
        ad::Var s_q = ad::mixture_score(teacher_, xt, alpha, sigma);
        ad::Var s_p = cfg_.fake_score_source == FakeScoreSource::Analytic
                          ? ad::mixture_score(*marginal, xt, alpha, sigma)
                          : fake_score(tape, fake, xt, b.t, sigma);

        const bool needs_disc = cfg_.ratio_source == RatioSource::Discriminator || cfg_.gan_weight > 0.0;
        std::optional<ad::Var> logit_t;
        if (needs_disc) {
            if (cfg_.clean_discriminator)
                logit_t = discriminator_logit(disc, x0, std::vector<double>(b.size(), 0.0));
            else
                logit_t = discriminator_logit(disc, xt, b.t);
        }
        ad::Var log_ratio = cfg_.ratio_source == RatioSource::Analytic
                                ? ad::sub(ad::mixture_logpdf(teacher_, xt, alpha, sigma),
                                          ad::mixture_logpdf(*marginal, xt, alpha, sigma))
                                : *logit_t;
        if (!cfg_.c1_x_gradient) log_ratio = ad::detach(log_ratio);

        SurrogateOptions opt{cfg_.ratio_lo, cfg_.ratio_hi, cfg_.c_normalize, cfg_.c1_x_gradient};
        const auto terms = uni_instruct_terms(kind, xt, s_q, s_p, cond, log_ratio, opt);
        ad::Var sim = ad::weighted_sum(terms.sim, weight);
        ad::Var di = ad::weighted_sum(terms.di, weight);
        ad::Var total = ad::add(sim, di);
        LossBreakdown parts;
        parts.l_sim = sim.scalar();
        parts.l_di = di.scalar();
        if (cfg_.gan_weight > 0.0) {
            ad::Var gan = ad::mean(ad::softplus(ad::scale(*logit_t, -1.0)));
            parts.l_gan = gan.scalar();
            total = ad::add(total, ad::scale(gan, cfg_.gan_weight));
        }
        std::vector<double> r(terms.ratio.data(), terms.ratio.data() + terms.ratio.size());
        parts.ratio_min = *std::min_element(r.begin(), r.end());
        parts.ratio_max = *std::max_element(r.begin(), r.end());
        parts.ratio_median = median_of(r);
        parts.clamped = terms.clamped;
        if (!std::isfinite(total.scalar())) throw NumericError("generator loss is not finite");
        return {total, parts};
    }

    std::optional<GaussianMixture> frozen_marginal() const {
        if (cfg_.ratio_source == RatioSource::Analytic || cfg_.fake_score_source == FakeScoreSource::Analytic)
            return generator_marginal(state_.generator);
        return std::nullopt;
    }

    GeneratorGradients generator_gradients(const GeneratorBatch& b, std::optional<DivergenceKind> kind = std::nullopt) const {
        ad::Tape tape;
        const ParamStore fake = state_.fake_score.frozen_snapshot(), disc = state_.discriminator.frozen_snapshot();
        BoundParams gen(tape, state_.generator), bf(tape, fake), bd(tape, disc);
        const auto loss = generator_loss(tape, gen, bf, bd, b, kind.value_or(cfg_.divergence), frozen_marginal());
        tape.backward(loss.total);
        return {gen.gradient(), bf.gradient(), bd.gradient(), loss.parts};
    }

    LossBreakdown generator_step(DivergenceKind kind) {
        const auto b = sample_generator_batch(cfg_.batch_size);
        auto g = generator_gradients(b, kind);
        adam_step(state_.generator, g.generator, state_.adam_generator);
        return g.parts;
    }

    // Clean generator samples, detached.
    ad::Matrix sample_generator(CounterRng& rng, std::size_t n) const {
        GeneratorBatch b;
        b.z.resize(static_cast<ad::Index>(n), static_cast<ad::Index>(latent_));
        b.component.assign(n, 0);
        for (std::size_t i = 0; i < n; ++i) {
            if (!mix_weights_.empty()) {
                const double u = rng.uniform();
                double acc = 0.0;
                std::size_t k = 0;
                for (; k + 1 < mix_weights_.size(); ++k) {
                    acc += mix_weights_[k];
                    if (u < acc) break;
                }
                b.component[i] = k;
            }
            for (std::size_t j = 0; j < latent_; ++j) b.z(static_cast<ad::Index>(i), static_cast<ad::Index>(j)) = rng.normal();
        }
        ad::Tape tape;
        BoundParams p(tape, state_.generator.frozen_snapshot());
        return generator_forward(tape, p, b.z, b.component).value();
    }

    double fake_score_step() {
        const auto n = cfg_.batch_size;
        const ad::Matrix x0 = sample_generator(state_.latent_rng, n);
        auto [t, w] = sample_times(state_.time_rng, n);
        ad::Matrix eps(static_cast<ad::Index>(n), static_cast<ad::Index>(dim_));
        for (ad::Index i = 0; i < eps.size(); ++i) eps(i) = state_.noise_rng.normal();
        ad::Tape tape;
        BoundParams p(tape, state_.fake_score);
        const ScoreFn score = [&](ad::Var xt, const std::vector<double>& tt, const Eigen::VectorXd& sigma) {
            return fake_score(tape, p, xt, tt, sigma);
        };
        ad::Var loss = dsm_loss(tape, score, x0, t, eps, schedule_, cfg_.dsm_weight);
        if (!std::isfinite(loss.scalar())) throw NumericError("denoising score matching loss is not finite");
        tape.backward(loss);
        adam_step(state_.fake_score, p.gradient(), state_.adam_fake_score);
        return loss.scalar();
    }

    double discriminator_loss_value(ad::Tape& tape, const BoundParams& p, const ad::Matrix& real, const ad::Matrix& fake,
                                    const std::vector<double>& t, ad::Var* out) const {
        ad::Var lr = discriminator_logit(p, tape.constant(real), t);
        ad::Var lf = discriminator_logit(p, tape.constant(fake), t);
        ad::Var loss = ad::add(ad::mean(ad::softplus(ad::scale(lr, -1.0))), ad::mean(ad::softplus(lf)));
        if (out) *out = loss;
        return loss.scalar();
    }

    double discriminator_step() {
        const auto n = cfg_.batch_size;
        ad::Matrix real = teacher_.sample(state_.teacher_rng, n);
        ad::Matrix fake = sample_generator(state_.latent_rng, n);
        std::vector<double> t(n, 0.0);
        if (!cfg_.clean_discriminator) {
            t = sample_times(state_.time_rng, n).first;
            for (std::size_t i = 0; i < n; ++i) {
                const auto tp = schedule_.transition(t[i]);
                for (std::size_t j = 0; j < dim_; ++j) {
                    const auto ii = static_cast<ad::Index>(i), jj = static_cast<ad::Index>(j);
                    real(ii, jj) = tp.alpha * real(ii, jj) + tp.sigma * state_.noise_rng.normal();
                    fake(ii, jj) = tp.alpha * fake(ii, jj) + tp.sigma * state_.noise_rng.normal();
                }
            }
        }
        ad::Tape tape;
        BoundParams p(tape, state_.discriminator);
        ad::Var loss;
        const double v = discriminator_loss_value(tape, p, real, fake, t, &loss);
        if (!std::isfinite(v)) throw NumericError("discriminator loss is not finite");
        tape.backward(loss);
        adam_step(state_.discriminator, p.gradient(), state_.adam_discriminator);
        return v;
    }

    MetricRow evaluate(const LossBreakdown& last) const {
        MetricRow row;
        row.iteration = state_.iteration;
        row.losses = last;
        CounterRng eval_rng(cfg_.seed, "eval"), teacher_rng(cfg_.seed, "eval.teacher");
        const ad::Matrix gen = sample_generator(eval_rng, cfg_.n_eval);
        const ad::Matrix ref = teacher_.sample(teacher_rng, cfg_.n_eval);
        row.sw_distance = sliced_wasserstein(gen, ref, cfg_.sw_projections, cfg_.seed);
        try {
            row.modes_covered = mode_coverage(gen, teacher_).covered_count;
        } catch (const ContractError&) {
            // teacher modes overlap; coverage is undefined
        }
        return row;
    }

    DivergenceKind divergence_at(std::size_t iteration) const {
        if (cfg_.stage2_divergence && iteration >= cfg_.stage2_step) return *cfg_.stage2_divergence;
        return cfg_.divergence;
    }

    // One outer iteration in the order discriminator, fake score, generator.
    double lr_factor(std::size_t iteration) const {
        if (!cfg_.cosine_decay || cfg_.steps == 0) return 1.0;
        const double u = std::min(1.0, static_cast<double>(iteration) / static_cast<double>(cfg_.steps));
        return cfg_.lr_floor + (1.0 - cfg_.lr_floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * u));
    }

    LossBreakdown step() {
        LossBreakdown parts;
        const double f = lr_factor(state_.iteration);
        state_.adam_generator.learning_rate = cfg_.lr_generator * f;
        state_.adam_fake_score.learning_rate = cfg_.lr_fake_score * f;
        state_.adam_discriminator.learning_rate = cfg_.lr_discriminator * f;
        const bool disc_used = cfg_.ratio_source == RatioSource::Discriminator || cfg_.gan_weight > 0.0;
        if (disc_used)
            for (std::size_t i = 0; i < cfg_.n_discriminator; ++i) parts.l_disc = discriminator_step();
        if (cfg_.fake_score_source == FakeScoreSource::Network)
            for (std::size_t i = 0; i < cfg_.n_fake_score; ++i) parts.l_dsm = fake_score_step();
        const auto kind = divergence_at(state_.iteration);
        for (std::size_t i = 0; i < cfg_.n_generator; ++i) {
            const auto g = generator_step(kind);
            parts.l_sim = g.l_sim;
            parts.l_di = g.l_di;
            parts.l_gan = g.l_gan;
            parts.ratio_min = g.ratio_min;
            parts.ratio_median = g.ratio_median;
            parts.ratio_max = g.ratio_max;
            parts.clamped += g.clamped;
        }
        state_.iteration += 1;
        return parts;
    }

    TrainResult train(const std::function<void(const MetricRow&)>& on_eval = {}) {
        TrainResult res;
        res.state = state_;
        for (std::size_t it = 0; it < cfg_.steps; ++it) {
            TrainerState last_good = state_;
            LossBreakdown parts;
            try {
                parts = step();
            } catch (const NumericError& e) {
                state_ = std::move(last_good);
                res.error = "iteration " + std::to_string(it) + ": " + e.what();
                break;
            }
            res.clamp_events += parts.clamped;
            if (state_.iteration % cfg_.eval_interval == 0 || state_.iteration == cfg_.steps) {
                res.series.push_back(evaluate(parts));
                if (on_eval) on_eval(res.series.back());
            }
        }
        res.state = state_;
        CounterRng final_rng(cfg_.seed, "final.samples");
        res.samples = sample_generator(final_rng, cfg_.n_eval);
        if (res.clamp_events > 0)
            res.warnings.push_back("density ratio clamped " + std::to_string(res.clamp_events) + " times");
        if (!res.error.empty()) res.warnings.push_back("training aborted at " + res.error);
        return res;
    }

private:
    GaussianMixture teacher_;
    SdeSchedule schedule_;
    TrainConfig cfg_;
    std::size_t dim_ = 1, latent_ = 1;
    MlpSpec gen_spec_, fake_spec_, disc_spec_;
    std::vector<double> mix_weights_;
    TrainerState state_;
};

// Fits a time-conditioned discriminator between q and p diffused to a fixed
// t and returns its parameters; exp(logit) estimates q_t/p_t.
struct RatioFit {
    ParamStore params;
    MlpSpec spec;
    double final_loss = 0.0;
};

inline RatioFit fit_ratio_discriminator(const GaussianMixture& q, const GaussianMixture& p, const SdeSchedule& s,
                                        double t, std::size_t steps, std::size_t batch, std::uint64_t seed,
                                        double lr = 1e-3, std::vector<std::size_t> hidden = {128, 128}) {
    RatioFit fit;
    fit.spec = MlpSpec{q.dim(), std::move(hidden), 1, Activation::SmoothRectifier, TimeEmbedding::Sinusoidal, 8};
    CounterRng init(seed, "discriminator.init"), rq(seed, "ratio.q"), rp(seed, "ratio.p");
    fit.params = init_mlp(fit.spec, init, 0.1);
    auto adam = AdamState::for_params(fit.params, lr);
    const auto qt = q.diffused(s, t), pt = p.diffused(s, t);
    const std::vector<double> times(batch, t);
    for (std::size_t it = 0; it < steps; ++it) {
        const ad::Matrix xr = qt.sample(rq, batch), xf = pt.sample(rp, batch);
        ad::Tape tape;
        BoundParams b(tape, fit.params);
        ad::Var lr_ = forward_mlp(fit.spec, b, tape.constant(xr), std::span<const double>(times));
        ad::Var lf = forward_mlp(fit.spec, b, tape.constant(xf), std::span<const double>(times));
        ad::Var loss = ad::add(ad::mean(ad::softplus(ad::scale(lr_, -1.0))), ad::mean(ad::softplus(lf)));
        tape.backward(loss);
        adam_step(fit.params, b.gradient(), adam);
        fit.final_loss = loss.scalar();
    }
    return fit;
}

inline Eigen::VectorXd ratio_logits(const RatioFit& fit, const Eigen::MatrixXd& x, double t) {
    ad::Tape tape;
    BoundParams b(tape, fit.params.frozen_snapshot());
    const std::vector<double> times(static_cast<std::size_t>(x.rows()), t);
    return forward_mlp(fit.spec, b, tape.constant(x), std::span<const double>(times)).value().col(0);
}

}  // namespace unidistill
