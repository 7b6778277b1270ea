#include <gtest/gtest.h>
#include <quadmath.h>

#include <cmath>
#include <cstdio>
#include <vector>

#include "unidistill/fdivergence.hpp"
#include "unidistill/gmm.hpp"
#include "unidistill/rng.hpp"

using namespace unidistill;

namespace {

using quad = __float128;

// Generators written out independently, in quad precision.
quad f_ref(DivergenceKind k, quad r) {
    switch (k) {
        case DivergenceKind::FKL: return r * logq(r);
        case DivergenceKind::RKL: return -logq(r);
        case DivergenceKind::JKL: return (r - 1) * logq(r);
        case DivergenceKind::ChiSq: return (r - 1) * (r - 1);
        case DivergenceKind::JS: return r * logq(r) - (1 + r) * logq((1 + r) / 2);
    }
    return 0;
}

// 5-point central stencils with a small step; quad precision keeps the
// cancellation error far below the truncation error.
double fd(DivergenceKind k, double r_in, int order) {
    const quad r = r_in, h = r * quad(1e-5);
    const quad m2 = f_ref(k, r - 2 * h), m1 = f_ref(k, r - h), z = f_ref(k, r), p1 = f_ref(k, r + h),
               p2 = f_ref(k, r + 2 * h);
    quad v = 0;
    switch (order) {
        case 1: v = (m2 - 8 * m1 + 8 * p1 - p2) / (12 * h); break;
        case 2: v = (-m2 + 16 * m1 - 30 * z + 16 * p1 - p2) / (12 * h * h); break;
        case 3: v = (-m2 + 2 * m1 - 2 * p1 + p2) / (2 * h * h * h); break;
        case 4: v = (m2 - 4 * m1 + 6 * z - 4 * p1 + p2) / (h * h * h * h); break;
    }
    return static_cast<double>(v);
}

std::vector<double> log_points(double lo, double hi, int n) {
    std::vector<double> v;
    for (int i = 0; i < n; ++i) v.push_back(lo * std::pow(hi / lo, static_cast<double>(i) / (n - 1)));
    return v;
}

double rel(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1.0); }

}  // namespace

TEST(FEval, KnownValues) {
    for (auto k : all_divergences) EXPECT_NEAR(f_eval(k, 1.0, 0), 0.0, 1e-15) << to_string(k);
    EXPECT_DOUBLE_EQ(f_eval(DivergenceKind::ChiSq, 3.0, 0), 4.0);
    EXPECT_DOUBLE_EQ(f_eval(DivergenceKind::FKL, 2.0, 2), 0.5);
    EXPECT_THROW(f_eval(DivergenceKind::RKL, 0.0, 0), DomainError);
    EXPECT_THROW(f_eval(DivergenceKind::RKL, -1.0, 1), DomainError);
    EXPECT_THROW(curvature(DivergenceKind::FKL, 0.0), DomainError);
}

TEST(FEval, DerivativesMatchFiniteDifferences) {
    for (auto k : all_divergences)
        for (double r : log_points(0.1, 10.0, 50))
            for (int order = 1; order <= 4; ++order) {
                const double ref = fd(k, r, order);
                EXPECT_LT(rel(f_eval(k, r, order), ref), 1e-6) << to_string(k) << " r=" << r << " order " << order;
            }
}

TEST(FEval, Convex) {
    for (auto k : all_divergences)
        for (double r : log_points(1e-3, 1e3, 200)) EXPECT_GE(f_eval(k, r, 2), 0.0) << to_string(k) << " r=" << r;
}

TEST(Curvature, MatchesFiniteDifferenceDefinition) {
    for (auto k : all_divergences)
        for (double r : log_points(0.1, 10.0, 50)) {
            const double c1 = r * r * r * fd(k, r, 3);
            const double c2 = 2 * r * r * fd(k, r, 2) + 4 * r * r * r * fd(k, r, 3) + r * r * r * r * fd(k, r, 4);
            const auto w = curvature(k, r);
            EXPECT_LT(rel(w.c1, c1), 1e-6) << to_string(k) << " r=" << r;
            EXPECT_LT(rel(w.c2, c2), 1e-6) << to_string(k) << " r=" << r;
            EXPECT_EQ(w.at_ratio, r);
        }
}

TEST(Curvature, TableValues) {
    for (double r : log_points(0.1, 10.0, 50)) {
        const auto chi = curvature(DivergenceKind::ChiSq, r);
        EXPECT_EQ(chi.c1, 0.0);
        EXPECT_EQ(chi.c2, 4.0 * r * r);
        const auto fkl = curvature(DivergenceKind::FKL, r);
        EXPECT_EQ(fkl.c1, -r);
        EXPECT_EQ(fkl.c2, 0.0);
    }
    EXPECT_EQ(curvature(DivergenceKind::ChiSq, 2.0).c2, 16.0);
    EXPECT_EQ(curvature(DivergenceKind::FKL, 2.0).c1, -2.0);
    const auto js = curvature(DivergenceKind::JS, 1.0);
    EXPECT_NEAR(js.c1, -0.75, 1e-15);
    EXPECT_NEAR(js.c2, -0.25, 1e-15);
}

TEST(Curvature, JeffreysIsSumOfForwardAndReverse) {
    for (double r : log_points(1e-3, 1e3, 100)) {
        const auto j = curvature(DivergenceKind::JKL, r), f = curvature(DivergenceKind::FKL, r),
                   b = curvature(DivergenceKind::RKL, r);
        EXPECT_NEAR(j.c1, f.c1 + b.c1, 1e-12 * std::max(1.0, std::abs(j.c1)));
        EXPECT_NEAR(j.c2, f.c2 + b.c2, 1e-12);
    }
}

TEST(Curvature, FiniteAtExtremeRatios) {
    for (auto k : all_divergences)
        for (double r : {1e-300, 1e-200, 1e100}) {
            const auto w = curvature(k, r);
            EXPECT_TRUE(std::isfinite(w.c1) && std::isfinite(w.c2)) << to_string(k) << " r=" << r;
            EXPECT_TRUE(std::isfinite(c1_slope(k, r)));
        }
}

TEST(Curvature, SlopeMatchesDifferenceOfC1) {
    for (auto k : all_divergences)
        for (double r : log_points(0.1, 10.0, 20)) {
            const double h = 1e-5 * r;
            const double d = (curvature(k, r + h).c1 - curvature(k, r - h).c1) / (2 * h);
            EXPECT_NEAR(c1_slope(k, r), d, 1e-8) << to_string(k);
        }
}

// Some tabulations list C1 = -1 for RKL and C1 = -r - 1 for JKL; the
// definition r^3 f'''(r) gives -2 and -r - 2. Both are printed; the
// implementation follows the definition.
TEST(Curvature, TableDiscrepancyDiagnostic) {
    for (double r : {0.5, 1.0, 2.0}) {
        const double rkl_table = -1.0, jkl_table = -r - 1.0;
        const double rkl_def = r * r * r * f_eval(DivergenceKind::RKL, r, 3);
        const double jkl_def = r * r * r * f_eval(DivergenceKind::JKL, r, 3);
        std::printf("r = %.1f  RKL C1: table %.4f, definition %.4f | JKL C1: table %.4f, definition %.4f\n", r,
                    rkl_table, rkl_def, jkl_table, jkl_def);
        EXPECT_NEAR(curvature(DivergenceKind::RKL, r).c1, rkl_def, 1e-12);
        EXPECT_NEAR(curvature(DivergenceKind::JKL, r).c1, jkl_def, 1e-12);
        EXPECT_NE(rkl_def, rkl_table);
        EXPECT_NE(jkl_def, jkl_table);
        // the factor between them is a constant offset of -1, not a rescaling of the minimiser
        EXPECT_NEAR(rkl_def - rkl_table, -1.0, 1e-12);
        EXPECT_NEAR(jkl_def - jkl_table, -1.0, 1e-12);
    }
}

TEST(Curvature, ReverseKlIntegrandWeightIsOne) {
    CounterRng rng(5, "test.ratios");
    for (int i = 0; i < 100; ++i) {
        const double r = std::exp(rng.uniform(-6.0, 6.0));
        EXPECT_NEAR(r * r * f_eval(DivergenceKind::RKL, r, 2), 1.0, 1e-12);
        EXPECT_EQ(r2_f2(DivergenceKind::RKL, r), 1.0);
    }
}

TEST(ModeClass, PerKind) {
    EXPECT_EQ(mode_seeking_class(DivergenceKind::RKL), ModeClass::ModeSeeking);
    EXPECT_EQ(mode_seeking_class(DivergenceKind::JS), ModeClass::ModeSeeking);
    EXPECT_EQ(mode_seeking_class(DivergenceKind::FKL), ModeClass::ModeCovering);
    EXPECT_EQ(mode_seeking_class(DivergenceKind::JKL), ModeClass::ModeCovering);
    EXPECT_EQ(mode_seeking_class(DivergenceKind::ChiSq), ModeClass::ModeCovering);
    // f(r)/r at large r: bounded for the mode-seeking kinds
    for (auto k : all_divergences) {
        const double a = f_eval(k, 1e6, 0) / 1e6, b = f_eval(k, 1e12, 0) / 1e12;
        const bool bounded = std::abs(b) < 1.0 && std::abs(b - a) < 1.0;
        EXPECT_EQ(bounded, mode_seeking_class(k) == ModeClass::ModeSeeking) << to_string(k);
    }
}

TEST(Parse, NamesAndErrors) {
    for (auto k : all_divergences) EXPECT_EQ(parse_divergence(to_string(k)), k);
    EXPECT_THROW(parse_divergence("kl"), ValidationError);
}

TEST(Quadrature, IdenticalDistributionsGiveZero) {
    const GaussianMixture q({{0.3, {-1.0}, {0.5}}, {0.7, {1.0}, {0.8}}});
    for (auto k : all_divergences) EXPECT_LT(std::abs(divergence_quadrature({k}, q, q)), 1e-10);
    const auto ring = GaussianMixture::ring(4, 1.5, 0.4);
    EXPECT_LT(std::abs(divergence_quadrature({DivergenceKind::JS}, ring, ring)), 1e-10);
}

TEST(Quadrature, GaussianClosedForms) {
    const auto q = GaussianMixture::normal(1.0, 1.0), p = GaussianMixture::normal(0.0, 1.0);
    // f = -log r gives KL(p || q) = 1/2; chi-square gives e^{mu^2} - 1
    EXPECT_NEAR(divergence_quadrature({DivergenceKind::RKL}, q, p), 0.5, 1e-9);
    EXPECT_NEAR(divergence_quadrature({DivergenceKind::FKL}, q, p), 0.5, 1e-9);
    EXPECT_NEAR(divergence_quadrature({DivergenceKind::JKL}, q, p), 1.0, 1e-9);
    EXPECT_NEAR(divergence_quadrature({DivergenceKind::ChiSq}, q, p), std::exp(1.0) - 1.0, 1e-9);
    // unequal variances: KL(N(m1,v1) || N(m2,v2))
    const auto a = GaussianMixture::normal(0.5, 0.6), b = GaussianMixture::normal(-0.2, 1.7);
    const double kl_ab = 0.5 * (std::log(1.7 / 0.6) + (0.6 + 0.49) / 1.7 - 1.0);
    EXPECT_NEAR(divergence_quadrature({DivergenceKind::FKL}, a, b), kl_ab, 1e-9);
}

TEST(Quadrature, TwoDimensionalProductOfKls) {
    const GaussianMixture q({{1.0, {0.5, -0.3}, {0.8, 1.2}}}), p({{1.0, {0.0, 0.0}, {1.0, 1.0}}});
    auto kl1 = [](double m, double v) { return 0.5 * (v + m * m - 1.0 - std::log(v)); };
    EXPECT_NEAR(divergence_quadrature({DivergenceKind::FKL}, q, p), kl1(0.5, 0.8) + kl1(-0.3, 1.2), 1e-8);
}

TEST(Quadrature, NonNegative) {
    CounterRng rng(9, "test.pairs");
    for (int i = 0; i < 20; ++i) {
        const GaussianMixture q({{0.5, {rng.uniform(-1, 1)}, {rng.uniform(0.5, 1.5)}}, {0.5, {rng.uniform(-1, 1)}, {rng.uniform(0.5, 1.5)}}});
        const auto p = GaussianMixture::normal(rng.uniform(-0.5, 0.5), rng.uniform(1.0, 2.0));
        for (auto k : all_divergences) EXPECT_GE(divergence_quadrature({k}, q, p), -1e-9) << to_string(k);
    }
}

TEST(Quadrature, Errors) {
    const auto a = GaussianMixture::normal(0.0, 1.0);
    const GaussianMixture b({{1.0, {0.0, 0.0}, {1.0, 1.0}}});
    EXPECT_THROW(divergence_quadrature({DivergenceKind::RKL}, a, b), ShapeError);
    const GaussianMixture c({{1.0, {0.0, 0.0, 0.0}, {1.0, 1.0, 1.0}}});
    EXPECT_THROW(divergence_quadrature({DivergenceKind::RKL}, c, c), ContractError);
    // chi-square of a wide q against a narrow p diverges; the integrand overflows
    const auto wide = GaussianMixture::normal(0.0, 100.0), narrow = GaussianMixture::normal(0.0, 0.01);
    try {
        divergence_quadrature({DivergenceKind::ChiSq}, wide, narrow);
        FAIL();
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("x = "), std::string::npos) << e.what();
    }
}
