#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "unidistill/metrics.hpp"

using namespace unidistill;

namespace {

const GaussianMixture ring = GaussianMixture::ring(8, 2.0, 0.1);

Eigen::MatrixXd normal_draws(std::uint64_t seed, Eigen::Index n, Eigen::Index d, double shift = 0.0) {
    CounterRng rng(seed, "draws");
    Eigen::MatrixXd x(n, d);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < d; ++j) x(i, j) = rng.normal() + shift;
    return x;
}

}  // namespace

TEST(ModeCoverage, AllAtOneCentre) {
    const auto& c = ring.components()[3];
    Eigen::MatrixXd x(500, 2);
    x.col(0).setConstant(c.mean[0]);
    x.col(1).setConstant(c.mean[1]);
    const auto rep = mode_coverage(x, ring);
    EXPECT_EQ(rep.covered_count, 1);
    EXPECT_EQ(rep.per_mode_fraction[3], 1.0);
    EXPECT_EQ(rep.capture_radius_sigmas, 3.0);
}

TEST(ModeCoverage, TeacherSamplesCoverEveryMode) {
    CounterRng rng(1, "teacher");
    const auto rep = mode_coverage(ring.sample(rng, 10000), ring);
    EXPECT_EQ(rep.covered_count, 8);
    const double total = std::accumulate(rep.per_mode_fraction.begin(), rep.per_mode_fraction.end(), 0.0);
    EXPECT_LE(total, 1.0);
    // mass of a 2-D standard normal outside radius 3 is exp(-4.5) ~ 0.011
    EXPECT_NEAR(total, 1.0 - std::exp(-4.5), 0.01);
}

TEST(ModeCoverage, FarSamplesCoverNothing) {
    Eigen::MatrixXd x = Eigen::MatrixXd::Zero(100, 2);
    x.col(0).setConstant(50.0);
    EXPECT_EQ(mode_coverage(x, ring).covered_count, 0);
    // the origin is ten standard deviations from every mode
    EXPECT_EQ(mode_coverage(Eigen::MatrixXd::Zero(10, 2), ring).covered_count, 0);
}

TEST(ModeCoverage, ThresholdCountsSmallModes) {
    const auto& a = ring.components()[0];
    const auto& b = ring.components()[1];
    Eigen::MatrixXd x(1000, 2);
    for (Eigen::Index i = 0; i < 1000; ++i) {
        const auto& c = i < 995 ? a : b;
        x(i, 0) = c.mean[0];
        x(i, 1) = c.mean[1];
    }
    EXPECT_EQ(mode_coverage(x, ring).covered_count, 1);
    EXPECT_EQ(mode_coverage(x, ring, 3.0, 0.005).covered_count, 2);
}

TEST(ModeCoverage, PermutationInvariant) {
    CounterRng rng(2, "teacher");
    Eigen::MatrixXd x = ring.sample(rng, 2000);
    x.col(0).array() *= 1.05;
    const auto base = mode_coverage(x, ring);
    Eigen::MatrixXd rev = x.colwise().reverse();
    const auto r1 = mode_coverage(rev, ring);
    EXPECT_EQ(r1.per_mode_fraction, base.per_mode_fraction);
    auto comps = ring.components();
    std::reverse(comps.begin(), comps.end());
    const auto r2 = mode_coverage(x, GaussianMixture(comps));
    std::vector<double> f = r2.per_mode_fraction;
    std::reverse(f.begin(), f.end());
    EXPECT_EQ(f, base.per_mode_fraction);
    EXPECT_EQ(r2.covered_count, base.covered_count);
}

TEST(ModeCoverage, Contracts) {
    EXPECT_THROW(mode_coverage(Eigen::MatrixXd(0, 2), ring), ContractError);
    EXPECT_THROW(mode_coverage(Eigen::MatrixXd::Zero(3, 1), ring), ShapeError);
    const auto close = GaussianMixture({{0.5, {0.0}, {1.0}}, {0.5, {4.0}, {1.0}}});
    EXPECT_THROW(mode_coverage(Eigen::MatrixXd::Zero(3, 1), close), ContractError);
}

TEST(SlicedWasserstein, IdenticalSetsAreZero) {
    const auto a = normal_draws(3, 500, 2);
    EXPECT_EQ(sliced_wasserstein(a, a), 0.0);
    Eigen::MatrixXd shuffled = a.colwise().reverse();
    EXPECT_EQ(sliced_wasserstein(a, shuffled), 0.0);
}

TEST(SlicedWasserstein, PointMassesOneApart) {
    EXPECT_DOUBLE_EQ(sliced_wasserstein(Eigen::MatrixXd::Zero(10, 1), Eigen::MatrixXd::Ones(10, 1)), 1.0);
    // unequal sizes still compare quantile functions
    EXPECT_DOUBLE_EQ(sliced_wasserstein(Eigen::MatrixXd::Zero(7, 1), Eigen::MatrixXd::Ones(3, 1)), 1.0);
}

TEST(SlicedWasserstein, OneDimensionalQuantileOracle) {
    // equal-size sets: W2^2 is the mean squared gap between sorted samples
    const auto a = normal_draws(4, 300, 1), b = normal_draws(5, 300, 1, 0.7);
    std::vector<double> sa(a.data(), a.data() + a.size()), sb(b.data(), b.data() + b.size());
    std::sort(sa.begin(), sa.end());
    std::sort(sb.begin(), sb.end());
    double s = 0.0;
    for (std::size_t i = 0; i < sa.size(); ++i) s += (sa[i] - sb[i]) * (sa[i] - sb[i]);
    EXPECT_NEAR(sliced_wasserstein(a, b, 4), std::sqrt(s / 300.0), 1e-12);
}

TEST(SlicedWasserstein, SameGaussianDrawsAreClose) {
    const auto a = normal_draws(6, 10000, 2), b = normal_draws(7, 10000, 2);
    EXPECT_LT(sliced_wasserstein(a, b, 128, 0), 0.05);
}

TEST(SlicedWasserstein, SymmetricAndDeterministic) {
    const auto a = normal_draws(8, 400, 2), b = normal_draws(9, 600, 2, 0.5);
    const double ab = sliced_wasserstein(a, b, 64, 5);
    EXPECT_NEAR(ab, sliced_wasserstein(b, a, 64, 5), 1e-14);
    EXPECT_EQ(ab, sliced_wasserstein(a, b, 64, 5));
    EXPECT_GT(ab, 0.0);
}

TEST(SlicedWasserstein, Contracts) {
    EXPECT_THROW(sliced_wasserstein(Eigen::MatrixXd::Zero(3, 2), Eigen::MatrixXd::Zero(3, 1)), ShapeError);
    EXPECT_THROW(sliced_wasserstein(Eigen::MatrixXd::Zero(1, 2), Eigen::MatrixXd::Zero(3, 2)), ContractError);
}

TEST(HistogramKl, EqualSetsNearZero) {
    const auto a = normal_draws(10, 5000, 1);
    EXPECT_LT(histogram_kl(a, a), 1e-6);
    const auto b = normal_draws(11, 5000, 2);
    EXPECT_LT(histogram_kl(b, b, 20), 1e-6);
}

TEST(HistogramKl, DisjointSupportsBounded) {
    const Eigen::Index n = 1000;
    const std::size_t bins = 50;
    const Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, 1), b = Eigen::MatrixXd::Constant(n, 1, 10.0);
    const double kl = histogram_kl(a, b, bins);
    const double cells = static_cast<double>(bins);
    // largest smoothed probability ratio between the two histograms
    const double bound = std::log((static_cast<double>(n) + 1.0) / (static_cast<double>(n) + cells) * (static_cast<double>(n) + cells));
    EXPECT_TRUE(std::isfinite(kl));
    EXPECT_GT(kl, 1.0);
    EXPECT_LE(kl, bound);
}

TEST(HistogramKl, UnitShiftedGaussians) {
    // KL(N(0,1) || N(1,1)) = 1/2
    const auto a = normal_draws(12, 100000, 1), b = normal_draws(13, 100000, 1, 1.0);
    EXPECT_NEAR(histogram_kl(a, b, 100), 0.5, 0.05);
}

TEST(HistogramKl, Contracts) {
    EXPECT_THROW(histogram_kl(Eigen::MatrixXd::Zero(3, 3), Eigen::MatrixXd::Zero(3, 3)), ContractError);
    EXPECT_THROW(histogram_kl(Eigen::MatrixXd::Zero(3, 2), Eigen::MatrixXd::Zero(3, 1)), ShapeError);
}
