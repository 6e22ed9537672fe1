#include "jdp/error.hpp"
#include "jdp/fpca.hpp"
#include "jdp/tuner.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <random>

using namespace jdp;
using namespace jdp::fpca;

namespace {

// Y_i(t) = 1 + t/10 + a_i sin(2 pi t / 10) + c_i cos(2 pi t / 10) + noise, at
// irregular times in [0, 10], with a ~ N(0, scale^2) and c ~ N(0, (scale / 2)^2).
// At scale 1 the eigenvalues are 5 and 1.25 with eigenfunctions sin / sqrt(5)
// and cos / sqrt(5).
Cohort two_component_cohort(int n, double noise, std::uint64_t seed, int min_count = 4, int max_count = 9,
                            double scale = 1.0)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> a(0.0, scale), c(0.0, 0.5 * scale), e(0.0, noise);
    std::uniform_int_distribution<int> count(min_count, max_count);
    std::uniform_real_distribution<double> when(0.0, 10.0);
    std::vector<SurvivalRecord> s;
    std::vector<LongitudinalRecord> m;
    for (int i = 0; i < n; ++i) {
        const auto id = test::id(i);
        s.push_back({id, 20.0, false, {}});
        const double ai = a(rng), ci = c(rng);
        std::vector<double> times(static_cast<std::size_t>(count(rng)));
        for (auto& t : times) t = std::round(when(rng) * 1000.0) / 1000.0;
        std::sort(times.begin(), times.end());
        times.erase(std::unique(times.begin(), times.end()), times.end());
        for (double t : times) {
            const double w = 2.0 * std::numbers::pi * t / 10.0;
            m.push_back({id, t, 1.0 + t / 10.0 + ai * std::sin(w) + ci * std::cos(w) + (noise > 0 ? e(rng) : 0.0)});
        }
    }
    return Cohort::create(s, m, {});
}

std::vector<LongitudinalRecord> on_grid(const FpcaModel& model, const std::vector<double>& extra)
{
    std::vector<LongitudinalRecord> out;
    for (std::size_t i = 0; i < model.grid.size(); ++i)
        out.push_back({"i", model.grid[i], model.mean[i] + (extra.empty() ? 0.0 : extra[i])});
    return out;
}

} // namespace

TEST(Fpca, EigenfunctionsAreOrthonormalUnderTrapezoidWeights)
{
    const auto model = fit_fpca(two_component_cohort(200, 0.1, 1), equispaced_grid(0.0, 10.0, 51));
    ASSERT_GE(model.r, 1);
    const auto K = static_cast<Eigen::Index>(model.eigenvalues.size());
    const Eigen::VectorXd w = Eigen::Map<const Eigen::VectorXd>(model.weights.data(), 51);
    const Eigen::MatrixXd gram = model.eigenfunctions.leftCols(K).transpose() * w.asDiagonal() *
                                 model.eigenfunctions.leftCols(K);
    EXPECT_LT((gram - Eigen::MatrixXd::Identity(K, K)).cwiseAbs().maxCoeff(), 1e-8);
    for (std::size_t k = 1; k < model.eigenvalues.size(); ++k)
        EXPECT_GE(model.eigenvalues[k - 1], model.eigenvalues[k]);
    for (double l : model.eigenvalues) EXPECT_GT(l, 0.0);
}

TEST(Fpca, TrapezoidWeights)
{
    const auto model = fit_fpca(two_component_cohort(60, 0.1, 2), equispaced_grid(0.0, 10.0, 11));
    EXPECT_DOUBLE_EQ(model.weights.front(), 0.5);
    EXPECT_DOUBLE_EQ(model.weights[5], 1.0);
    EXPECT_DOUBLE_EQ(model.weights.back(), 0.5);
}

TEST(Fpca, ThresholdRuleChoosesSmallestSufficientR)
{
    const auto c = two_component_cohort(300, 0.1, 3);
    const auto grid = equispaced_grid(0.0, 10.0, 51);
    for (double S : {0.5, 0.8, 0.95, 0.99, 1.0}) {
        FpcaOptions o;
        o.variance_threshold = S;
        const auto m = fit_fpca(c, grid, o);
        ASSERT_GE(m.r, 1);
        EXPECT_GE(m.explained[static_cast<std::size_t>(m.r - 1)], S - 1e-12) << S;
        if (m.r > 1) EXPECT_LT(m.explained[static_cast<std::size_t>(m.r - 2)], S) << S;
    }
}

TEST(Fpca, RecoversRankTwoStructureFromSparseData)
{
    const auto m = fit_fpca(two_component_cohort(1000, 0.05, 4), equispaced_grid(0.0, 10.0, 51));
    ASSERT_GE(m.eigenvalues.size(), 2u);
    EXPECT_NEAR(m.eigenvalues[0], 5.0, 0.5);
    EXPECT_NEAR(m.eigenvalues[1], 1.25, 0.125);
    double sin_dot = 0.0, cos_dot = 0.0;
    for (std::size_t i = 0; i < m.grid.size(); ++i) {
        const double w = 2.0 * std::numbers::pi * m.grid[i] / 10.0;
        const auto g = static_cast<Eigen::Index>(i);
        sin_dot += m.weights[i] * m.eigenfunctions(g, 0) * std::sin(w) / std::sqrt(5.0);
        cos_dot += m.weights[i] * m.eigenfunctions(g, 1) * std::cos(w) / std::sqrt(5.0);
    }
    EXPECT_GT(std::abs(sin_dot), 0.98);
    EXPECT_GT(std::abs(cos_dot), 0.95);
}

TEST(Fpca, NoiseVarianceFromTheDiagonalGap)
{
    // Dense and noise-dominated, so the gap is well identified; a numpy replica
    // of the estimator without time binning lands within 1% on this design.
    const auto m = fit_fpca(two_component_cohort(300, 0.5, 6, 30, 40, 0.3), equispaced_grid(0.0, 10.0, 51));
    EXPECT_NEAR(m.noise_variance, 0.25, 0.0125);
}

TEST(Fpca, FittingSetScoresAreCentred)
{
    const auto m = fit_fpca(two_component_cohort(400, 0.1, 5), equispaced_grid(0.0, 10.0, 51));
    for (int k = 0; k < m.r; ++k) {
        const auto col = m.scores.col(k);
        const double mean = col.mean();
        const double sd = std::sqrt((col.array() - mean).square().sum() / static_cast<double>(col.size() - 1));
        EXPECT_LE(std::abs(mean), 3.0 * sd / std::sqrt(static_cast<double>(col.size()))) << k;
    }
}

TEST(Fpca, ScoresMatchWoodburyForm)
{
    const auto m = fit_fpca(two_component_cohort(200, 0.5, 6, 4, 9, 0.3), equispaced_grid(0.0, 10.0, 51));
    ASSERT_GT(m.noise_variance, 0.0);
    const std::vector<LongitudinalRecord> ms{{"x", 0.7, 1.3}, {"x", 3.1, 2.0}, {"x", 8.25, 0.1}};
    const auto xi = scores_for_subject(m, ms);
    ASSERT_EQ(xi.size(), static_cast<std::size_t>(m.r));

    // (Lambda^-1 + Phi' Phi / s2)^-1 Phi' (y - mu) / s2
    Eigen::MatrixXd Phi(3, m.r);
    Eigen::VectorXd res(3);
    for (int j = 0; j < 3; ++j) {
        res(j) = ms[static_cast<std::size_t>(j)].value - m.mean_at(ms[static_cast<std::size_t>(j)].time);
        for (int k = 0; k < m.r; ++k) Phi(j, k) = m.eigenfunction_at(k, ms[static_cast<std::size_t>(j)].time);
    }
    Eigen::MatrixXd A = Phi.transpose() * Phi / m.noise_variance;
    for (int k = 0; k < m.r; ++k) A(k, k) += 1.0 / m.eigenvalues[static_cast<std::size_t>(k)];
    const Eigen::VectorXd oracle = A.ldlt().solve(Phi.transpose() * res / m.noise_variance);
    for (int k = 0; k < m.r; ++k) EXPECT_NEAR(xi[static_cast<std::size_t>(k)], oracle(k), 1e-8);
}

TEST(Fpca, MeanCurveScoresZeroAndFirstEigenfunctionScoresOne)
{
    const auto m = fit_fpca(two_component_cohort(300, 0.02, 7), equispaced_grid(0.0, 10.0, 51));
    for (double x : scores_for_subject(m, on_grid(m, {}))) EXPECT_NEAR(x, 0.0, 1e-6);

    std::vector<double> phi1(m.grid.size());
    double ss = 0.0;
    for (std::size_t i = 0; i < phi1.size(); ++i) {
        phi1[i] = m.eigenfunctions(static_cast<Eigen::Index>(i), 0);
        ss += phi1[i] * phi1[i];
    }
    const auto xi = scores_for_subject(m, on_grid(m, phi1));
    const double l1 = m.eigenvalues[0];
    // dense grid: shrinkage lambda |phi|^2 / (lambda |phi|^2 + s2)
    EXPECT_NEAR(xi[0], l1 * ss / (l1 * ss + m.noise_variance), 1e-3);
    for (std::size_t k = 1; k < xi.size(); ++k) EXPECT_NEAR(xi[k], 0.0, 2e-2);
}

TEST(Fpca, IdenticalTrajectoriesAreDegenerate)
{
    std::vector<SurvivalRecord> s;
    std::vector<LongitudinalRecord> m;
    for (int i = 0; i < 30; ++i) {
        s.push_back({test::id(i), 5.0, false, {}});
        for (double t : {0.0, 0.5, 1.0}) m.push_back({test::id(i), t, 2.0 - t});
    }
    const auto model = fit_fpca(Cohort::create(s, m, {}), equispaced_grid(0.0, 1.0, 21));
    EXPECT_TRUE(model.degenerate);
    EXPECT_EQ(model.r, 0);
    EXPECT_EQ(model.scores.size(), 0);
    EXPECT_NEAR(model.mean_at(0.5), 1.5, 1e-8);
}

TEST(Fpca, TooFewSubjects)
{
    EXPECT_THROW(fit_fpca(two_component_cohort(5, 0.1, 8), equispaced_grid(0.0, 10.0, 51)), InvalidArgument);
}

TEST(Fpca, ScenarioHistoriesUpToLandmark)
{
    const auto c = tuner::history_up_to(test::scenario_cohort(1, 400, 9), 1.0);
    const auto m = fit_fpca(c, equispaced_grid(0.0, 1.0, 51));
    ASSERT_GE(m.r, 1);
    EXPECT_GE(m.explained[static_cast<std::size_t>(m.r - 1)], 0.95);
    EXPECT_EQ(m.subject_ids.size(), 400u);
    // mean near the population line beta0 + beta1 t
    EXPECT_NEAR(m.mean_at(0.0), -1.35, 0.05);
    EXPECT_NEAR(m.mean_at(1.0), -1.05, 0.05);
}

TEST(Fpca, BasisAlignmentOfAFitWithItself)
{
    const auto m = fit_fpca(two_component_cohort(150, 0.1, 10), equispaced_grid(0.0, 10.0, 51));
    for (double a : basis_alignment(m, m)) EXPECT_NEAR(a, 1.0, 1e-8);
}

TEST(Fpca, LocalLinearReproducesLines)
{
    const std::vector<double> x{0.0, 0.3, 0.9, 1.4, 2.0, 3.3};
    std::vector<double> y;
    for (double xi : x) y.push_back(2.0 - 0.75 * xi);
    for (double x0 : {0.0, 0.5, 1.7, 3.3}) {
        const auto v = local_linear(x, y, x0, 0.4);
        ASSERT_TRUE(v.has_value());
        EXPECT_NEAR(*v, 2.0 - 0.75 * x0, 1e-10);
    }
    const std::vector<double> one{1.0}, val{3.0};
    EXPECT_FALSE(local_linear(one, val, 1.0, 0.5).has_value());
}

TEST(Fpca, EquispacedGrid)
{
    const auto g = equispaced_grid(0.0, 1.0, 51);
    ASSERT_EQ(g.size(), 51u);
    EXPECT_EQ(g.front(), 0.0);
    EXPECT_EQ(g.back(), 1.0);
    EXPECT_NEAR(g[10], 0.2, 1e-15);
    EXPECT_THROW(equispaced_grid(1.0, 1.0, 5), InvalidArgument);
}
