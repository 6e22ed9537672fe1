#include "jdp/error.hpp"
#include "jdp/jointfit.hpp"
#include "jdp/quadrature.hpp"
#include "jdp/simgen.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

using namespace jdp;
using namespace jdp::joint;

namespace {

const std::vector<std::size_t> kBothCovariates{0, 1};

Theta unit_theta(const BSplineBasis& basis, std::size_t n_cov)
{
    Theta th;
    th.beta << -1.0, 0.2;
    th.gamma.assign(n_cov, 0.0);
    th.alpha = 0.0;
    th.D << 0.09, 0.004, 0.004, 0.01;
    th.sigma = 0.3;
    th.baseline.assign(basis.size(), 0.0);
    return th;
}

JointModelSpec quick_spec(std::uint64_t seed)
{
    JointModelSpec s;
    s.mcmc.n_iterations = 1200;
    s.mcmc.n_burnin = 400;
    s.mcmc.n_thin = 2;
    s.mcmc.n_chains = 2;
    s.mcmc.seed = seed;
    return s;
}

double log_mvn(const Eigen::Matrix2d& D, const Eigen::Vector2d& b)
{
    return -std::log(2.0 * std::numbers::pi) - 0.5 * std::log(D.determinant()) - 0.5 * b.dot(D.ldlt().solve(b));
}

} // namespace

TEST(JointFit, LogBaselineHazard)
{
    BaselineHazardSpline zero{BSplineBasis(0.0, 5.0, {1.0, 2.0}, 3), 0.0, std::vector<double>(6, 0.0)};
    for (double t : {0.0, 1.3, 5.0}) EXPECT_EQ(log_baseline_hazard(zero, t), 0.0);

    BaselineHazardSpline step{BSplineBasis(0.0, 2.0, {}, 0), 0.4, {0.7}};
    bool ex = true;
    EXPECT_NEAR(log_baseline_hazard(step, 1.0, &ex), 1.1, 1e-15);
    EXPECT_FALSE(ex);
    EXPECT_NEAR(log_baseline_hazard(step, 9.0, &ex), 1.1, 1e-15);
    EXPECT_TRUE(ex);
}

TEST(JointFit, CensoredSubjectWithoutHistoryUnderUnitHazard)
{
    const BSplineBasis basis(0.0, 6.0, {1.5, 3.0}, 3);
    const SurvivalRecord r{"a", 2.7, false, {0.3, -1.0}};
    const auto s = make_subject_data(r, {}, basis, kBothCovariates);
    const Theta th = unit_theta(basis, 2);
    const Eigen::Vector2d b(0.1, -0.05);
    EXPECT_EQ(longitudinal_log_likelihood(th, b, s), 0.0);
    EXPECT_NEAR(survival_log_likelihood(th, b, s), -2.7, 1e-13);
    EXPECT_NEAR(subject_log_likelihood(th, b, s), -2.7 + log_mvn(th.D, b), 1e-12);
    EXPECT_NEAR(random_effect_log_density(th.D, b), log_mvn(th.D, b), 1e-13);
}

TEST(JointFit, SurvivalTermAgainstAdaptiveQuadrature)
{
    const BSplineBasis basis(0.0, 6.0, {1.0, 2.5, 4.0}, 3);
    Theta th = unit_theta(basis, 2);
    th.alpha = 1.7;
    th.gamma = {0.4, -0.6};
    th.baseline = {-0.5, 0.2, 0.8, -0.1, 0.3, 0.6, -0.4};
    const Eigen::Vector2d b(0.2, 0.15);
    const SurvivalRecord r{"a", 4.3, true, {0.5, 1.2}};
    const auto s = make_subject_data(r, {}, basis, kBothCovariates);

    BaselineHazardSpline h0{basis, 0.0, th.baseline};
    const double eta = 0.4 * 0.5 - 0.6 * 1.2;
    auto m = [&](double t) { return th.beta(0) + b(0) + (th.beta(1) + b(1)) * t; };
    auto hazard = [&](double t) { return std::exp(log_baseline_hazard(h0, t) + eta + th.alpha * m(t)); };
    const double H = integrate_adaptive(hazard, 0.0, 4.3, 1e-12).value;
    const double expected = std::log(hazard(4.3)) - H;
    EXPECT_NEAR(survival_log_likelihood(th, b, s), expected, 1e-6 * std::abs(H));
    const std::vector<double> w{0.5, 1.2};
    EXPECT_NEAR(cumulative_hazard(th, basis, b, w, 0.0, 4.3), H, 1e-6 * H);
    EXPECT_NEAR(cumulative_hazard(th, basis, b, w, 1.0, 4.3),
                H - integrate_adaptive(hazard, 0.0, 1.0, 1e-12).value, 1e-6 * H);
}

TEST(JointFit, CumulativeHazardBeyondSpanHoldsBoundaryHazard)
{
    const BSplineBasis basis(0.0, 2.0, {1.0}, 2);
    Theta th = unit_theta(basis, 0);
    th.baseline = {0.1, -0.2, 0.3, 0.5};
    const Eigen::Vector2d b = Eigen::Vector2d::Zero();
    // alpha = 0: beyond the span the hazard is exp(0.5) (the last coefficient at the clamped end)
    const double inside = cumulative_hazard(th, basis, b, {}, 0.0, 2.0);
    const double total = cumulative_hazard(th, basis, b, {}, 0.0, 5.0);
    EXPECT_NEAR(total - inside, 3.0 * std::exp(0.5), 1e-12);
}

TEST(JointFit, LongitudinalTermIsGaussianSum)
{
    const BSplineBasis basis(0.0, 6.0, {}, 3);
    const std::vector<LongitudinalRecord> ms{{"a", 0.0, -0.8}, {"a", 0.5, -1.1}, {"a", 2.0, -0.3}};
    const auto s = make_subject_data({"a", 3.0, false, {}}, ms, basis, {});
    const Theta th = unit_theta(basis, 0);
    const Eigen::Vector2d b(0.05, 0.1);
    double expected = 0.0;
    for (const auto& r : ms) {
        const double mu = th.beta(0) + b(0) + (th.beta(1) + b(1)) * r.time;
        expected += -0.5 * std::log(2.0 * std::numbers::pi * th.sigma * th.sigma) -
                    (r.value - mu) * (r.value - mu) / (2.0 * th.sigma * th.sigma);
    }
    EXPECT_NEAR(longitudinal_log_likelihood(th, b, s), expected, 1e-12);
}

TEST(JointFit, ParallelLikelihoodMatchesSerialBits)
{
    const auto c = test::scenario_cohort(1, 300, 2);
    const auto basis = baseline_basis(c, 5, 3);
    std::vector<SubjectData> subjects;
    std::vector<Eigen::Vector2d> b;
    std::mt19937_64 rng(1);
    std::normal_distribution<double> g(0.0, 0.1);
    for (std::size_t i = 0; i < c.size(); ++i) {
        subjects.push_back(make_subject_data(c.subject(i), c.measurements_of(i), basis, kBothCovariates));
        b.emplace_back(g(rng), g(rng));
    }
    Theta th = unit_theta(basis, 2);
    th.alpha = 2.0;
    th.gamma = {0.5, 1.0};
    const double serial = total_log_likelihood_serial(th, b, subjects);
    for (int workers : {1, 2, 4, 7}) EXPECT_EQ(total_log_likelihood(th, b, subjects, workers), serial) << workers;
}

TEST(JointFit, BaselineBasisKnotsAtEventTimeQuantiles)
{
    std::vector<SurvivalRecord> s;
    std::vector<LongitudinalRecord> m;
    for (int i = 1; i <= 9; ++i) {
        s.push_back({test::id(i), static_cast<double>(i), i % 2 == 1, {}});
        m.push_back({test::id(i), 0.0, 0.0});
    }
    const auto basis = baseline_basis(Cohort::create(s, m, {}), 1, 3);
    ASSERT_EQ(basis.interior_knots().size(), 1u);
    EXPECT_DOUBLE_EQ(basis.interior_knots()[0], 5.0); // median of event times {1, 3, 5, 7, 9}
    EXPECT_EQ(basis.lower(), 0.0);
    EXPECT_EQ(basis.upper(), 9.0);
}

TEST(JointFit, TooFewSubjectsIsInfeasible)
{
    EXPECT_THROW(fit_joint(test::scenario_cohort(1, 10, 3), quick_spec(1)), InfeasibleFit);
}

TEST(JointFit, DrawShapeDeterminismAndValidity)
{
    const auto c = test::scenario_cohort(1, 120, 4);
    auto spec = quick_spec(11);
    const auto a = fit_joint(c, spec);
    ASSERT_EQ(a.n_chains, 2);
    ASSERT_EQ(a.draws.size(), static_cast<std::size_t>(2 * spec.mcmc.draws_per_chain()));
    EXPECT_EQ(a.covariate_names, (std::vector<std::string>{"w1", "w2"}));
    for (const auto& th : a.draws) {
        const Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(th.D);
        ASSERT_GE(es.eigenvalues().minCoeff(), 0.0);
        ASSERT_GT(th.sigma, 0.0);
        ASSERT_EQ(th.baseline.size(), a.basis.size());
    }
    ASSERT_EQ(a.random_effect_means.size(), c.size());

    const auto b = fit_joint(c, spec);
    ASSERT_EQ(a.draws.size(), b.draws.size());
    for (std::size_t i = 0; i < a.draws.size(); ++i) ASSERT_EQ(a.flatten(a.draws[i]), b.flatten(b.draws[i]));

    spec.chain_workers = 2;
    const auto p = fit_joint(c, spec);
    for (std::size_t i = 0; i < a.draws.size(); ++i) ASSERT_EQ(a.flatten(a.draws[i]), p.flatten(p.draws[i]));

    spec.chain_workers = 1;
    spec.mcmc.seed = 12;
    const auto other = fit_joint(c, spec);
    EXPECT_NE(a.flatten(a.draws.back()), other.flatten(other.draws.back()));
}

TEST(JointFit, FlattenRoundTripAndColumns)
{
    const auto c = test::scenario_cohort(1, 60, 5);
    auto spec = quick_spec(3);
    spec.mcmc.n_iterations = 300;
    spec.mcmc.n_burnin = 100;
    const auto fit = fit_joint(c, spec);
    const auto cols = fit.column_names();
    EXPECT_EQ(cols.front(), "beta0");
    EXPECT_EQ(cols[2], "gamma_w1");
    EXPECT_EQ(cols[4], "alpha");
    EXPECT_EQ(cols.size(), 9 + fit.basis.size());
    for (const auto& th : fit.draws) {
        const auto row = fit.flatten(th);
        ASSERT_EQ(row.size(), cols.size());
        ASSERT_EQ(fit.flatten(fit.unflatten(row)), row);
    }
    const auto trace = fit.trace("alpha");
    ASSERT_EQ(trace.size(), fit.draws.size());
    EXPECT_EQ(trace[0], fit.draws[0].alpha);
}

TEST(JointFit, AlphaIsRecoveredOnScenarioOne)
{
    const auto fit = fit_joint(test::scenario_cohort(1, 500, 4), JointModelSpec{});
    const auto mean = fit.posterior_mean();
    EXPECT_NEAR(mean.alpha, 4.5, 0.9);
    EXPECT_GT(mean.gamma[0], 0.0);
    EXPECT_GT(mean.gamma[1], mean.gamma[0]);
}

TEST(JointFit, CredibleIntervalCoversZeroUnderTheNull)
{
    auto cfg = simgen::scenario_preset(1);
    cfg.event.alpha = 0.0;
    cfg.n = 200;
    int covered = 0;
    for (int rep = 0; rep < 20; ++rep) {
        const auto c = simgen::generate_scenario(cfg, derive_seed(77, rep), simgen::GeneratorMode::numeric);
        auto spec = quick_spec(derive_seed(78, rep));
        spec.mcmc.n_iterations = 2000;
        spec.mcmc.n_burnin = 1000;
        spec.keep_random_effect_draws = false;
        auto alpha = fit_joint(c, spec).trace("alpha");
        std::sort(alpha.begin(), alpha.end());
        const double lo = alpha[static_cast<std::size_t>(0.025 * static_cast<double>(alpha.size()))];
        const double hi = alpha[static_cast<std::size_t>(0.975 * static_cast<double>(alpha.size() - 1))];
        covered += lo <= 0.0 && 0.0 <= hi;
    }
    EXPECT_GE(covered, 16);
}

TEST(JointFit, SplitRhat)
{
    std::mt19937_64 rng(1);
    std::normal_distribution<double> g;
    std::vector<std::vector<double>> iid(4, std::vector<double>(2000));
    for (auto& c : iid)
        for (auto& x : c) x = g(rng);
    EXPECT_NEAR(split_rhat(iid), 1.0, 0.01);

    auto shifted = iid;
    for (auto& x : shifted[0]) x += 3.0;
    EXPECT_GT(split_rhat(shifted), 1.1);

    // a chain that drifts is caught by splitting even when it is alone
    std::vector<std::vector<double>> drift(1, std::vector<double>(1000));
    for (std::size_t i = 0; i < 1000; ++i) drift[0][i] = g(rng) + (i < 500 ? 0.0 : 4.0);
    EXPECT_GT(split_rhat(drift), 1.5);

    EXPECT_TRUE(std::isnan(split_rhat({{1.0, 2.0}})));
}

TEST(JointFit, McmcConfigValidation)
{
    McmcConfig m;
    EXPECT_NO_THROW(m.validate());
    EXPECT_EQ(m.draws_per_chain(), 1000);
    m.n_burnin = m.n_iterations;
    EXPECT_THROW(m.validate(), InvalidArgument);
}
