#include "jdp/dynpred.hpp"
#include "jdp/error.hpp"

#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>

using namespace jdp;
using namespace jdp::dynpred;

namespace {

joint::Theta base_theta(const BSplineBasis& basis)
{
    joint::Theta th;
    th.beta << -1.35, 0.3;
    th.gamma = {0.5};
    th.alpha = 0.0;
    th.D << 0.0729, 0.00432, 0.00432, 0.0064;
    th.sigma = 0.25;
    th.baseline.assign(basis.size(), 0.0);
    return th;
}

joint::JointModelFit fake_fit(std::vector<joint::Theta> draws, const BSplineBasis& basis)
{
    joint::JointModelFit fit;
    fit.covariate_names = {"w"};
    fit.basis = basis;
    fit.draws = std::move(draws);
    fit.n_chains = 1;
    return fit;
}

PredictionRequest request(double t, double u, int n_mc, std::uint64_t seed)
{
    PredictionRequest r;
    r.history = {{0.0, -1.2}, {0.5, -1.0}, {1.0, -0.9}};
    r.covariates = {0.4};
    r.t = t;
    r.u = u;
    r.n_mc = n_mc;
    r.seed = seed;
    return r;
}

} // namespace

TEST(DynPred, GaussianConditionalMatchesDensePosterior)
{
    const BSplineBasis basis(0.0, 8.0, {2.0, 4.0}, 3);
    const auto th = base_theta(basis);
    const std::vector<HistoryPoint> h{{0.0, -1.2}, {0.5, -1.0}, {1.0, -0.9}};
    const auto [mean, cov] = gaussian_conditional(th, h);

    Eigen::Matrix<double, 3, 2> Z;
    Eigen::Vector3d r;
    for (int j = 0; j < 3; ++j) {
        Z(j, 0) = 1.0;
        Z(j, 1) = h[static_cast<std::size_t>(j)].time;
        r(j) = h[static_cast<std::size_t>(j)].value - th.beta(0) - th.beta(1) * h[static_cast<std::size_t>(j)].time;
    }
    const double s2 = th.sigma * th.sigma;
    const Eigen::Matrix2d post = (th.D.inverse() + Z.transpose() * Z / s2).inverse();
    const Eigen::Vector2d m = post * Z.transpose() * r / s2;
    EXPECT_NEAR((cov - post).cwiseAbs().maxCoeff(), 0.0, 1e-14);
    EXPECT_NEAR((mean - m).cwiseAbs().maxCoeff(), 0.0, 1e-14);

    const auto [m0, c0] = gaussian_conditional(th, {});
    EXPECT_EQ(m0, Eigen::Vector2d::Zero());
    EXPECT_NEAR((c0 - th.D).cwiseAbs().maxCoeff(), 0.0, 1e-16);
}

TEST(DynPred, NoHistoryAtTimeZeroDrawsFromThePrior)
{
    const BSplineBasis basis(0.0, 8.0, {2.0, 4.0}, 3);
    auto th = base_theta(basis);
    th.alpha = 4.5;
    PredictionRequest req;
    req.covariates = {0.0};
    req.t = 1e-9;
    req.u = 1.0;
    Rng rng(3);
    const int n = 10000;
    Eigen::Matrix2d acc = Eigen::Matrix2d::Zero();
    Eigen::Vector2d sum = Eigen::Vector2d::Zero();
    for (int i = 0; i < n; ++i) {
        const auto b = sample_subject_effects(th, basis, req, rng);
        sum += b;
        acc += b * b.transpose();
    }
    const Eigen::Vector2d mean = sum / n;
    const Eigen::Matrix2d cov = acc / n - mean * mean.transpose();
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) EXPECT_NEAR(cov(i, j), th.D(i, j), 0.15 * std::abs(th.D(i, j))) << i << j;
}

TEST(DynPred, ExactHistoryPinsTheEffects)
{
    const BSplineBasis basis(0.0, 8.0, {}, 3);
    auto th = base_theta(basis);
    th.sigma = 1e-9;
    th.alpha = 1.0;
    PredictionRequest req;
    // on the line 0.1 + 0.5 t
    req.history = {{0.0, 0.1}, {0.5, 0.35}, {1.0, 0.6}};
    req.covariates = {0.0};
    req.t = 1.0;
    req.u = 2.0;
    Rng rng(4);
    for (int i = 0; i < 50; ++i) {
        const auto b = sample_subject_effects(th, basis, req, rng);
        EXPECT_NEAR(b(0), 0.1 - th.beta(0), 1e-6);
        EXPECT_NEAR(b(1), 0.5 - th.beta(1), 1e-6);
    }
}

TEST(DynPred, EffectsSamplerMatchesImportanceWeightedTarget)
{
    // Oracle: p(b | T > t, Y) is the Gaussian conditional reweighted by S(t | b).
    const BSplineBasis basis(0.0, 8.0, {2.0, 4.0}, 3);
    auto th = base_theta(basis);
    th.alpha = 4.5;
    th.baseline.assign(basis.size(), std::log(2.0));
    th.D << 0.3, 0.02, 0.02, 0.05;
    const auto req = request(1.0, 3.0, 1, 1);
    const auto [mean, cov] = gaussian_conditional(th, req.history);
    const Eigen::LLT<Eigen::Matrix2d> llt(cov);

    std::mt19937_64 rng(10);
    std::normal_distribution<double> z;
    double wsum = 0.0;
    Eigen::Vector2d wmean = Eigen::Vector2d::Zero();
    for (int i = 0; i < 200000; ++i) {
        const Eigen::Vector2d b = mean + llt.matrixL() * Eigen::Vector2d(z(rng), z(rng));
        const double w = std::exp(-joint::cumulative_hazard(th, basis, b, req.covariates, 0.0, req.t));
        wsum += w;
        wmean += w * b;
    }
    wmean /= wsum;

    Rng sampler(11);
    Eigen::Vector2d smean = Eigen::Vector2d::Zero();
    const int n = 20000;
    for (int i = 0; i < n; ++i) smean += sample_subject_effects(th, basis, req, sampler);
    smean /= n;
    EXPECT_NEAR(smean(0), wmean(0), 0.01);
    EXPECT_NEAR(smean(1), wmean(1), 0.005);
    // the conditioning on survival pulls the intercept down
    EXPECT_LT(wmean(0), mean(0));
}

TEST(DynPred, HorizonEqualToLandmarkIsOne)
{
    const BSplineBasis basis(0.0, 8.0, {2.0, 4.0}, 3);
    auto th = base_theta(basis);
    th.alpha = 3.0;
    const auto fit = fake_fit({th}, basis);
    const auto r = predict_survival(fit, request(1.0, 1.0, 50, 1));
    EXPECT_EQ(r.pi_hat, 1.0);
    EXPECT_EQ(r.mc_std_error, 0.0);
}

TEST(DynPred, ConstantHazardGivesExponentialSurvival)
{
    const BSplineBasis basis(0.0, 8.0, {2.0, 4.0}, 3);
    auto th = base_theta(basis);
    th.baseline.assign(basis.size(), std::log(0.2));
    const auto fit = fake_fit({th}, basis);
    const auto r = predict_survival(fit, request(1.0, 4.0, 20, 1));
    EXPECT_NEAR(r.pi_hat, std::exp(-0.2 * std::exp(0.5 * 0.4) * 3.0), 1e-13);
    EXPECT_NEAR(r.mc_std_error, 0.0, 1e-15);
}

TEST(DynPred, LinearBiomarkerHazardAgainstClosedForm)
{
    const BSplineBasis basis(0.0, 8.0, {2.0, 4.0}, 3);
    auto th = base_theta(basis);
    th.alpha = 2.0;
    th.D = Eigen::Matrix2d::Identity() * 1e-20;
    const auto fit = fake_fit({th}, basis);
    const auto r = predict_survival(fit, request(1.0, 5.0, 10, 1));
    // hazard exp(g w + a (beta0 + beta1 s)), integrated over [1, 5]
    const double c = th.alpha * th.beta(1);
    const double scale = std::exp(0.5 * 0.4 + th.alpha * th.beta(0));
    const double H = scale * (std::exp(c * 5.0) - std::exp(c * 1.0)) / c;
    EXPECT_NEAR(r.pi_hat, std::exp(-H), 1e-8);
}

TEST(DynPred, ExtrapolationIsFlagged)
{
    const BSplineBasis basis(0.0, 3.0, {1.5}, 3);
    const auto fit = fake_fit({base_theta(basis)}, basis);
    EXPECT_FALSE(predict_survival(fit, request(1.0, 2.9, 5, 1)).extrapolated);
    EXPECT_TRUE(predict_survival(fit, request(1.0, 3.5, 5, 1)).extrapolated);
}

TEST(DynPred, SeedReproducibilityAndMonteCarloScaling)
{
    const BSplineBasis basis(0.0, 8.0, {2.0, 4.0}, 3);
    std::vector<joint::Theta> draws;
    std::mt19937_64 rng(5);
    std::normal_distribution<double> g(0.0, 0.3);
    for (int i = 0; i < 400; ++i) {
        auto th = base_theta(basis);
        th.alpha = 3.0 + g(rng);
        th.baseline.assign(basis.size(), std::log(0.3) + g(rng));
        draws.push_back(th);
    }
    const auto fit = fake_fit(draws, basis);
    const auto a = predict_survival(fit, request(1.0, 4.0, 400, 9));
    const auto b = predict_survival(fit, request(1.0, 4.0, 400, 9));
    EXPECT_EQ(a.pi_hat, b.pi_hat);
    const auto c = predict_survival(fit, request(1.0, 4.0, 400, 10));
    EXPECT_NE(a.pi_hat, c.pi_hat);
    EXPECT_NEAR(a.pi_hat, c.pi_hat, 6.0 * a.mc_std_error);

    const auto small = predict_survival(fit, request(1.0, 4.0, 100, 9));
    const auto large = predict_survival(fit, request(1.0, 4.0, 1600, 9));
    const double ratio = small.mc_std_error / large.mc_std_error;
    EXPECT_GT(ratio, 3.0);
    EXPECT_LT(ratio, 5.3);
}

TEST(DynPred, HorizonsShareDrawsAndAreMonotone)
{
    const BSplineBasis basis(0.0, 8.0, {2.0, 4.0}, 3);
    auto th = base_theta(basis);
    th.alpha = 3.0;
    th.baseline.assign(basis.size(), std::log(0.5));
    const auto fit = fake_fit({th, th}, basis);
    const std::vector<double> hs{3.0, 1.0, 2.0, 1.5, 2.5};
    const auto res = predict_survival_horizons(fit, request(1.0, 0.0, 200, 3), hs);
    EXPECT_EQ(res[1].pi_hat, 1.0);
    EXPECT_GE(res[1].pi_hat, res[3].pi_hat);
    EXPECT_GE(res[3].pi_hat, res[2].pi_hat);
    EXPECT_GE(res[2].pi_hat, res[4].pi_hat);
    EXPECT_GE(res[4].pi_hat, res[0].pi_hat);
    // each horizon alone matches the shared computation
    const auto single = predict_survival(fit, request(1.0, 3.0, 200, 3));
    EXPECT_NEAR(single.pi_hat, res[0].pi_hat, 1e-12);
}

TEST(DynPred, RequestValidation)
{
    const BSplineBasis basis(0.0, 8.0, {}, 3);
    const auto fit = fake_fit({base_theta(basis)}, basis);
    EXPECT_THROW(predict_survival(fit, request(1.0, 0.5, 10, 1)), InvalidArgument);
    EXPECT_THROW(predict_survival(fit, request(0.8, 2.0, 10, 1)), InvalidArgument); // history after t
    auto r = request(1.0, 2.0, 10, 1);
    r.covariates = {};
    EXPECT_THROW(predict_survival(fit, r), InvalidArgument);
    EXPECT_THROW(predict_survival(fit, request(1.0, 2.0, 0, 1)), InvalidArgument);
}
