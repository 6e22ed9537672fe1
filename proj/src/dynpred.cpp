#include "jdp/dynpred.hpp"

#include "jdp/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace jdp::dynpred {

namespace {

// Hazard integral split at the spline boundary so the flat extrapolation
// does not put a kink inside one quadrature panel.
double hazard_between(const joint::Theta& theta, const BSplineBasis& basis, const Eigen::Vector2d& b,
                      std::span<const double> w, double from, double to)
{
    if (to <= from) return 0.0;
    const double edge = basis.upper();
    if (from < edge && edge < to)
        return joint::cumulative_hazard(theta, basis, b, w, from, edge) +
               joint::cumulative_hazard(theta, basis, b, w, edge, to);
    return joint::cumulative_hazard(theta, basis, b, w, from, to);
}

Eigen::Matrix2d symmetric_sqrt_factor(const Eigen::Matrix2d& cov)
{
    const Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(0.5 * (cov + cov.transpose()));
    const Eigen::Vector2d ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal();
}

} // namespace

void PredictionRequest::validate() const
{
    if (!(t >= 0.0) || !std::isfinite(t)) throw InvalidArgument("landmark t must be finite and non-negative");
    if (!(u >= t) || !std::isfinite(u)) throw InvalidArgument("horizon u must be finite and >= t");
    if (n_mc < 1) throw InvalidArgument("n_mc must be >= 1");
    for (const auto& h : history)
        if (h.time > t) throw InvalidArgument("history contains a measurement after the landmark time");
}

std::pair<Eigen::Vector2d, Eigen::Matrix2d> gaussian_conditional(const joint::Theta& theta,
                                                                 std::span<const HistoryPoint> history)
{
    Eigen::Matrix2d G = Eigen::Matrix2d::Zero();
    Eigen::Vector2d r = Eigen::Vector2d::Zero();
    for (const auto& h : history) {
        const double resid = h.value - theta.beta(0) - theta.beta(1) * h.time;
        G(0, 0) += 1.0;
        G(0, 1) += h.time;
        G(1, 1) += h.time * h.time;
        r(0) += resid;
        r(1) += h.time * resid;
    }
    G(1, 0) = G(0, 1);
    const double s2 = theta.sigma * theta.sigma;
    // (D^-1 + G/s2)^-1 = D (s2 I + G D)^-1 s2, which stays finite for singular D
    const Eigen::Matrix2d K = (s2 * Eigen::Matrix2d::Identity() + G * theta.D).inverse();
    const Eigen::Vector2d mean = theta.D * K * r;
    Eigen::Matrix2d cov = s2 * theta.D * K;
    cov = 0.5 * (cov + cov.transpose());
    return {mean, cov};
}

Eigen::Vector2d sample_subject_effects(const joint::Theta& theta, const BSplineBasis& basis,
                                       const PredictionRequest& request, Rng& rng, int steps)
{
    const auto [mean, cov] = gaussian_conditional(theta, request.history);
    const Eigen::Matrix2d factor = symmetric_sqrt_factor(cov);
    std::normal_distribution<double> z;
    std::uniform_real_distribution<double> unif(0.0, 1.0);

    Eigen::Vector2d b = mean;
    double log_s = -hazard_between(theta, basis, b, request.covariates, 0.0, request.t);
    for (int k = 0; k < steps; ++k) {
        const Eigen::Vector2d prop = mean + factor * Eigen::Vector2d(z(rng), z(rng));
        const double log_s_prop = -hazard_between(theta, basis, prop, request.covariates, 0.0, request.t);
        const double log_ratio = log_s_prop - log_s;
        if (std::isfinite(log_s_prop) && std::log(unif(rng)) < log_ratio) {
            b = prop;
            log_s = log_s_prop;
        }
    }
    return b;
}

std::vector<PredictionResult> predict_survival_horizons(const joint::JointModelFit& fit,
                                                        const PredictionRequest& request,
                                                        std::span<const double> horizons, bool keep_ratios)
{
    if (fit.draws.empty()) throw InvalidArgument("fit has no posterior draws");
    if (request.covariates.size() != fit.covariate_names.size())
        throw InvalidArgument("request has " + std::to_string(request.covariates.size()) + " covariates, fit expects " +
                              std::to_string(fit.covariate_names.size()));
    for (double h : horizons) {
        PredictionRequest probe = request;
        probe.u = h;
        probe.validate();
    }

    std::vector<std::size_t> order(horizons.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return horizons[a] < horizons[b]; });

    const auto n_mc = static_cast<std::size_t>(request.n_mc);
    const std::size_t n_draws = fit.draws.size();
    std::vector<std::vector<double>> ratios(horizons.size(), std::vector<double>(n_mc, 1.0));

    Rng rng(request.seed);
    for (std::size_t l = 0; l < n_mc; ++l) {
        const std::size_t idx = static_cast<std::size_t>((static_cast<unsigned __int128>(l) * n_draws) / n_mc);
        const joint::Theta& theta = fit.draws[idx];
        const Eigen::Vector2d b = sample_subject_effects(theta, fit.basis, request, rng);
        double cum = 0.0;
        double from = request.t;
        for (std::size_t j : order) {
            cum += hazard_between(theta, fit.basis, b, request.covariates, from, horizons[j]);
            from = std::max(from, horizons[j]);
            ratios[j][l] = std::exp(-cum);
        }
    }

    std::vector<PredictionResult> out(horizons.size());
    for (std::size_t j = 0; j < horizons.size(); ++j) {
        const auto& r = ratios[j];
        auto& res = out[j];
        res.extrapolated = horizons[j] > fit.basis.upper();
        if (horizons[j] == request.t) {
            res.pi_hat = 1.0;
            res.mc_std_error = 0.0;
        } else {
            const double n = static_cast<double>(r.size());
            const double mean = std::accumulate(r.begin(), r.end(), 0.0) / n;
            double ss = 0.0;
            for (double x : r) ss += (x - mean) * (x - mean);
            res.pi_hat = std::clamp(mean, 0.0, 1.0);
            res.mc_std_error = r.size() > 1 ? std::sqrt(ss / (n - 1.0)) / std::sqrt(n) : 0.0;
        }
        if (keep_ratios) res.ratios = r;
    }
    return out;
}

PredictionResult predict_survival(const joint::JointModelFit& fit, const PredictionRequest& request, bool keep_ratios)
{
    request.validate();
    const double h[1] = {request.u};
    return predict_survival_horizons(fit, request, h, keep_ratios).front();
}

} // namespace jdp::dynpred
