#pragma once

#include "jdp/jointfit.hpp"
#include "jdp/random.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace jdp::dynpred {

struct HistoryPoint {
    double time = 0.0;
    double value = 0.0;
};

struct PredictionRequest {
    std::vector<HistoryPoint> history; // all times <= t
    std::vector<double> covariates;    // ordered as the fit's covariate_names
    double t = 0.0;                    // landmark: the subject is known to be event-free at t
    double u = 0.0;                    // horizon, u >= t
    int n_mc = 400;
    std::uint64_t seed = 1;

    void validate() const;
};

struct PredictionResult {
    double pi_hat = 1.0;
    double mc_std_error = 0.0;
    bool extrapolated = false; // u lies beyond the baseline-spline span
    std::vector<double> ratios; // per-draw S(u)/S(t), when requested
};

/// Gaussian conditional of b given the history alone: mean and covariance of
/// p(b | Y; theta) for the linear mixed model. Valid for singular D.
std::pair<Eigen::Vector2d, Eigen::Matrix2d> gaussian_conditional(const joint::Theta& theta,
                                                                 std::span<const HistoryPoint> history);

/// One draw from p(b | T* > t, Y(t); theta) after `steps` independence
/// Metropolis–Hastings moves proposed from the Gaussian conditional and
/// started at its mean. The acceptance ratio reduces to S(t|b') / S(t|b).
Eigen::Vector2d sample_subject_effects(const joint::Theta& theta, const BSplineBasis& basis,
                                       const PredictionRequest& request, Rng& rng, int steps = 25);

/// pi(u | t) averaged over n_mc posterior draws (spread evenly over the
/// retained draws, cycling when n_mc exceeds them) with b re-sampled per draw.
PredictionResult predict_survival(const joint::JointModelFit& fit, const PredictionRequest& request,
                                  bool keep_ratios = false);

/// Same as predict_survival for every horizon in `horizons` (each >= t) with
/// common random numbers: one (theta, b) pair per Monte-Carlo index serves all
/// horizons, and the hazard is integrated piecewise between sorted horizons,
/// so the estimates are non-increasing in the horizon. `request.u` is ignored.
std::vector<PredictionResult> predict_survival_horizons(const joint::JointModelFit& fit,
                                                        const PredictionRequest& request,
                                                        std::span<const double> horizons, bool keep_ratios = false);

} // namespace jdp::dynpred
