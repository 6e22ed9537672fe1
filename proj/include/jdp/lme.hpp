#pragma once

#include "jdp/dataset.hpp"

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace jdp::lme {

/// Maximum-likelihood fit of Y_ij = (beta0 + b0i) + (beta1 + b1i) t_ij + e_ij,
/// b_i ~ N(0, D), e_ij ~ N(0, sigma^2).
struct LmeFit {
    Eigen::Vector2d beta = Eigen::Vector2d::Zero();
    Eigen::Matrix2d D = Eigen::Matrix2d::Zero();
    double sigma = 0.0;
    double loglik = 0.0;

    std::vector<std::string> subject_ids; // cohort order
    std::vector<Eigen::Vector2d> b;       // empirical Bayes effects, parallel to subject_ids
    std::vector<Eigen::Matrix2d> b_cov;   // conditional covariance of b_i given Y_i

    Eigen::Matrix2d beta_cov = Eigen::Matrix2d::Zero(); // sampling covariance of beta_hat

    int iterations = 0;
    std::vector<double> loglik_trace; // accepted iterates, non-decreasing
    bool psd_projected = false;       // D was singular and projected
};

struct LmeOptions {
    int max_iterations = 500;
    double tolerance = 1e-8; // on successive log-likelihoods
};

/// Subject-level sufficient statistics of the intercept+slope design.
struct SubjectMoments {
    double n = 0, st = 0, stt = 0, sy = 0, sty = 0, syy = 0;
};

SubjectMoments subject_moments(std::span<const LongitudinalRecord> measurements);

/// Throws InvalidArgument when fewer than two subjects carry two or more
/// distinct measurement times (the random slope is then not identifiable),
/// and ConvergenceError after max_iterations.
LmeFit fit_lme(const Cohort& cohort, const LmeOptions& options = {});

double predict_trajectory(const LmeFit& fit, const std::string& subject_id, double t);

/// Nearest (Frobenius) positive semidefinite matrix; `projected` reports
/// whether anything changed.
Eigen::Matrix2d nearest_psd(const Eigen::Matrix2d& m, bool* projected = nullptr);

} // namespace jdp::lme
