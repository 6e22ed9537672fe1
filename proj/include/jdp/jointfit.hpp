#pragma once

#include "jdp/bspline.hpp"
#include "jdp/dataset.hpp"
#include "jdp/lme.hpp"
#include "jdp/quadrature.hpp"

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace jdp::joint {

/// log h0(t) = intercept + sum_q coefficients[q] B_q(t).
struct BaselineHazardSpline {
    BSplineBasis basis;
    double intercept = 0.0;
    std::vector<double> coefficients;
};

/// Beyond the basis span the log-hazard is held flat at the boundary value
/// and `*extrapolated` is set.
double log_baseline_hazard(const BaselineHazardSpline& spline, double t, bool* extrapolated = nullptr);

struct McmcConfig {
    int n_iterations = 3500;
    int n_burnin = 1500;
    int n_thin = 2;
    int n_chains = 2;
    std::uint64_t seed = 1;

    void validate() const;
    int draws_per_chain() const { return (n_iterations - n_burnin) / n_thin; }
};

struct JointModelSpec {
    int n_internal_knots = 5; // at quantiles of the observed event times
    int degree = 3;
    std::vector<std::string> covariates; // empty: the whole cohort schema
    McmcConfig mcmc;

    bool fix_association_zero = false;   // alpha held at 0
    bool keep_random_effect_draws = true; // per-draw b_i (memory heavy)
    int chain_workers = 1;                // chains run concurrently when > 1
    int min_subjects = 30;
};

/// One joint-model parameter vector. `baseline` holds the spline coefficients;
/// the spline intercept is fixed at 0 (the B-spline basis already sums to 1).
struct Theta {
    Eigen::Vector2d beta = Eigen::Vector2d::Zero();
    std::vector<double> gamma;
    double alpha = 0.0;
    Eigen::Matrix2d D = Eigen::Matrix2d::Identity();
    double sigma = 1.0;
    std::vector<double> baseline;
};

/// Everything about one subject that stays fixed while sampling: outcome,
/// covariates, biomarker sufficient statistics, and the spline basis at the
/// event time and at the quadrature nodes on [0, T]. The nodes are a
/// 15-point Gauss–Legendre rule on each knot span of the baseline basis, so
/// the integrand is smooth on every panel.
struct SubjectData {
    double T = 0.0;
    bool event = false;
    std::vector<double> w;
    lme::SubjectMoments moments;
    std::vector<double> node_time;
    std::vector<double> node_weight;
    std::vector<double> node_basis;  // nodes x basis size, row-major
    std::vector<double> event_basis; // basis at T
};

SubjectData make_subject_data(const SurvivalRecord& subject, std::span<const LongitudinalRecord> measurements,
                              const BSplineBasis& basis, std::span<const std::size_t> covariate_columns);

/// Log-density pieces of one subject given b_i. Their sum is the subject's
/// contribution to the joint posterior (without the theta prior).
double survival_log_likelihood(const Theta& theta, const Eigen::Vector2d& b, const SubjectData& s);
double longitudinal_log_likelihood(const Theta& theta, const Eigen::Vector2d& b, const SubjectData& s);
double random_effect_log_density(const Eigen::Matrix2d& D, const Eigen::Vector2d& b);
double subject_log_likelihood(const Theta& theta, const Eigen::Vector2d& b, const SubjectData& s);

/// Sum of subject_log_likelihood over all subjects. The OpenMP version fills
/// a per-subject buffer and reduces it in subject order, so both versions
/// return the same bits.
double total_log_likelihood_serial(const Theta& theta, std::span<const Eigen::Vector2d> b,
                                   std::span<const SubjectData> subjects);
double total_log_likelihood(const Theta& theta, std::span<const Eigen::Vector2d> b,
                            std::span<const SubjectData> subjects, int workers);

/// Integral over [from, to] of h0(s) exp(gamma'w + alpha m(s)), 15-node
/// Gauss–Legendre, with m(s) = beta0 + b0 + (beta1 + b1) s.
double cumulative_hazard(const Theta& theta, const BSplineBasis& basis, const Eigen::Vector2d& b,
                         std::span<const double> w, double from, double to);

struct AcceptanceRates {
    double random_effects = 0.0;
    double beta = 0.0;
    double gamma_alpha = 0.0;
    double baseline = 0.0;
    double variance = 0.0;
};

struct JointModelFit {
    JointModelSpec spec;
    std::vector<std::string> covariate_names;
    BSplineBasis basis;
    std::vector<Theta> draws; // chain-major
    int n_chains = 0;

    std::vector<std::string> subject_ids;
    std::vector<std::vector<Eigen::Vector2d>> random_effect_draws; // [draw][subject], if kept
    std::vector<Eigen::Vector2d> random_effect_means;

    AcceptanceRates acceptance;
    double rhat_alpha = 1.0;
    bool converged = true;

    Theta posterior_mean() const;
    std::vector<double> trace(const std::string& column) const;

    /// Flattened draw matrix column names: beta0, beta1, gamma_<cov>..., alpha,
    /// D11, D12, D22, sigma, baseline_0...
    std::vector<std::string> column_names() const;
    std::vector<double> flatten(const Theta& theta) const;
    Theta unflatten(std::span<const double> row) const;
};

/// Bayesian fit by adaptive Metropolis-within-Gibbs. Throws InfeasibleFit
/// for cohorts below spec.min_subjects or when the longitudinal starting fit
/// fails.
JointModelFit fit_joint(const Cohort& cohort, const JointModelSpec& spec);

/// Knots at quantiles {1/(Q+1), ..., Q/(Q+1)} of the observed event times
/// (all observed times when events are too few); span [0, max observed time].
BSplineBasis baseline_basis(const Cohort& cohort, int n_internal_knots, int degree);

/// Split-chain potential scale reduction factor.
double split_rhat(const std::vector<std::vector<double>>& chains);

} // namespace jdp::joint
