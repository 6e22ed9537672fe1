#pragma once

#include "jdp/dataset.hpp"

#include <Eigen/Dense>

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace jdp::fpca {

struct FpcaOptions {
    double variance_threshold = 0.95; // S in (0, 1]
    std::optional<double> mean_bandwidth; // fixed bandwidths skip GCV
    std::optional<double> cov_bandwidth;
    std::size_t min_subjects = 10;
};

/// Functional principal components of sparse trajectories on a fixed grid.
struct FpcaModel {
    std::vector<double> grid;
    std::vector<double> weights; // trapezoid quadrature weights on the grid
    std::vector<double> mean;    // mu on the grid

    Eigen::MatrixXd eigenfunctions;  // grid x components, orthonormal under `weights`
    std::vector<double> eigenvalues; // positive, non-increasing
    std::vector<double> explained;   // cumulative fraction per component
    double noise_variance = 0.0;
    int r = 0; // components retained by the variance threshold
    bool degenerate = false; // no variation left after smoothing

    double mean_bandwidth = 0.0;
    double cov_bandwidth = 0.0;

    std::vector<std::string> subject_ids; // fitting set, cohort order
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> scores; // subjects x r

    double mean_at(double t) const;
    double eigenfunction_at(int k, double t) const;

    /// Row of `scores` for a fitted subject, or nullptr.
    const double* scores_of(const std::string& subject_id) const;
};

/// PACE: local-linear mean, local-linear covariance surface from off-diagonal
/// raw products, eigendecomposition under trapezoid weights, conditional-
/// expectation scores. Throws InvalidArgument with fewer than
/// options.min_subjects subjects carrying measurements.
FpcaModel fit_fpca(const Cohort& cohort, std::vector<double> grid, const FpcaOptions& options = {});

/// n equispaced points on [lower, upper].
std::vector<double> equispaced_grid(double lower, double upper, int n = 51);

/// Conditional-expectation scores of one subject (length model.r) from the
/// measurements inside the grid span. Throws InvalidArgument when none are.
std::vector<double> scores_for_subject(const FpcaModel& model, std::span<const LongitudinalRecord> measurements);

/// |<phi_a_k, phi_b_k>| for k < min(a.r, b.r), with b interpolated onto a's grid.
/// Values near 1 mean the two fits found the same directions.
std::vector<double> basis_alignment(const FpcaModel& a, const FpcaModel& b);

/// One-dimensional local-linear smoother with a Gaussian kernel, exposed for
/// testing. Returns nullopt where the local design is singular.
std::optional<double> local_linear(std::span<const double> x, std::span<const double> y, double x0, double h);

} // namespace jdp::fpca
