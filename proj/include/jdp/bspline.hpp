#pragma once

#include <span>
#include <vector>

namespace jdp {

/// Clamped B-spline basis on [lower, upper] with the given interior knots.
/// The basis has interior_knots.size() + degree + 1 functions and forms a
/// partition of unity on the span.
class BSplineBasis {
public:
    BSplineBasis() = default;
    BSplineBasis(double lower, double upper, std::vector<double> interior_knots, int degree);

    int degree() const noexcept { return degree_; }
    double lower() const noexcept { return lower_; }
    double upper() const noexcept { return upper_; }
    const std::vector<double>& interior_knots() const noexcept { return interior_; }
    std::size_t size() const noexcept { return interior_.size() + static_cast<std::size_t>(degree_) + 1; }

    bool contains(double t) const noexcept { return t >= lower_ && t <= upper_; }

    /// Writes all basis values at t into `out` (size()). Points outside the
    /// span are clamped to the nearest boundary; the return value is false
    /// in that case.
    bool evaluate(double t, std::span<double> out) const;

    std::vector<double> evaluate(double t) const;

private:
    double lower_ = 0.0;
    double upper_ = 1.0;
    std::vector<double> interior_;
    std::vector<double> knots_; // full clamped knot vector
    int degree_ = 0;
};

} // namespace jdp
