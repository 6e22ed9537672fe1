#pragma once

#include <array>
#include <functional>

namespace jdp {

/// Fixed 15-node Gauss–Legendre rule on [-1, 1]. Exact for polynomials of
/// degree <= 29.
struct GaussLegendre15 {
    static constexpr int size = 15;
    std::array<double, size> nodes{};
    std::array<double, size> weights{};

    static const GaussLegendre15& instance();

    /// Maps the rule onto [a, b]: fills node positions and scaled weights.
    void map(double a, double b, std::array<double, size>& x, std::array<double, size>& w) const;

    template <class F>
    double integrate(F&& f, double a, double b) const
    {
        const double half = 0.5 * (b - a);
        const double mid = 0.5 * (b + a);
        double acc = 0.0;
        for (int k = 0; k < size; ++k) acc += weights[k] * f(mid + half * nodes[k]);
        return half * acc;
    }
};

struct AdaptiveResult {
    double value = 0.0;
    double error_estimate = 0.0;
};

/// Adaptive Gauss–Kronrod (7/15) quadrature, falling back to tanh-sinh when
/// the error bound is not met (endpoint singularities). Throws ConvergenceError if the
/// error estimate exceeds `abs_tol` (relaxed to a few ulps of |value| for
/// integrals too large for an absolute bound to be representable).
AdaptiveResult integrate_adaptive(const std::function<double(double)>& f, double a, double b,
                                  double abs_tol = 1e-10);

} // namespace jdp
