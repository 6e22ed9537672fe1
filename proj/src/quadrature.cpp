#include "jdp/quadrature.hpp"

#include "jdp/error.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/quadrature/tanh_sinh.hpp>

#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace jdp {

namespace {

GaussLegendre15 build_rule()
{
    GaussLegendre15 rule;
    constexpr int n = GaussLegendre15::size;
    // Newton iteration on P_n from the Chebyshev-like initial guesses.
    for (int i = 0; i < (n + 1) / 2; ++i) {
        double x = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
        double dp = 0.0;
        for (int it = 0; it < 100; ++it) {
            double p0 = 1.0, p1 = x;
            for (int k = 2; k <= n; ++k) {
                const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                p0 = p1;
                p1 = p2;
            }
            dp = n * (x * p1 - p0) / (x * x - 1.0);
            const double dx = p1 / dp;
            x -= dx;
            if (std::abs(dx) < 1e-16) break;
        }
        // recompute derivative at the converged node
        double p0 = 1.0, p1 = x;
        for (int k = 2; k <= n; ++k) {
            const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
            p0 = p1;
            p1 = p2;
        }
        dp = n * (x * p1 - p0) / (x * x - 1.0);
        const double w = 2.0 / ((1.0 - x * x) * dp * dp);
        rule.nodes[i] = -x;
        rule.nodes[n - 1 - i] = x;
        rule.weights[i] = w;
        rule.weights[n - 1 - i] = w;
    }
    rule.nodes[n / 2] = 0.0;
    return rule;
}

} // namespace

const GaussLegendre15& GaussLegendre15::instance()
{
    static const GaussLegendre15 rule = build_rule();
    return rule;
}

void GaussLegendre15::map(double a, double b, std::array<double, size>& x, std::array<double, size>& w) const
{
    const double half = 0.5 * (b - a);
    const double mid = 0.5 * (b + a);
    for (int k = 0; k < size; ++k) {
        x[k] = mid + half * nodes[k];
        w[k] = half * weights[k];
    }
}

AdaptiveResult integrate_adaptive(const std::function<double(double)>& f, double a, double b, double abs_tol)
{
    if (a == b) return {};
    double err = 0.0;
    double value = boost::math::quadrature::gauss_kronrod<double, 15>::integrate(f, a, b, 15, 1e-14, &err);
    auto bound = [&] { return std::max(abs_tol, 64.0 * std::numeric_limits<double>::epsilon() * std::abs(value)); };
    if (std::isfinite(value) && err <= bound()) return {value, err};

    // endpoint singularities in a derivative defeat Gauss–Kronrod; the
    // double-exponential rule clusters nodes at the ends instead
    try {
        thread_local boost::math::quadrature::tanh_sinh<double> ts;
        double l1 = 0.0;
        value = ts.integrate(f, a, b, 1e-15, &err, &l1);
    } catch (const std::exception&) {
        value = std::numeric_limits<double>::quiet_NaN();
    }
    if (!std::isfinite(value) || err > bound()) {
        std::ostringstream msg;
        msg << "adaptive quadrature on [" << a << ", " << b << "] did not converge: value=" << value
            << " error estimate=" << err;
        throw ConvergenceError(msg.str());
    }
    return {value, err};
}

} // namespace jdp
