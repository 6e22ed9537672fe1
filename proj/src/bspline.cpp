#include "jdp/bspline.hpp"

#include "jdp/error.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace jdp {

namespace {
constexpr int max_degree = 7;
}

BSplineBasis::BSplineBasis(double lower, double upper, std::vector<double> interior_knots, int degree)
    : lower_(lower), upper_(upper), interior_(std::move(interior_knots)), degree_(degree)
{
    if (!(upper > lower) || !std::isfinite(lower) || !std::isfinite(upper))
        throw InvalidArgument("B-spline span must satisfy lower < upper");
    if (degree < 0 || degree > max_degree) throw InvalidArgument("B-spline degree must be in [0, 7]");
    double prev = lower;
    for (double k : interior_) {
        if (!(k > prev) || !(k < upper))
            throw InvalidArgument("B-spline interior knots must be strictly increasing inside the span");
        prev = k;
    }
    knots_.assign(static_cast<std::size_t>(degree_) + 1, lower_);
    knots_.insert(knots_.end(), interior_.begin(), interior_.end());
    knots_.insert(knots_.end(), static_cast<std::size_t>(degree_) + 1, upper_);
}

bool BSplineBasis::evaluate(double t, std::span<double> out) const
{
    const bool inside = contains(t);
    const double x = std::clamp(t, lower_, upper_);
    std::fill(out.begin(), out.end(), 0.0);

    // knot span index: knots_[span] <= x < knots_[span+1], right end closed
    const std::size_t p = static_cast<std::size_t>(degree_);
    const std::size_t n_basis = size();
    std::size_t span = p;
    if (x >= upper_) {
        span = n_basis - 1;
    } else {
        auto it = std::upper_bound(knots_.begin() + static_cast<long>(p), knots_.begin() + static_cast<long>(n_basis) + 1, x);
        span = static_cast<std::size_t>(it - knots_.begin()) - 1;
    }

    // Cox–de Boor triangle (The NURBS Book, A2.2)
    std::array<double, max_degree + 1> left{}, right{}, N{};
    N[0] = 1.0;
    for (std::size_t j = 1; j <= p; ++j) {
        left[j] = x - knots_[span + 1 - j];
        right[j] = knots_[span + j] - x;
        double saved = 0.0;
        for (std::size_t r = 0; r < j; ++r) {
            const double denom = right[r + 1] + left[j - r];
            const double temp = denom != 0.0 ? N[r] / denom : 0.0;
            N[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        N[j] = saved;
    }
    for (std::size_t r = 0; r <= p; ++r) out[span - p + r] = N[r];
    return inside;
}

std::vector<double> BSplineBasis::evaluate(double t) const
{
    std::vector<double> out(size());
    evaluate(t, out);
    return out;
}

} // namespace jdp
