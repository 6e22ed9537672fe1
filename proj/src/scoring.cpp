#include "jdp/scoring.hpp"

#include "jdp/error.hpp"

#include <cmath>
#include <numbers>
#include <numeric>

namespace jdp::scoring {

namespace {

void check_probability(double p, const char* what)
{
    if (!(p >= 0.0 && p <= 1.0)) throw InvalidArgument(std::string(what) + " must lie in [0, 1]");
}

} // namespace

bool needs_censored_prediction(double T, bool delta, double u)
{
    return !delta && T < u;
}

SubjectLoss subject_loss(std::string subject_id, double T, bool delta, double pi_u_given_t,
                         std::optional<double> pi_u_given_T, double t, double u)
{
    if (!(T >= t)) throw InvalidArgument("subject " + subject_id + " is not at risk at the landmark time");
    check_probability(pi_u_given_t, "pi(u|t)");
    SubjectLoss out;
    out.subject_id = std::move(subject_id);
    const double miss = 1.0 - pi_u_given_t;
    if (T >= u) {
        out.branch = LossBranch::survived;
        out.loss = miss * miss;
    } else if (delta) {
        out.branch = LossBranch::event;
        out.loss = pi_u_given_t * pi_u_given_t;
    } else {
        if (!pi_u_given_T)
            throw InvalidArgument("subject " + out.subject_id + " is censored before u; pi(u|T) is required");
        check_probability(*pi_u_given_T, "pi(u|T)");
        const double w = *pi_u_given_T;
        out.branch = LossBranch::censored;
        out.loss = w * miss * miss + (1.0 - w) * pi_u_given_t * pi_u_given_t;
    }
    return out;
}

BrierEstimate brier(std::span<const SubjectLoss> losses, std::size_t R_t, double t, double u)
{
    if (R_t == 0) throw EmptyResultError("Brier score needs at least one at-risk subject");
    if (R_t != losses.size())
        throw InvalidArgument("at-risk count " + std::to_string(R_t) + " does not match " +
                              std::to_string(losses.size()) + " losses");
    double acc = 0.0;
    for (const auto& l : losses) acc += l.loss;
    return {acc / static_cast<double>(R_t), R_t, t, u};
}

MeanSe cv_standard_error(std::span<const double> values)
{
    if (values.size() < 2) throw InvalidArgument("standard error needs at least two values");
    const double n = static_cast<double>(values.size());
    const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    return {mean, std::sqrt(ss / (n - 1.0)) / std::sqrt(n)};
}

double normal_quantile(double p)
{
    if (!(p > 0.0 && p < 1.0)) throw InvalidArgument("normal quantile needs p in (0, 1)");
    static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                   1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
    static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                   6.680131188771972e+01,  -1.328068155288572e+01};
    static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                   -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
    static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                   3.754408661907416e+00};
    constexpr double p_low = 0.02425;
    double x;
    if (p < p_low) {
        const double q = std::sqrt(-2.0 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    } else if (p <= 1.0 - p_low) {
        const double q = p - 0.5;
        const double r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        const double q = std::sqrt(-2.0 * std::log1p(-p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    // Halley refinement against the exact CDF
    const double e = 0.5 * std::erfc(-x / std::numbers::sqrt2) - p;
    const double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(0.5 * x * x);
    return x - u / (1.0 + 0.5 * x * u);
}

std::pair<double, double> confidence_interval(double mean, double se, double level)
{
    if (!(se >= 0.0)) throw InvalidArgument("standard error must be non-negative");
    if (!(level > 0.0 && level < 1.0)) throw InvalidArgument("confidence level must lie in (0, 1)");
    const double z = normal_quantile(0.5 + 0.5 * level);
    return {mean - z * se, mean + z * se};
}

} // namespace jdp::scoring
