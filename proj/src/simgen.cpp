#include "jdp/simgen.hpp"

#include "jdp/error.hpp"
#include "jdp/parallel.hpp"
#include "jdp/quadrature.hpp"

#include <boost/math/tools/roots.hpp>
#include <spdlog/spdlog.h>

#include <cmath>
#include <limits>
#include <sstream>

namespace jdp::simgen {

std::vector<double> LongitudinalParams::default_grid()
{
    std::vector<double> grid;
    for (int k = 0; k <= 20; ++k) grid.push_back(0.5 * k);
    return grid;
}

void LongitudinalParams::validate() const
{
    if (!(tau0 >= 0.0) || !(tau1 >= 0.0)) throw InvalidArgument("random-effect SDs must be non-negative");
    if (!(tau01 >= -1.0 && tau01 <= 1.0)) throw InvalidArgument("random-effect correlation must lie in [-1, 1]");
    if (!(sigma >= 0.0)) throw InvalidArgument("error SD must be non-negative");
    for (std::size_t i = 1; i < time_grid.size(); ++i)
        if (!(time_grid[i] > time_grid[i - 1])) throw InvalidArgument("time grid must be strictly increasing");
    if (!time_grid.empty() && time_grid.front() < 0.0) throw InvalidArgument("time grid must be non-negative");
}

void EventParams::validate() const
{
    if (!(lambda > 0.0)) throw InvalidArgument("Weibull scale lambda must be positive");
    if (!(v > 0.0)) throw InvalidArgument("Weibull shape v must be positive");
    if (!(censor_upper > 1.0)) throw InvalidArgument("censoring upper bound C must exceed 1");
}

void ScenarioConfig::validate() const
{
    longitudinal.validate();
    event.validate();
    if (n < 0) throw InvalidArgument("n must be non-negative");
    if (!(t_landmark > 0.0 && u_horizon > t_landmark))
        throw InvalidArgument("scenario requires u_horizon > t_landmark > 0");
}

ScenarioConfig scenario_preset(int scenario)
{
    ScenarioConfig c;
    switch (scenario) {
    case 1:
        c.event.gamma1 = 0.5;
        c.event.gamma2 = 1.5;
        c.event.censor_upper = 7.0;
        c.u_horizon = 4.0;
        break;
    case 2:
        c.event.gamma1 = 3.5;
        c.event.gamma2 = 3.5;
        c.event.censor_upper = 4.0;
        c.u_horizon = 3.0;
        break;
    default:
        throw InvalidArgument("unknown scenario " + std::to_string(scenario) + " (expected 1 or 2)");
    }
    return c;
}

std::string to_string(GeneratorMode mode)
{
    return mode == GeneratorMode::closed_form ? "closed_form" : "numeric";
}

GeneratorMode generator_mode_from_string(const std::string& s)
{
    if (s == "closed_form") return GeneratorMode::closed_form;
    if (s == "numeric") return GeneratorMode::numeric;
    throw InvalidArgument("generator_mode must be 'closed_form' or 'numeric', got '" + s + "'");
}

SubjectEffects draw_subject_effects(const LongitudinalParams& params, Rng& rng)
{
    std::normal_distribution<double> z;
    const double z0 = z(rng);
    const double z1 = z(rng);
    // Cholesky factor of D = [[t0^2, t0 t1 r], [t0 t1 r, t1^2]]
    const double r = params.tau01;
    const double b0 = params.tau0 * z0;
    const double b1 = params.tau1 * (r * z0 + std::sqrt(std::max(0.0, 1.0 - r * r)) * z1);
    return {b0, b1};
}

std::vector<LongitudinalRecord> generate_longitudinal(const LongitudinalParams& params, const std::string& subject_id,
                                                      const SubjectEffects& effects, Rng& rng)
{
    std::normal_distribution<double> noise(0.0, 1.0);
    std::vector<LongitudinalRecord> out;
    out.reserve(params.time_grid.size());
    for (double s : params.time_grid) {
        const double mean = params.beta0 + effects.b0 + (params.beta1 + effects.b1) * s;
        out.push_back({subject_id, s, mean + params.sigma * noise(rng)});
    }
    return out;
}

namespace {

double linear_predictor(const HazardSubject& s, const EventParams& p, const LongitudinalParams& l)
{
    return p.gamma1 * s.w1 + p.gamma2 * s.w2 + p.alpha * (l.beta0 + s.b0);
}

} // namespace

double closed_form_event_time(double u, const HazardSubject& subject, const EventParams& params,
                              const LongitudinalParams& longitudinal)
{
    if (!(u > 0.0 && u <= 1.0)) throw DomainError("uniform draw must lie in (0, 1]");
    const double v = params.v;
    const double scale = std::exp(linear_predictor(subject, params, longitudinal)) * params.lambda * v * params.alpha;
    const double inner = -std::log(u) * (1.0 + v) / scale; // argument of log is inner + 1
    if (!std::isfinite(inner) || !(inner > -1.0))
        throw DomainError("log argument of the event-time formula is not positive");
    const double bracket = std::log1p(inner) / (longitudinal.beta1 + subject.b1);
    if (!std::isfinite(bracket) || bracket < 0.0)
        throw DomainError("bracket of the event-time formula is negative or undefined");
    return std::pow(bracket, 1.0 / (1.0 + v));
}

double closed_form_cumulative_hazard(double t, const HazardSubject& subject, const EventParams& params,
                                     const LongitudinalParams& longitudinal)
{
    if (!(t >= 0.0)) throw InvalidArgument("cumulative hazard requires t >= 0");
    const double v = params.v;
    const double front = std::exp(linear_predictor(subject, params, longitudinal)) / (1.0 + v);
    return front * params.lambda * v * params.alpha *
           std::expm1((longitudinal.beta1 + subject.b1) * std::pow(t, 1.0 + v));
}

double numeric_cumulative_hazard(double t, const HazardSubject& subject, const EventParams& params,
                                 const LongitudinalParams& longitudinal)
{
    if (!(t >= 0.0)) throw InvalidArgument("cumulative hazard requires t >= 0");
    if (t == 0.0) return 0.0;
    const double lp = params.gamma1 * subject.w1 + params.gamma2 * subject.w2 +
                      params.alpha * (longitudinal.beta0 + subject.b0);
    const double slope = params.alpha * (longitudinal.beta1 + subject.b1);
    // y = s^v absorbs the s^(v-1) factor, whose derivative is unbounded at 0
    // for v < 2; the transformed integrand is constant when alpha = 0.
    const double inv_v = 1.0 / params.v;
    auto integrand = [=](double y) { return std::exp(lp + slope * std::pow(y, inv_v)); };
    return params.lambda * integrate_adaptive(integrand, 0.0, std::pow(t, params.v), 1e-10 / params.lambda).value;
}

double invert_numeric_hazard(double target, const HazardSubject& subject, const EventParams& params,
                             const LongitudinalParams& longitudinal)
{
    if (!(target > 0.0)) throw InvalidArgument("hazard inversion requires a positive target");
    auto H = [&](double t) {
        try {
            return numeric_cumulative_hazard(t, subject, params, longitudinal);
        } catch (const ConvergenceError&) {
            // the integrand overflowed; the root lies below t
            return std::numeric_limits<double>::infinity();
        }
    };
    double lo = 0.0;
    double hi = 1.0;
    while (H(hi) < target) {
        lo = hi;
        hi *= 2.0;
        if (hi > 1e6) {
            std::ostringstream msg;
            msg << "cumulative hazard stays below " << target << " up to t=1e6";
            throw ConvergenceError(msg.str());
        }
    }
    auto g = [&](double t) {
        const double h = H(t);
        return std::isfinite(h) ? h - target : std::numeric_limits<double>::max();
    };
    std::uintmax_t max_iter = 200;
    auto tol = [&](double a, double b) { return std::abs(b - a) <= 1e-15 * std::max(1.0, std::abs(a)); };
    const auto [a, b] = boost::math::tools::toms748_solve(g, lo, hi, g(lo), g(hi), tol, max_iter);
    const double ga = std::abs(g(a));
    const double gb = std::abs(g(b));
    const double root = ga <= gb ? a : b;
    const double residual = std::min(ga, gb);
    if (residual > 1e-8 * std::max(1.0, target)) {
        std::ostringstream msg;
        msg << "hazard inversion residual " << residual << " exceeds tolerance";
        throw ConvergenceError(msg.str());
    }
    return root;
}

Cohort generate_scenario(const ScenarioConfig& config, std::uint64_t seed, GeneratorMode mode, GenerationStats* stats,
                         int workers)
{
    config.validate();
    const auto n = static_cast<std::size_t>(config.n);
    const std::size_t width = std::max<std::size_t>(4, std::to_string(n).size());

    struct Draw {
        SurvivalRecord subject;
        std::vector<LongitudinalRecord> measurements;
        int resampled = 0;
        bool unresolved = false;
    };
    std::vector<Draw> draws(n);

    parallel_for(n, workers, [&](std::size_t i) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
        std::string id = std::to_string(i + 1);
        id = "S" + std::string(width - id.size(), '0') + id;

        const auto effects = draw_subject_effects(config.longitudinal, rng);
        std::uniform_real_distribution<double> unif_w1(-1.73, 1.73);
        std::normal_distribution<double> norm_w2(0.0, 0.7);
        std::uniform_real_distribution<double> unif_c(1.0, config.event.censor_upper);
        std::uniform_real_distribution<double> unif01(0.0, 1.0);
        const HazardSubject hs{unif_w1(rng), norm_w2(rng), effects.b0, effects.b1};
        const double censor = unif_c(rng);
        auto records = generate_longitudinal(config.longitudinal, id, effects, rng);

        Draw& d = draws[i];
        double event_time = std::numeric_limits<double>::infinity();
        for (int attempt = 0; attempt <= 100; ++attempt) {
            const double u = 1.0 - unif01(rng); // (0, 1]
            try {
                if (mode == GeneratorMode::closed_form) {
                    event_time = closed_form_event_time(u, hs, config.event, config.longitudinal);
                } else {
                    const double target = -std::log(u);
                    event_time = target > 0.0 ? invert_numeric_hazard(target, hs, config.event, config.longitudinal)
                                              : 0.0;
                }
                if (event_time > 0.0) break;
                // T = 0 can only come from u = 1; redraw
                event_time = std::numeric_limits<double>::infinity();
            } catch (const DomainError&) {
                event_time = std::numeric_limits<double>::infinity();
            } catch (const ConvergenceError&) {
                // hazard never accumulates the target: the event does not occur
                event_time = std::numeric_limits<double>::infinity();
                break;
            }
            if (attempt < 100) ++d.resampled;
            else d.unresolved = true;
        }

        d.subject.subject_id = id;
        d.subject.event = event_time <= censor;
        d.subject.observed_time = std::min(event_time, censor);
        d.subject.covariates = {hs.w1, hs.w2};
        for (auto& r : records)
            if (r.time < d.subject.observed_time) d.measurements.push_back(std::move(r));
    });

    std::vector<SurvivalRecord> subjects;
    std::vector<LongitudinalRecord> measurements;
    subjects.reserve(n);
    GenerationStats local;
    for (auto& d : draws) {
        local.resampled_draws += d.resampled;
        local.unresolved_subjects += d.unresolved ? 1 : 0;
        subjects.push_back(std::move(d.subject));
        measurements.insert(measurements.end(), std::make_move_iterator(d.measurements.begin()),
                            std::make_move_iterator(d.measurements.end()));
    }
    if (local.unresolved_subjects > 0)
        spdlog::warn("simgen: {} subject(s) had no valid event time after 100 redraws; censored at C_i",
                     local.unresolved_subjects);
    if (stats) *stats = local;
    return Cohort::create(std::move(subjects), std::move(measurements), {"w1", "w2"});
}

} // namespace jdp::simgen
