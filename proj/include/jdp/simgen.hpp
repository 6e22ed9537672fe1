#pragma once

#include "jdp/dataset.hpp"
#include "jdp/random.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace jdp::simgen {

/// Linear-trajectory biomarker with correlated random intercept and slope.
struct LongitudinalParams {
    double beta0 = -1.35;
    double beta1 = 0.3;
    double tau0 = 0.27;  // random-intercept SD
    double tau1 = 0.08;  // random-slope SD
    double tau01 = 0.2;  // random-effect correlation, in [-1, 1]
    double sigma = 0.25; // measurement error SD
    std::vector<double> time_grid = default_grid();

    static std::vector<double> default_grid(); // 0, 0.5, ..., 10

    void validate() const;
};

/// Weibull baseline with biomarker association and two baseline covariates.
struct EventParams {
    double lambda = 0.5; // scale
    double v = 1.03;     // shape
    double alpha = 4.5;  // biomarker association
    double gamma1 = 0.5;
    double gamma2 = 1.5;
    double censor_upper = 7.0; // C_i ~ Unif(1, censor_upper)

    void validate() const;
};

struct ScenarioConfig {
    LongitudinalParams longitudinal;
    EventParams event;
    int n = 2000;
    double t_landmark = 1.0;
    double u_horizon = 4.0;

    void validate() const;
};

/// Scenario 1: strong biomarker association (gamma = 0.5, 1.5), C = 7, u = 4.
/// Scenario 2: covariate effects on par with the biomarker (gamma = 3.5, 3.5),
/// C = 4, u = 3. Both use landmark t = 1.
ScenarioConfig scenario_preset(int scenario);

enum class GeneratorMode { closed_form, numeric };

std::string to_string(GeneratorMode mode);
GeneratorMode generator_mode_from_string(const std::string& s);

struct SubjectEffects {
    double b0 = 0.0;
    double b1 = 0.0;
};

/// Baseline covariates and random effects of one subject; everything the
/// hazard needs besides the parameters.
struct HazardSubject {
    double w1 = 0.0;
    double w2 = 0.0;
    double b0 = 0.0;
    double b1 = 0.0;
};

SubjectEffects draw_subject_effects(const LongitudinalParams& params, Rng& rng);

/// One record per grid time, Y = beta0 + b0 + (beta1 + b1) s + N(0, sigma^2).
std::vector<LongitudinalRecord> generate_longitudinal(const LongitudinalParams& params, const std::string& subject_id,
                                                      const SubjectEffects& effects, Rng& rng);

/// Event time by the published inverse-cumulative-hazard formula:
///
///   T = [ log{ -log(u) (1+v) / (exp(g1 w1 + g2 w2 + a(b0 + B0)) lambda v a) + 1 } / (B1 + b1) ]^(1/(1+v))
///
/// Throws DomainError when the log argument, the bracket, or u are invalid.
double closed_form_event_time(double u, const HazardSubject& subject, const EventParams& params,
                              const LongitudinalParams& longitudinal);

/// The published closed-form cumulative hazard
///
///   H(t) = exp(g1 w1 + g2 w2 + a(B0 + b0)) / (1+v) * lambda v a * [exp((B1 + b1) t^(1+v)) - 1],
///
/// evaluated as displayed. It is the exact inverse of closed_form_event_time
/// but not the integral of the model hazard for general parameters.
double closed_form_cumulative_hazard(double t, const HazardSubject& subject, const EventParams& params,
                                     const LongitudinalParams& longitudinal);

/// Integral of the model hazard exp(g'w + a m(s)) lambda v s^(v-1) over [0, t]
/// by adaptive Gauss–Kronrod quadrature (absolute tolerance 1e-10).
double numeric_cumulative_hazard(double t, const HazardSubject& subject, const EventParams& params,
                                 const LongitudinalParams& longitudinal);

/// Solves numeric_cumulative_hazard(t) = target by bracketing and TOMS 748.
/// Throws ConvergenceError if the bracket cannot be expanded past t = 1e6.
double invert_numeric_hazard(double target, const HazardSubject& subject, const EventParams& params,
                             const LongitudinalParams& longitudinal);

struct GenerationStats {
    int resampled_draws = 0;    // extra uniform draws after domain failures
    int unresolved_subjects = 0; // subjects censored with T* = +inf after 100 failures
};

/// Full synthetic cohort. Subject i uses an RNG seeded with hash(seed, i) so
/// the result does not depend on `workers`.
Cohort generate_scenario(const ScenarioConfig& config, std::uint64_t seed, GeneratorMode mode,
                         GenerationStats* stats = nullptr, int workers = 1);

} // namespace jdp::simgen
