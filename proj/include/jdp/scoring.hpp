#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>

namespace jdp::scoring {

enum class LossBranch { survived, event, censored };

struct SubjectLoss {
    std::string subject_id;
    double loss = 0.0;
    LossBranch branch = LossBranch::survived;
};

/// True when the censored mixture term applies (delta = 0 and T < u), i.e.
/// when pi(u | T) has to be supplied.
bool needs_censored_prediction(double T, bool delta, double u);

/// Censoring-corrected squared error of one at-risk subject (T >= t):
///   T >= u:            (1 - pi(u|t))^2
///   delta = 1, T < u:  (0 - pi(u|t))^2
///   delta = 0, T < u:  pi(u|T) (1 - pi(u|t))^2 + (1 - pi(u|T)) pi(u|t)^2
/// Censoring exactly at u counts as surviving.
SubjectLoss subject_loss(std::string subject_id, double T, bool delta, double pi_u_given_t,
                         std::optional<double> pi_u_given_T, double t, double u);

struct BrierEstimate {
    double value = 0.0;
    std::size_t at_risk_count = 0;
    double t = 0.0;
    double u = 0.0;
};

/// Mean of the losses. R_t must equal losses.size() and be positive.
BrierEstimate brier(std::span<const SubjectLoss> losses, std::size_t R_t, double t, double u);

struct MeanSe {
    double mean = 0.0;
    double se = 0.0;
};

/// Sample mean and sd / sqrt(n) over fold values (n >= 2).
MeanSe cv_standard_error(std::span<const double> values);

/// Standard-normal quantile (rational approximation, refined by one Halley
/// step; absolute error below 1e-9 on (0, 1)).
double normal_quantile(double p);

/// mean -/+ z_{(1+level)/2} se.
std::pair<double, double> confidence_interval(double mean, double se, double level);

} // namespace jdp::scoring
