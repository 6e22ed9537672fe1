#pragma once

#include "jdp/dataset.hpp"
#include "jdp/dynpred.hpp"
#include "jdp/fpca.hpp"
#include "jdp/jointfit.hpp"
#include "jdp/scoring.hpp"
#include "jdp/similarity.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace jdp::tuner {

struct TuningConfig {
    std::vector<double> mp_grid{0.2, 0.4, 0.6, 0.8, 1.0};
    int K = 5;
    int W = 10;
    double t = 1.0;
    double u = 4.0;
    double variance_threshold = 0.95;
    int grid_points = 51;
    joint::JointModelSpec model; // model.mcmc.seed is replaced per fit
    int n_mc = 400;
    std::uint64_t master_seed = 1;
    int workers = 1;
    bool skip_nonconverged = false; // treat R-hat > 1.1 fits as infeasible
    std::vector<std::string> categorical;

    void validate() const;
};

/// A test subject as seen at the landmark: outcome, covariates and the
/// biomarker history up to t.
struct IndexSubject {
    std::string subject_id;
    double observed_time = 0.0;
    bool event = false;
    std::vector<double> covariates;
    std::vector<dynpred::HistoryPoint> history;
};

/// A fitted predictor: pi(horizon | landmark) for one subject.
class Model {
public:
    virtual ~Model() = default;
    virtual double predict(const IndexSubject& subject, double landmark, double horizon, std::uint64_t seed) const = 0;
    virtual bool converged() const { return true; }
};

/// Fits a Model on a training subpopulation. Throws InfeasibleFit when the
/// subpopulation cannot support a fit.
using ModelFactory = std::function<std::shared_ptr<const Model>(const Cohort& training, std::uint64_t seed)>;

/// The joint model of `jointfit` with predictions from `dynpred`.
ModelFactory joint_model_factory(const TuningConfig& config);

/// Wraps an existing joint-model fit as a Model.
std::shared_ptr<const Model> wrap_joint_fit(joint::JointModelFit fit, int n_mc);

/// Training subjects with their measurements up to t (no subject dropped).
Cohort history_up_to(const Cohort& cohort, double t);

/// Similarity machinery of one fold: separate FPCA fits for the training
/// histories and the index subjects (the training fit is reused when there
/// are too few index subjects for their own), standardization from training.
class Personalizer {
public:
    Personalizer(const Cohort& training, const Cohort& index_cohort, const TuningConfig& config);

    const similarity::FeatureSet& training_features() const { return train_features_; }
    const similarity::FeatureSet& index_features() const { return index_features_; }
    const fpca::FpcaModel& training_fpca() const { return train_fpca_; }
    bool index_fpca_shared() const { return index_shared_; }
    /// |<phi_train_k, phi_index_k>| per component (empty when shared).
    const std::vector<double>& alignment() const { return alignment_; }

    similarity::SimilarityRanking rank(std::size_t index_row) const;

    /// Ids of D*_{m,j}, sorted lexicographically.
    std::vector<std::string> subset(const similarity::SimilarityRanking& ranking, double mp) const;

    std::size_t training_size() const { return train_features_.subject_ids.size(); }

private:
    fpca::FpcaModel train_fpca_;
    fpca::FpcaModel index_fpca_;
    bool index_shared_ = false;
    std::vector<double> alignment_;
    similarity::FeatureSet train_features_;
    similarity::FeatureSet index_features_;
};

IndexSubject index_subject(const Cohort& cohort, std::size_t i, double t);

/// Seeds. Fits depend on the subpopulation, so identical subpopulations (for
/// example M_p = 1 for every test subject of a fold) share one fit.
std::uint64_t fit_seed(std::uint64_t master, int repeat, int fold, const std::vector<std::string>& subset_ids);
std::uint64_t prediction_seed(std::uint64_t master, int repeat, int fold, const std::string& subject_id, double mp);

struct PersonalizedPrediction {
    double pi_t = 1.0;                 // pi(u | t)
    std::optional<double> pi_T;        // pi(u | T), censored-before-u subjects only
    std::size_t m = 0;                 // subpopulation size
    bool converged = true;
};

/// Single-subject path: rank, select, fit, predict. `training` carries full
/// follow-up; the index subject carries history up to t.
PersonalizedPrediction personalized_predict(const Cohort& training, const IndexSubject& subject, double mp,
                                            const TuningConfig& config, const ModelFactory& factory,
                                            int repeat = 0, int fold = 0);

struct FoldResult {
    double mp = 0.0;
    int repeat = 0;
    int fold = 0;
    std::optional<double> brier; // absent when every subject was skipped
    std::size_t at_risk = 0;     // R(t) after skips
    std::size_t skipped = 0;     // infeasible personalized fits
    std::size_t nonconverged = 0;
    std::size_t fits = 0; // distinct fits this (fold, M_p) used
};

/// Brier score per grid value on one fold. Throws EmptyResultError when no
/// test subject is at risk at t.
std::vector<FoldResult> evaluate_fold(const Cohort& train, const Cohort& test, const TuningConfig& config,
                                      const ModelFactory& factory, int repeat = 0, int fold = 0);

struct TuningEntry {
    double mp = 0.0;
    std::vector<double> fold_values;
    double mean = 0.0;
    double se = 0.0;
    double ci_lower = 0.0;
    double ci_upper = 0.0;
    std::size_t infeasible_fits = 0;
    std::size_t scored = 0;
    std::size_t nonconverged = 0;
    double skip_rate = 0.0;
    bool feasible = false;
    bool unreliable = false; // skip rate above 5%
};

struct TuningReport {
    TuningConfig config;
    std::vector<TuningEntry> entries;
    std::vector<FoldResult> folds; // (repeat, fold, M_p) order
    std::optional<double> selected_mp;
};

/// Repeated K-fold grid search over config.mp_grid.
TuningReport tune(const Cohort& cohort, const TuningConfig& config, const ModelFactory& factory = {});

/// Repeated K-fold evaluation of a held-out cohort at one M_p.
TuningEntry validate(const Cohort& holdout, double mp, const TuningConfig& config, const ModelFactory& factory = {});

/// `mp,repeat,fold,brier,at_risk,skipped` rows, values at 17 significant digits.
std::string report_csv(const TuningReport& report);

} // namespace jdp::tuner
