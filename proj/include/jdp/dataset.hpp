#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace jdp {

struct LongitudinalRecord {
    std::string subject_id;
    double time = 0.0;
    double value = 0.0;
};

struct SurvivalRecord {
    std::string subject_id;
    double observed_time = 0.0; // min(event time, censoring time)
    bool event = false;
    std::vector<double> covariates; // ordered as Cohort::covariate_schema()
};

/// Longitudinal measurements and survival outcomes for a set of subjects.
///
/// Immutable once built. Subjects are held in lexicographic id order and each
/// subject's measurements are contiguous and time-ordered, so
/// `measurements_of(i)` is a cheap view. Construction validates:
///   - unique subject ids, unique (subject_id, time) pairs;
///   - every measurement belongs to a known subject;
///   - every measurement time is strictly before the subject's observed time;
///   - covariate vectors match the schema width; all values finite.
class Cohort {
public:
    Cohort() = default;

    static Cohort create(std::vector<SurvivalRecord> subjects, std::vector<LongitudinalRecord> measurements,
                         std::vector<std::string> covariate_schema);

    std::size_t size() const noexcept { return subjects_.size(); }
    bool empty() const noexcept { return subjects_.empty(); }

    std::span<const SurvivalRecord> subjects() const noexcept { return subjects_; }
    std::span<const LongitudinalRecord> measurements() const noexcept { return measurements_; }
    const std::vector<std::string>& covariate_schema() const noexcept { return schema_; }

    const SurvivalRecord& subject(std::size_t i) const { return subjects_[i]; }
    std::span<const LongitudinalRecord> measurements_of(std::size_t i) const;

    std::optional<std::size_t> find(const std::string& subject_id) const;

    /// Sub-cohort with the given subject ids (order-insensitive). Unknown ids
    /// raise IntegrityError.
    Cohort subset(std::span<const std::string> ids) const;
    Cohort subset_indices(std::span<const std::size_t> indices) const;

    std::size_t event_count() const noexcept;

private:
    std::vector<SurvivalRecord> subjects_;
    std::vector<LongitudinalRecord> measurements_;
    std::vector<std::size_t> offsets_; // size()+1 entries into measurements_
    std::vector<std::string> schema_;
};

Cohort load_cohort(const std::filesystem::path& longitudinal_path, const std::filesystem::path& survival_path);

/// Writes the two CSVs with values at 17 significant digits, so loading them
/// back reproduces the cohort bit for bit.
void emit_cohort(const Cohort& cohort, const std::filesystem::path& longitudinal_path,
                 const std::filesystem::path& survival_path);

/// Subjects still at risk after t (observed_time > t) with their measurements
/// up to and including t.
Cohort truncate_history(const Cohort& cohort, double t);

struct FoldAssignment {
    int K = 0;
    std::vector<std::string> subject_ids; // cohort order
    std::vector<int> fold;                // parallel to subject_ids

    std::vector<std::size_t> fold_sizes() const;
};

FoldAssignment kfold_split(const Cohort& cohort, int K, std::uint64_t seed);

/// (training, testing) cohorts for held-out fold k.
std::pair<Cohort, Cohort> split_fold(const Cohort& cohort, const FoldAssignment& folds, int k);

Cohort stratified_sample(const Cohort& cohort, int n, double event_rate, std::uint64_t seed);

/// Round half to even; shared by every "round(p * n)" in the toolkit.
long long round_half_even(double x);

} // namespace jdp
