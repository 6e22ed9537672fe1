#pragma once

#include "jdp/dataset.hpp"
#include "jdp/fpca.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace jdp::similarity {

/// Column recipe learned from the training set. Continuous covariates are
/// z-scored with training moments; categorical ones are one-hot encoded over
/// the training levels. Zero-variance continuous columns are dropped.
struct FeatureStandardization {
    struct Column {
        std::string name;
        std::size_t covariate = 0; // index into the cohort schema
        bool one_hot = false;
        double level = 0.0; // one-hot: the level this column flags
        double mean = 0.0;  // continuous: training mean and SD
        double sd = 1.0;
    };
    std::vector<Column> columns;
    std::vector<std::string> dropped;

    static FeatureStandardization from_training(const Cohort& training,
                                                const std::vector<std::string>& categorical = {});
};

/// One row per subject: standardized covariates, then n_scores FPC scores.
struct FeatureSet {
    std::vector<std::string> column_names;
    std::vector<std::string> subject_ids;
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> values; // subjects x columns

    std::span<const double> row(std::size_t i) const;
};

/// Features for every cohort subject. FPC scores come from `model` (looked
/// up by id, or computed from the subject's measurements when the subject was
/// not in the fitting set) and are padded with zeros or truncated to
/// `n_scores`; a negative n_scores means model.r.
FeatureSet build_features(const Cohort& cohort, const fpca::FpcaModel& model, const FeatureStandardization& stdz,
                          int n_scores = -1);

/// Throws InvalidArgument on length mismatch and DomainError on a zero vector.
double cosine(std::span<const double> a, std::span<const double> b);

struct SimilarityRanking {
    std::string index_subject_id;
    std::vector<std::pair<std::string, double>> entries; // non-increasing similarity, ties by id
};

/// Ranks every training row against `index`. Zero-norm training rows are
/// left out (and counted in `*excluded`).
SimilarityRanking rank_similar(const std::string& index_id, std::span<const double> index, const FeatureSet& training,
                               std::size_t* excluded = nullptr);

/// round_half_even(mp * n), at least 1.
std::size_t subpopulation_size(double mp, std::size_t n);

/// Top subpopulation_size(mp, n) ids of the ranking (fewer if the ranking is
/// shorter), in ranking order.
std::vector<std::string> select_subpopulation(const SimilarityRanking& ranking, double mp, std::size_t n);

/// Audit dump; the header is the column order.
void write_features_csv(const FeatureSet& features, const std::filesystem::path& path);

} // namespace jdp::similarity
