#include "jdp/similarity.hpp"

#include "jdp/error.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>

namespace jdp::similarity {

FeatureStandardization FeatureStandardization::from_training(const Cohort& training,
                                                             const std::vector<std::string>& categorical)
{
    if (training.empty()) throw InvalidArgument("cannot standardize features on an empty training set");
    const auto& schema = training.covariate_schema();
    for (const auto& c : categorical)
        if (std::find(schema.begin(), schema.end(), c) == schema.end())
            throw InvalidArgument("categorical covariate '" + c + "' is not in the cohort schema");

    FeatureStandardization out;
    const double n = static_cast<double>(training.size());
    for (std::size_t j = 0; j < schema.size(); ++j) {
        const bool is_cat = std::find(categorical.begin(), categorical.end(), schema[j]) != categorical.end();
        if (is_cat) {
            std::set<double> levels;
            for (const auto& s : training.subjects()) levels.insert(s.covariates[j]);
            for (double level : levels) {
                char buf[32];
                const auto res = std::to_chars(buf, buf + sizeof buf, level);
                Column c;
                c.name = schema[j] + "=" + std::string(buf, res.ptr);
                c.covariate = j;
                c.one_hot = true;
                c.level = level;
                out.columns.push_back(c);
            }
            continue;
        }
        double mean = 0.0;
        for (const auto& s : training.subjects()) mean += s.covariates[j];
        mean /= n;
        double ss = 0.0;
        for (const auto& s : training.subjects()) ss += (s.covariates[j] - mean) * (s.covariates[j] - mean);
        const double sd = training.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
        if (!(sd > 1e-12 * std::max(1.0, std::abs(mean)))) {
            spdlog::warn("similarity: covariate '{}' has zero variance in the training set; dropped", schema[j]);
            out.dropped.push_back(schema[j]);
            continue;
        }
        out.columns.push_back({schema[j], j, false, 0.0, mean, sd});
    }
    return out;
}

std::span<const double> FeatureSet::row(std::size_t i) const
{
    const auto width = static_cast<std::size_t>(values.cols());
    return {values.data() + i * width, width};
}

FeatureSet build_features(const Cohort& cohort, const fpca::FpcaModel& model, const FeatureStandardization& stdz,
                          int n_scores)
{
    const int r = n_scores < 0 ? model.r : n_scores;
    FeatureSet fs;
    for (const auto& c : stdz.columns) fs.column_names.push_back(c.name);
    for (int k = 0; k < r; ++k) fs.column_names.push_back("fpc" + std::to_string(k + 1));
    const auto width = static_cast<Eigen::Index>(fs.column_names.size());
    fs.values.setZero(static_cast<Eigen::Index>(cohort.size()), width);

    for (std::size_t i = 0; i < cohort.size(); ++i) {
        const auto& s = cohort.subject(i);
        fs.subject_ids.push_back(s.subject_id);
        const auto row = static_cast<Eigen::Index>(i);
        Eigen::Index col = 0;
        for (const auto& c : stdz.columns) {
            const double x = s.covariates.at(c.covariate);
            fs.values(row, col++) = c.one_hot ? (x == c.level ? 1.0 : 0.0) : (x - c.mean) / c.sd;
        }
        const int available = std::min(r, model.r);
        if (available == 0) continue;
        if (const double* sc = model.scores_of(s.subject_id)) {
            for (int k = 0; k < available; ++k) fs.values(row, col + k) = sc[k];
        } else {
            const auto ms = cohort.measurements_of(i);
            const bool any = std::any_of(ms.begin(), ms.end(), [&](const auto& m) {
                return m.time >= model.grid.front() && m.time <= model.grid.back();
            });
            if (!any) continue; // no trajectory information: scores at the mean (0)
            const auto sc2 = fpca::scores_for_subject(model, ms);
            for (int k = 0; k < available; ++k) fs.values(row, col + k) = sc2[static_cast<std::size_t>(k)];
        }
    }
    return fs;
}

double cosine(std::span<const double> a, std::span<const double> b)
{
    if (a.size() != b.size()) throw InvalidArgument("cosine: vectors differ in dimension");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (!(na > 0.0) || !(nb > 0.0)) throw DomainError("cosine similarity is undefined for a zero vector");
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

SimilarityRanking rank_similar(const std::string& index_id, std::span<const double> index, const FeatureSet& training,
                               std::size_t* excluded)
{
    SimilarityRanking out;
    out.index_subject_id = index_id;
    std::size_t skipped = 0;
    for (std::size_t i = 0; i < training.subject_ids.size(); ++i) {
        try {
            out.entries.emplace_back(training.subject_ids[i], cosine(index, training.row(i)));
        } catch (const DomainError&) {
            ++skipped;
        }
    }
    if (skipped > 0) spdlog::debug("similarity: {} zero-norm training subject(s) left out of the ranking", skipped);
    if (excluded) *excluded = skipped;
    std::stable_sort(out.entries.begin(), out.entries.end(), [](const auto& x, const auto& y) {
        if (x.second != y.second) return x.second > y.second;
        return x.first < y.first;
    });
    return out;
}

std::size_t subpopulation_size(double mp, std::size_t n)
{
    if (!(mp > 0.0 && mp <= 1.0)) throw InvalidArgument("M_p must lie in (0, 1]");
    const long long m = round_half_even(mp * static_cast<double>(n));
    return static_cast<std::size_t>(std::max<long long>(1, m));
}

std::vector<std::string> select_subpopulation(const SimilarityRanking& ranking, double mp, std::size_t n)
{
    const std::size_t m = std::min(subpopulation_size(mp, n), ranking.entries.size());
    std::vector<std::string> ids;
    ids.reserve(m);
    for (std::size_t i = 0; i < m; ++i) ids.push_back(ranking.entries[i].first);
    return ids;
}

void write_features_csv(const FeatureSet& features, const std::filesystem::path& path)
{
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << "subject_id";
    for (const auto& c : features.column_names) out << ',' << c;
    out << '\n';
    char buf[32];
    for (std::size_t i = 0; i < features.subject_ids.size(); ++i) {
        out << features.subject_ids[i];
        for (Eigen::Index j = 0; j < features.values.cols(); ++j) {
            const auto res = std::to_chars(buf, buf + sizeof buf, features.values(static_cast<Eigen::Index>(i), j),
                                           std::chars_format::general, 17);
            out << ',' << std::string_view(buf, static_cast<std::size_t>(res.ptr - buf));
        }
        out << '\n';
    }
}

} // namespace jdp::similarity
