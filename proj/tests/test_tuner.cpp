#include "jdp/error.hpp"
#include "jdp/tuner.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

#include <atomic>
#include <map>
#include <mutex>
#include <set>

using namespace jdp;
using namespace jdp::tuner;

namespace {

// Predictions from a lookup keyed by (subject, landmark); a fallback value
// otherwise. Records the training-set sizes it was fitted on.
class TableModel final : public Model {
public:
    TableModel(std::map<std::pair<std::string, double>, double> table, double fallback)
        : table_(std::move(table)), fallback_(fallback)
    {
    }
    double predict(const IndexSubject& s, double landmark, double, std::uint64_t) const override
    {
        auto it = table_.find({s.subject_id, landmark});
        return it == table_.end() ? fallback_ : it->second;
    }

private:
    std::map<std::pair<std::string, double>, double> table_;
    double fallback_;
};

// Deterministic in (training set, seed): mean event indicator of the
// training set, nudged by the seed, so any change in either shows up.
class SummaryModel final : public Model {
public:
    SummaryModel(const Cohort& training, std::uint64_t seed)
    {
        value_ = static_cast<double>(training.event_count()) / static_cast<double>(training.size());
        value_ = 0.1 + 0.8 * (1.0 - value_) + static_cast<double>(seed % 1000) * 1e-6;
    }
    double predict(const IndexSubject& s, double landmark, double horizon, std::uint64_t seed) const override
    {
        if (horizon == landmark) return 1.0;
        return std::clamp(value_ + static_cast<double>(seed % 997) * 1e-7 + (s.covariates[0] > 0 ? 0.01 : 0.0),
                          0.0, 1.0);
    }

private:
    double value_ = 0.0;
};

ModelFactory summary_factory()
{
    return [](const Cohort& training, std::uint64_t seed) {
        return std::shared_ptr<const Model>(std::make_shared<SummaryModel>(training, seed));
    };
}

TuningConfig small_config()
{
    TuningConfig c;
    c.mp_grid = {0.2, 0.6, 1.0};
    c.K = 3;
    c.W = 2;
    c.t = 1.0;
    c.u = 4.0;
    c.master_seed = 5;
    return c;
}

Cohort hand_fold()
{
    // a: event at 2 (loss 0.09 with pi=0.3); b: censored at 2.5 (loss 0.25 with 0.5 / 0.8)
    return Cohort::create({{"a", 2.0, true, {0.1, 0.2}}, {"b", 2.5, false, {-0.3, 0.4}}},
                          {{"a", 0.0, -1.3}, {"a", 0.5, -1.2}, {"a", 1.0, -1.0}, {"b", 0.0, -1.4}, {"b", 1.0, -1.1}},
                          {"w1", "w2"});
}

} // namespace

TEST(Tuner, TwoSubjectFoldWithKnownLosses)
{
    const auto train = test::scenario_cohort(1, 60, 1);
    auto cfg = small_config();
    cfg.mp_grid = {1.0};
    ModelFactory f = [](const Cohort&, std::uint64_t) {
        return std::shared_ptr<const Model>(std::make_shared<TableModel>(
            std::map<std::pair<std::string, double>, double>{{{"a", 1.0}, 0.3}, {{"b", 1.0}, 0.5}, {{"b", 2.5}, 0.8}},
            -1.0));
    };
    const auto res = evaluate_fold(train, hand_fold(), cfg, f);
    ASSERT_EQ(res.size(), 1u);
    ASSERT_TRUE(res[0].brier.has_value());
    EXPECT_NEAR(*res[0].brier, 0.17, 1e-15);
    EXPECT_EQ(res[0].at_risk, 2u);
    EXPECT_EQ(res[0].fits, 1u);
}

TEST(Tuner, PerfectPredictionsScoreZero)
{
    const auto c = test::scenario_cohort(1, 90, 2);
    std::vector<std::string> late;
    for (const auto& s : c.subjects())
        if (s.observed_time >= 4.0) late.push_back(s.subject_id);
    ASSERT_GE(late.size(), 2u);
    const auto test_fold = c.subset(late);
    std::vector<std::string> rest;
    for (const auto& s : c.subjects())
        if (!test_fold.find(s.subject_id)) rest.push_back(s.subject_id);
    ModelFactory ones = [](const Cohort&, std::uint64_t) {
        return std::shared_ptr<const Model>(std::make_shared<TableModel>(
            std::map<std::pair<std::string, double>, double>{}, 1.0));
    };
    auto cfg = small_config();
    for (const auto& r : evaluate_fold(c.subset(rest), test_fold, cfg, ones)) EXPECT_EQ(*r.brier, 0.0);
}

TEST(Tuner, NobodyAtRiskIsAnError)
{
    const auto train = test::scenario_cohort(1, 60, 3);
    const auto gone = Cohort::create({{"x", 0.5, true, {0.0, 0.0}}, {"y", 1.0, false, {0.0, 0.0}}},
                                     {{"x", 0.0, -1.0}, {"y", 0.0, -1.2}}, {"w1", "w2"});
    EXPECT_THROW(evaluate_fold(train, gone, small_config(), summary_factory()), EmptyResultError);
}

TEST(Tuner, SubpopulationSizesAndNesting)
{
    const auto c = test::scenario_cohort(1, 250, 4);
    const auto folds = kfold_split(c, 5, 1);
    const auto [train, test] = split_fold(c, folds, 0);
    ASSERT_EQ(train.size(), 200u);
    const auto cfg = small_config();
    const Personalizer p(train, truncate_history(test, cfg.t), cfg);
    EXPECT_EQ(p.training_size(), 200u);
    for (std::size_t j = 0; j < p.index_features().subject_ids.size(); ++j) {
        const auto r = p.rank(j);
        const auto s02 = p.subset(r, 0.2);
        const auto s06 = p.subset(r, 0.6);
        EXPECT_EQ(s02.size(), 40u);
        EXPECT_EQ(s06.size(), 120u);
        EXPECT_TRUE(std::includes(s06.begin(), s06.end(), s02.begin(), s02.end()));
        EXPECT_EQ(p.subset(r, 1.0).size(), 200u);
    }
    EXPECT_EQ(p.training_features().values.cols(), 2 + p.training_fpca().r);
    EXPECT_EQ(p.index_features().values.cols(), p.training_features().values.cols());
}

TEST(Tuner, DuplicateOfIndexSubjectIsAlwaysSelected)
{
    const auto c = test::scenario_cohort(1, 150, 5);
    auto cfg = small_config();
    const auto idx = index_subject(truncate_history(c, 1.0), 0, cfg.t);
    // the training set contains the index subject itself
    std::vector<LongitudinalRecord> hist;
    for (const auto& h : idx.history) hist.push_back({idx.subject_id, h.time, h.value});
    const Cohort index_cohort =
        Cohort::create({{idx.subject_id, idx.observed_time, idx.event, idx.covariates}}, hist, c.covariate_schema());
    const Personalizer p(c, index_cohort, cfg);
    const auto r = p.rank(0);
    EXPECT_EQ(r.entries.front().first, idx.subject_id);
    EXPECT_NEAR(r.entries.front().second, 1.0, 1e-12);
}

TEST(Tuner, FullProportionEqualsStandardFit)
{
    const auto c = test::scenario_cohort(1, 80, 6);
    auto cfg = small_config();
    cfg.model.mcmc.n_iterations = 300;
    cfg.model.mcmc.n_burnin = 100;
    cfg.n_mc = 50;
    const auto at_risk = truncate_history(c, cfg.t);
    const auto subj = index_subject(at_risk, 0, cfg.t);
    std::vector<std::string> rest;
    for (const auto& s : c.subjects())
        if (s.subject_id != subj.subject_id) rest.push_back(s.subject_id);
    const auto train = c.subset(rest);

    const auto personalized = personalized_predict(train, subj, 1.0, cfg, {});
    EXPECT_EQ(personalized.m, train.size());

    std::vector<std::string> ids(rest);
    std::sort(ids.begin(), ids.end());
    const auto model = joint_model_factory(cfg)(train, fit_seed(cfg.master_seed, 0, 0, ids));
    const double direct = model->predict(subj, cfg.t, cfg.u, prediction_seed(cfg.master_seed, 0, 0, subj.subject_id, 1.0));
    EXPECT_EQ(personalized.pi_t, direct);
}

TEST(Tuner, PersonalizedPredictRejectsSubjectsNotAtRisk)
{
    const auto c = test::scenario_cohort(1, 60, 7);
    IndexSubject s{"z", 0.5, true, {0.0, 0.0}, {{0.0, -1.3}}};
    EXPECT_THROW(personalized_predict(c, s, 0.5, small_config(), summary_factory()), InvalidArgument);
}

TEST(Tuner, DegenerateGridSelectsIt)
{
    const auto c = test::scenario_cohort(1, 60, 8);
    auto cfg = small_config();
    cfg.mp_grid = {1.0};
    cfg.K = 2;
    cfg.W = 1;
    const auto report = tune(c, cfg, summary_factory());
    ASSERT_EQ(report.entries.size(), 1u);
    ASSERT_TRUE(report.selected_mp.has_value());
    EXPECT_EQ(*report.selected_mp, 1.0);
    EXPECT_EQ(report.folds.size(), 2u);
}

TEST(Tuner, ReportShapeAndCsvRows)
{
    const auto c = test::scenario_cohort(1, 120, 9);
    const auto cfg = small_config();
    const auto report = tune(c, cfg, summary_factory());
    ASSERT_EQ(report.entries.size(), 3u);
    ASSERT_EQ(report.folds.size(), 3u * 3u * 2u);
    for (const auto& e : report.entries) {
        EXPECT_EQ(e.fold_values.size(), 6u);
        EXPECT_TRUE(e.feasible);
        EXPECT_LE(e.ci_lower, e.mean);
        EXPECT_GE(e.ci_upper, e.mean);
    }
    const auto csv = report_csv(report);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 18);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "mp,repeat,fold,brier,at_risk,skipped");
    // selection is the argmin of the mean
    double best = 1e300;
    double arg = 0.0;
    for (const auto& e : report.entries)
        if (e.mean < best) best = e.mean, arg = e.mp;
    EXPECT_EQ(*report.selected_mp, arg);
}

TEST(Tuner, WorkerCountDoesNotChangeResults)
{
    const auto c = test::scenario_cohort(1, 150, 10);
    auto cfg = small_config();
    const auto serial = report_csv(tune(c, cfg, summary_factory()));
    cfg.workers = 4;
    EXPECT_EQ(report_csv(tune(c, cfg, summary_factory())), serial);
}

TEST(Tuner, IdenticalSubpopulationsShareOneFit)
{
    const auto c = test::scenario_cohort(1, 90, 11);
    std::atomic<int> fits{0};
    std::mutex guard;
    std::set<std::uint64_t> seeds;
    ModelFactory f = [&](const Cohort& training, std::uint64_t seed) {
        ++fits;
        std::lock_guard lock(guard);
        seeds.insert(seed);
        return std::shared_ptr<const Model>(std::make_shared<SummaryModel>(training, seed));
    };
    auto cfg = small_config();
    cfg.mp_grid = {1.0};
    const auto folds = kfold_split(c, 3, 2);
    const auto [train, test] = split_fold(c, folds, 1);
    const auto r = evaluate_fold(train, test, cfg, f);
    EXPECT_EQ(fits.load(), 1);
    EXPECT_EQ(r[0].fits, 1u);
}

TEST(Tuner, InfeasibleFitsAreSkippedAndCounted)
{
    const auto c = test::scenario_cohort(1, 120, 12);
    ModelFactory f = [](const Cohort& training, std::uint64_t seed) {
        if (training.size() < 30) throw InfeasibleFit("too small");
        return std::shared_ptr<const Model>(std::make_shared<SummaryModel>(training, seed));
    };
    auto cfg = small_config();
    cfg.mp_grid = {0.1, 1.0};
    const auto report = tune(c, cfg, f);
    ASSERT_EQ(report.entries.size(), 2u);
    EXPECT_FALSE(report.entries[0].feasible);
    EXPECT_GT(report.entries[0].infeasible_fits, 0u);
    EXPECT_EQ(report.entries[0].skip_rate, 1.0);
    EXPECT_TRUE(report.entries[0].unreliable);
    EXPECT_TRUE(report.entries[1].feasible);
    EXPECT_EQ(*report.selected_mp, 1.0);
}

TEST(Tuner, SeedsSeparateTheirInputs)
{
    const std::vector<std::string> a{"S0001", "S0002"}, b{"S0001", "S0003"};
    EXPECT_EQ(fit_seed(1, 0, 0, a), fit_seed(1, 0, 0, a));
    EXPECT_NE(fit_seed(1, 0, 0, a), fit_seed(1, 0, 0, b));
    EXPECT_NE(fit_seed(1, 0, 0, a), fit_seed(1, 0, 1, a));
    EXPECT_NE(fit_seed(1, 0, 0, a), fit_seed(2, 0, 0, a));
    EXPECT_NE(prediction_seed(1, 0, 0, "S0001", 0.2), prediction_seed(1, 0, 0, "S0001", 0.4));
}

TEST(Tuner, ValidateHoldout)
{
    auto cfg = small_config();
    const auto e = validate(test::scenario_cohort(1, 90, 13), 0.6, cfg, summary_factory());
    EXPECT_EQ(e.mp, 0.6);
    EXPECT_EQ(e.fold_values.size(), static_cast<std::size_t>(cfg.K * cfg.W));
    EXPECT_THROW(validate(Cohort{}, 0.6, cfg, summary_factory()), EmptyResultError);
}

TEST(Tuner, ConfigValidation)
{
    auto cfg = small_config();
    EXPECT_NO_THROW(cfg.validate());
    cfg.mp_grid = {0.6, 0.2};
    EXPECT_THROW(cfg.validate(), InvalidArgument);
    cfg = small_config();
    cfg.mp_grid = {0.0};
    EXPECT_THROW(cfg.validate(), InvalidArgument);
    cfg = small_config();
    cfg.u = cfg.t;
    EXPECT_THROW(cfg.validate(), InvalidArgument);
    cfg = small_config();
    cfg.K = 1;
    EXPECT_THROW(cfg.validate(), InvalidArgument);
}
