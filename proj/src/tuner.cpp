#include "jdp/tuner.hpp"

#include "jdp/error.hpp"
#include "jdp/parallel.hpp"
#include "jdp/random.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <sstream>

namespace jdp::tuner {

namespace {

class JointModelAdapter final : public Model {
public:
    JointModelAdapter(joint::JointModelFit fit, int n_mc, std::vector<std::size_t> columns)
        : fit_(std::move(fit)), n_mc_(n_mc), columns_(std::move(columns))
    {
    }

    double predict(const IndexSubject& subject, double landmark, double horizon, std::uint64_t seed) const override
    {
        if (horizon == landmark) return 1.0;
        dynpred::PredictionRequest req;
        req.history = subject.history;
        for (std::size_t c : columns_) req.covariates.push_back(subject.covariates.at(c));
        req.t = landmark;
        req.u = horizon;
        req.n_mc = n_mc_;
        req.seed = seed;
        return dynpred::predict_survival(fit_, req).pi_hat;
    }

    bool converged() const override { return fit_.converged; }

private:
    joint::JointModelFit fit_;
    int n_mc_;
    std::vector<std::size_t> columns_; // fit covariates as positions in the cohort schema
};

std::vector<std::size_t> covariate_columns(const std::vector<std::string>& schema, const std::vector<std::string>& names)
{
    std::vector<std::size_t> cols;
    for (const auto& n : names) {
        auto it = std::find(schema.begin(), schema.end(), n);
        if (it == schema.end()) throw InvalidArgument("covariate '" + n + "' is not in the cohort schema");
        cols.push_back(static_cast<std::size_t>(it - schema.begin()));
    }
    return cols;
}

std::string format_real(double x)
{
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, x, std::chars_format::general, 17);
    return std::string(buf, res.ptr);
}

std::string format_grid_value(double x)
{
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, res.ptr);
}

} // namespace

void TuningConfig::validate() const
{
    if (mp_grid.empty()) throw InvalidArgument("mp_grid must not be empty");
    for (std::size_t i = 0; i < mp_grid.size(); ++i) {
        if (!(mp_grid[i] > 0.0 && mp_grid[i] <= 1.0)) throw InvalidArgument("mp_grid values must lie in (0, 1]");
        if (i > 0 && !(mp_grid[i] > mp_grid[i - 1]))
            throw InvalidArgument("mp_grid values must be distinct and sorted ascending");
    }
    if (K < 2) throw InvalidArgument("K must be >= 2");
    if (W < 1) throw InvalidArgument("W must be >= 1");
    if (!(t > 0.0 && u > t)) throw InvalidArgument("tuning requires u > t > 0");
    if (!(variance_threshold > 0.0 && variance_threshold <= 1.0))
        throw InvalidArgument("variance_threshold must lie in (0, 1]");
    if (grid_points < 2) throw InvalidArgument("grid_points must be >= 2");
    if (n_mc < 1) throw InvalidArgument("n_mc must be >= 1");
    if (workers < 1) throw InvalidArgument("workers must be >= 1");
    model.mcmc.validate();
}

ModelFactory joint_model_factory(const TuningConfig& config)
{
    return [spec = config.model, n_mc = config.n_mc](const Cohort& training, std::uint64_t seed) {
        joint::JointModelSpec s = spec;
        s.mcmc.seed = seed;
        s.keep_random_effect_draws = false;
        s.chain_workers = 1;
        auto fit = joint::fit_joint(training, s);
        auto cols = covariate_columns(training.covariate_schema(), fit.covariate_names);
        return std::shared_ptr<const Model>(std::make_shared<JointModelAdapter>(std::move(fit), n_mc, std::move(cols)));
    };
}

std::shared_ptr<const Model> wrap_joint_fit(joint::JointModelFit fit, int n_mc)
{
    std::vector<std::size_t> cols(fit.covariate_names.size());
    for (std::size_t j = 0; j < cols.size(); ++j) cols[j] = j;
    return std::make_shared<JointModelAdapter>(std::move(fit), n_mc, std::move(cols));
}

Cohort history_up_to(const Cohort& cohort, double t)
{
    std::vector<SurvivalRecord> subjects(cohort.subjects().begin(), cohort.subjects().end());
    std::vector<LongitudinalRecord> kept;
    for (const auto& r : cohort.measurements())
        if (r.time <= t) kept.push_back(r);
    return Cohort::create(std::move(subjects), std::move(kept), cohort.covariate_schema());
}

IndexSubject index_subject(const Cohort& cohort, std::size_t i, double t)
{
    const auto& s = cohort.subject(i);
    IndexSubject out{s.subject_id, s.observed_time, s.event, s.covariates, {}};
    for (const auto& r : cohort.measurements_of(i))
        if (r.time <= t) out.history.push_back({r.time, r.value});
    return out;
}

Personalizer::Personalizer(const Cohort& training, const Cohort& index_cohort, const TuningConfig& config)
{
    const auto grid = fpca::equispaced_grid(0.0, config.t, config.grid_points);
    fpca::FpcaOptions opts;
    opts.variance_threshold = config.variance_threshold;

    const Cohort train_hist = history_up_to(training, config.t);
    const Cohort index_hist = history_up_to(index_cohort, config.t);
    train_fpca_ = fpca::fit_fpca(train_hist, grid, opts);
    try {
        index_fpca_ = fpca::fit_fpca(index_hist, grid, opts);
        alignment_ = fpca::basis_alignment(train_fpca_, index_fpca_);
    } catch (const InvalidArgument& e) {
        spdlog::debug("tuner: index-set FPCA not estimable ({}); scoring index subjects with the training FPCA",
                      e.what());
        index_fpca_ = train_fpca_;
        index_shared_ = true;
    }
    const auto stdz = similarity::FeatureStandardization::from_training(training, config.categorical);
    train_features_ = similarity::build_features(train_hist, train_fpca_, stdz, train_fpca_.r);
    index_features_ = similarity::build_features(index_hist, index_fpca_, stdz, train_fpca_.r);
}

similarity::SimilarityRanking Personalizer::rank(std::size_t index_row) const
{
    return similarity::rank_similar(index_features_.subject_ids.at(index_row), index_features_.row(index_row),
                                    train_features_);
}

std::vector<std::string> Personalizer::subset(const similarity::SimilarityRanking& ranking, double mp) const
{
    auto ids = similarity::select_subpopulation(ranking, mp, training_size());
    std::sort(ids.begin(), ids.end());
    return ids;
}

std::uint64_t fit_seed(std::uint64_t master, int repeat, int fold, const std::vector<std::string>& subset_ids)
{
    std::uint64_t h = 0x5eedf17ULL;
    for (const auto& id : subset_ids) h = hash_combine(h, std::string_view(id));
    return derive_seed(master, repeat, fold, h);
}

std::uint64_t prediction_seed(std::uint64_t master, int repeat, int fold, const std::string& subject_id, double mp)
{
    return derive_seed(master, repeat, fold, std::string_view(subject_id), mp);
}

PersonalizedPrediction personalized_predict(const Cohort& training, const IndexSubject& subject, double mp,
                                            const TuningConfig& config, const ModelFactory& factory, int repeat,
                                            int fold)
{
    if (subject.observed_time < config.t)
        throw InvalidArgument("subject " + subject.subject_id + " is not at risk at the landmark time");
    std::vector<LongitudinalRecord> hist;
    for (const auto& h : subject.history) hist.push_back({subject.subject_id, h.time, h.value});
    const Cohort index_cohort = Cohort::create({{subject.subject_id, subject.observed_time, subject.event, subject.covariates}},
                                               std::move(hist), training.covariate_schema());
    const Personalizer p(training, index_cohort, config);
    const auto ids = p.subset(p.rank(0), mp);
    const auto model = (factory ? factory : joint_model_factory(config))(training.subset(ids),
                                                                        fit_seed(config.master_seed, repeat, fold, ids));
    PersonalizedPrediction out;
    out.m = ids.size();
    out.converged = model->converged();
    const auto seed = prediction_seed(config.master_seed, repeat, fold, subject.subject_id, mp);
    out.pi_t = model->predict(subject, config.t, config.u, seed);
    if (scoring::needs_censored_prediction(subject.observed_time, subject.event, config.u))
        out.pi_T = model->predict(subject, subject.observed_time, config.u, seed);
    return out;
}

std::vector<FoldResult> evaluate_fold(const Cohort& train, const Cohort& test, const TuningConfig& config,
                                      const ModelFactory& factory_in, int repeat, int fold)
{
    const ModelFactory factory = factory_in ? factory_in : joint_model_factory(config);
    const Cohort at_risk = truncate_history(test, config.t);
    const Personalizer p(train, at_risk, config);
    const std::size_t n_test = at_risk.size();
    const std::size_t n_mp = config.mp_grid.size();

    // subpopulations; identical ones share a fit
    std::map<std::vector<std::string>, std::size_t> unique;
    std::vector<const std::vector<std::string>*> unique_ids;
    std::vector<std::size_t> fit_of(n_mp * n_test);
    for (std::size_t j = 0; j < n_test; ++j) {
        const auto ranking = p.rank(j);
        for (std::size_t m = 0; m < n_mp; ++m) {
            auto ids = p.subset(ranking, config.mp_grid[m]);
            auto [it, inserted] = unique.try_emplace(std::move(ids), unique.size());
            if (inserted) unique_ids.push_back(&it->first);
            fit_of[m * n_test + j] = it->second;
        }
    }

    std::vector<std::shared_ptr<const Model>> models(unique_ids.size());
    parallel_for(unique_ids.size(), config.workers, [&](std::size_t f) {
        const auto& ids = *unique_ids[f];
        try {
            auto model = factory(train.subset(ids), fit_seed(config.master_seed, repeat, fold, ids));
            if (config.skip_nonconverged && !model->converged()) return;
            models[f] = std::move(model);
        } catch (const InfeasibleFit& e) {
            spdlog::debug("tuner: infeasible fit on {} subjects: {}", ids.size(), e.what());
        }
    });

    std::vector<std::optional<scoring::SubjectLoss>> losses(n_mp * n_test);
    parallel_for(n_mp * n_test, config.workers, [&](std::size_t task) {
        const std::size_t m = task / n_test, j = task % n_test;
        const auto& model = models[fit_of[task]];
        if (!model) return;
        const IndexSubject s = index_subject(at_risk, j, config.t);
        const auto seed = prediction_seed(config.master_seed, repeat, fold, s.subject_id, config.mp_grid[m]);
        const double pi_t = model->predict(s, config.t, config.u, seed);
        std::optional<double> pi_T;
        if (scoring::needs_censored_prediction(s.observed_time, s.event, config.u))
            pi_T = model->predict(s, s.observed_time, config.u, seed);
        losses[task] = scoring::subject_loss(s.subject_id, s.observed_time, s.event, pi_t, pi_T, config.t, config.u);
    });

    std::vector<FoldResult> out;
    for (std::size_t m = 0; m < n_mp; ++m) {
        FoldResult r;
        r.mp = config.mp_grid[m];
        r.repeat = repeat;
        r.fold = fold;
        std::vector<scoring::SubjectLoss> scored;
        std::vector<std::size_t> used;
        for (std::size_t j = 0; j < n_test; ++j) {
            const std::size_t task = m * n_test + j;
            if (!losses[task]) {
                ++r.skipped;
                continue;
            }
            scored.push_back(*losses[task]);
            used.push_back(fit_of[task]);
            if (!models[fit_of[task]]->converged()) ++r.nonconverged;
        }
        std::sort(used.begin(), used.end());
        r.fits = static_cast<std::size_t>(std::unique(used.begin(), used.end()) - used.begin());
        r.at_risk = scored.size();
        if (!scored.empty()) r.brier = scoring::brier(scored, scored.size(), config.t, config.u).value;
        if (r.skipped > 0)
            spdlog::warn("tuner: repeat {} fold {} M_p={}: {} of {} personalized fits infeasible", repeat, fold, r.mp,
                         r.skipped, n_test);
        out.push_back(r);
    }
    return out;
}

TuningReport tune(const Cohort& cohort, const TuningConfig& config, const ModelFactory& factory_in)
{
    config.validate();
    if (cohort.size() < static_cast<std::size_t>(config.K))
        throw InvalidArgument("cohort has fewer subjects than folds");
    const ModelFactory factory = factory_in ? factory_in : joint_model_factory(config);

    TuningReport report;
    report.config = config;
    for (int w = 0; w < config.W; ++w) {
        const auto folds = kfold_split(cohort, config.K, derive_seed(config.master_seed, w));
        for (int k = 0; k < config.K; ++k) {
            const auto [train, test] = split_fold(cohort, folds, k);
            try {
                auto res = evaluate_fold(train, test, config, factory, w, k);
                report.folds.insert(report.folds.end(), res.begin(), res.end());
            } catch (const EmptyResultError&) {
                spdlog::warn("tuner: repeat {} fold {} has no test subject at risk at t={}", w, k, config.t);
                for (double mp : config.mp_grid) report.folds.push_back({mp, w, k, std::nullopt, 0, 0, 0, 0});
            }
            spdlog::info("tuner: repeat {}/{} fold {}/{} done", w + 1, config.W, k + 1, config.K);
        }
    }

    for (double mp : config.mp_grid) {
        TuningEntry e;
        e.mp = mp;
        for (const auto& f : report.folds) {
            if (f.mp != mp) continue;
            e.infeasible_fits += f.skipped;
            e.scored += f.at_risk;
            e.nonconverged += f.nonconverged;
            if (f.brier) e.fold_values.push_back(*f.brier);
        }
        const double attempted = static_cast<double>(e.infeasible_fits + e.scored);
        e.skip_rate = attempted > 0 ? static_cast<double>(e.infeasible_fits) / attempted : 0.0;
        e.unreliable = e.skip_rate > 0.05;
        e.feasible = !e.fold_values.empty();
        if (e.fold_values.size() >= 2) {
            const auto ms = scoring::cv_standard_error(e.fold_values);
            e.mean = ms.mean;
            e.se = ms.se;
        } else if (e.feasible) {
            e.mean = e.fold_values.front();
            e.se = std::numeric_limits<double>::quiet_NaN();
        }
        if (e.feasible) {
            const auto [lo, hi] = scoring::confidence_interval(e.mean, std::isnan(e.se) ? 0.0 : e.se, 0.95);
            e.ci_lower = lo;
            e.ci_upper = hi;
        }
        if (!e.feasible) spdlog::warn("tuner: every personalized fit at M_p={} was infeasible", mp);
        report.entries.push_back(std::move(e));
    }
    const TuningEntry* best = nullptr;
    for (const auto& e : report.entries)
        if (e.feasible && (!best || e.mean < best->mean)) best = &e;
    if (best) report.selected_mp = best->mp;
    return report;
}

TuningEntry validate(const Cohort& holdout, double mp, const TuningConfig& config, const ModelFactory& factory)
{
    if (holdout.empty()) throw EmptyResultError("validation cohort is empty");
    TuningConfig cfg = config;
    cfg.mp_grid = {mp};
    return tune(holdout, cfg, factory).entries.front();
}

std::string report_csv(const TuningReport& report)
{
    std::ostringstream out;
    out << "mp,repeat,fold,brier,at_risk,skipped\n";
    for (const auto& f : report.folds) {
        out << format_grid_value(f.mp) << ',' << f.repeat << ',' << f.fold << ',' << (f.brier ? format_real(*f.brier) : "")
            << ',' << f.at_risk << ',' << f.skipped << '\n';
    }
    return out.str();
}

} // namespace jdp::tuner
