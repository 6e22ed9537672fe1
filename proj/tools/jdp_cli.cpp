// jdp: command-line front-end for simulation, joint-model fitting, M_p
// tuning, held-out validation, dynamic prediction and Brier scoring.
//
// Exit codes: 0 success, 1 input or configuration error, 2 generation error,
// 3 every grid value infeasible, 4 subject not at risk at the landmark.
// Every output file is written to a temporary sibling and renamed, so a
// failing command leaves no partial outputs behind.

#include "jdp/dataset.hpp"
#include "jdp/dynpred.hpp"
#include "jdp/error.hpp"
#include "jdp/io.hpp"
#include "jdp/jointfit.hpp"
#include "jdp/random.hpp"
#include "jdp/scoring.hpp"
#include "jdp/simgen.hpp"
#include "jdp/tuner.hpp"

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using jdp::io::json;

namespace {

enum Exit : int { ok = 0, input_error = 1, generation_error = 2, all_infeasible = 3, not_at_risk = 4 };

struct ExitError : std::runtime_error {
    ExitError(int code, const std::string& what) : std::runtime_error(what), code(code) {}
    int code;
};

std::string utc_now()
{
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::optional<std::uint64_t> env_seed()
{
    const char* s = std::getenv("JDP_SEED");
    if (!s || !*s) return std::nullopt;
    try {
        std::size_t pos = 0;
        const auto v = std::stoull(s, &pos);
        if (pos != std::string(s).size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw jdp::InvalidArgument(std::string("JDP_SEED must be a non-negative integer, got '") + s + "'");
    }
}

// Flag beats JDP_SEED beats the config file.
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, std::uint64_t from_config)
{
    if (flag) return *flag;
    if (auto e = env_seed()) return *e;
    return from_config;
}

class Manifest {
public:
    Manifest(std::string command, fs::path out) : out_(std::move(out)), started_(utc_now())
    {
        body_["command"] = std::move(command);
    }

    void config(const json& c, std::uint64_t master_seed)
    {
        body_["config_digest"] = jdp::io::config_digest(c);
        body_["master_seed"] = master_seed;
        body_["config"] = c;
    }
    void output(const fs::path& p) { outputs_.push_back(p.filename().string()); }
    json& extra() { return body_; }

    void write()
    {
        json m;
        m["command"] = body_["command"];
        m["toolkit_version"] = jdp::io::toolkit_version;
        m["started"] = started_;
        m["finished"] = utc_now();
        for (auto& [k, v] : body_.items())
            if (k != "command") m[k] = v;
        m["outputs"] = outputs_;
        jdp::io::write_atomic(out_ / "manifest.json", m.dump(2) + "\n");
    }

private:
    fs::path out_;
    std::string started_;
    json body_;
    std::vector<std::string> outputs_;
};

void prepare_out(const fs::path& out)
{
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec || !fs::is_directory(out)) throw jdp::InvalidArgument("cannot create output directory " + out.string());
}

jdp::Cohort load_cohort_dir(const fs::path& dir)
{
    const auto lon = dir / "longitudinal.csv";
    const auto surv = dir / "survival.csv";
    for (const auto& p : {lon, surv})
        if (!fs::exists(p)) throw jdp::InvalidArgument("missing " + p.string());
    return jdp::load_cohort(lon, surv);
}

void emit_cohort_atomic(const jdp::Cohort& cohort, const fs::path& out)
{
    const auto lon_tmp = out / "longitudinal.csv.tmp";
    const auto surv_tmp = out / "survival.csv.tmp";
    try {
        jdp::emit_cohort(cohort, lon_tmp, surv_tmp);
    } catch (...) {
        fs::remove(lon_tmp);
        fs::remove(surv_tmp);
        throw;
    }
    fs::rename(lon_tmp, out / "longitudinal.csv");
    fs::rename(surv_tmp, out / "survival.csv");
}

// Shared by tune, validate, fit and predict.
struct TuningOptions {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<int> K, W, n_mc;
    std::optional<double> t, u;
    std::vector<double> mp_grid;
    std::optional<int> n_iterations, n_burnin, n_chains;

    void add(CLI::App* cmd, bool grid)
    {
        cmd->add_option("--config", config_path, "tuning configuration (JSON)")->check(CLI::ExistingFile);
        cmd->add_option("--seed", seed, "master seed (overrides JDP_SEED and the config)");
        cmd->add_option("--t", t, "landmark time");
        cmd->add_option("--u", u, "prediction horizon");
        cmd->add_option("--n-mc", n_mc, "Monte Carlo draws per prediction");
        cmd->add_option("--n-iterations", n_iterations, "MCMC iterations per chain");
        cmd->add_option("--n-burnin", n_burnin, "MCMC burn-in per chain");
        cmd->add_option("--n-chains", n_chains, "MCMC chains");
        if (grid) {
            cmd->add_option("--K", K, "folds");
            cmd->add_option("--W", W, "repetitions");
            cmd->add_option("--mp-grid", mp_grid, "M_p grid values")->delimiter(',');
        }
    }

    // Prediction accepts u == t (pi = 1); tuning and validation do not.
    jdp::tuner::TuningConfig resolve(int workers, bool horizon_may_equal_landmark = false) const
    {
        jdp::tuner::TuningConfig c;
        if (!config_path.empty()) c = jdp::io::tuning_config_from_json(jdp::io::read_json_file(config_path));
        c.master_seed = resolve_seed(seed, c.master_seed);
        if (K) c.K = *K;
        if (W) c.W = *W;
        if (n_mc) c.n_mc = *n_mc;
        if (t) c.t = *t;
        if (u) c.u = *u;
        if (!mp_grid.empty()) c.mp_grid = mp_grid;
        if (n_iterations) c.model.mcmc.n_iterations = *n_iterations;
        if (n_burnin) c.model.mcmc.n_burnin = *n_burnin;
        if (n_chains) c.model.mcmc.n_chains = *n_chains;
        c.workers = workers;
        if (horizon_may_equal_landmark && c.u == c.t) {
            auto probe = c;
            probe.u = c.t + 1.0;
            probe.validate();
        } else {
            c.validate();
        }
        return c;
    }
};

json tuning_config_json(const jdp::tuner::TuningConfig& c)
{
    // workers is deliberately excluded: results do not depend on it
    return jdp::io::to_json(c);
}

// ---------------------------------------------------------------- simulate

struct SimulateArgs {
    std::string config_path;
    std::optional<int> scenario, n;
    std::optional<std::uint64_t> seed;
    std::string mode;
};

int cmd_simulate(const SimulateArgs& a, const fs::path& out, int workers)
{
    json cfg = a.config_path.empty() ? json::object() : jdp::io::read_json_file(a.config_path);
    if (!cfg.is_object()) throw jdp::InvalidArgument("scenario config must be a JSON object");
    if (a.scenario) cfg["scenario"] = *a.scenario;
    if (a.n) cfg["n"] = *a.n;
    if (!a.mode.empty()) cfg["generator_mode"] = a.mode;
    auto sf = jdp::io::scenario_from_json(cfg);
    sf.seed = resolve_seed(a.seed, sf.seed);

    prepare_out(out);
    jdp::simgen::GenerationStats stats;
    jdp::Cohort cohort;
    try {
        cohort = jdp::simgen::generate_scenario(sf.config, sf.seed, sf.mode, &stats, workers);
    } catch (const jdp::InvalidArgument&) {
        throw;
    } catch (const jdp::Error& e) {
        throw ExitError(generation_error, std::string("generation failed: ") + e.what());
    }
    emit_cohort_atomic(cohort, out);

    Manifest m("simulate", out);
    m.config(jdp::io::to_json(sf), sf.seed);
    m.extra()["subjects"] = cohort.size();
    m.extra()["events"] = cohort.event_count();
    m.extra()["resampled_draws"] = stats.resampled_draws;
    m.extra()["unresolved_subjects"] = stats.unresolved_subjects;
    m.output(out / "longitudinal.csv");
    m.output(out / "survival.csv");
    m.write();
    std::cout << "simulated " << cohort.size() << " subjects (" << cohort.event_count() << " events)\n";
    return ok;
}

// ---------------------------------------------------------------- fit

int cmd_fit(const std::string& cohort_dir, const TuningOptions& opts, const fs::path& out, int workers)
{
    const auto cohort = load_cohort_dir(cohort_dir);
    auto cfg = opts.resolve(workers);
    auto spec = cfg.model;
    spec.mcmc.seed = cfg.master_seed;
    spec.keep_random_effect_draws = false;
    spec.chain_workers = workers;
    prepare_out(out);
    jdp::joint::JointModelFit fit;
    try {
        fit = jdp::joint::fit_joint(cohort, spec);
    } catch (const jdp::InfeasibleFit& e) {
        throw ExitError(all_infeasible, std::string("fit infeasible: ") + e.what());
    }
    jdp::io::write_atomic(out / "fit.json", jdp::io::to_json(fit).dump() + "\n");

    Manifest m("fit", out);
    m.config(tuning_config_json(cfg), cfg.master_seed);
    m.extra()["subjects"] = cohort.size();
    m.extra()["rhat_alpha"] = std::isfinite(fit.rhat_alpha) ? json(fit.rhat_alpha) : json(nullptr);
    m.extra()["converged"] = fit.converged;
    m.output(out / "fit.json");
    m.write();
    const auto mean = fit.posterior_mean();
    std::cout << "posterior mean alpha " << mean.alpha << ", R-hat " << fit.rhat_alpha
              << (fit.converged ? "" : " (not converged)") << '\n';
    return ok;
}

// ---------------------------------------------------------------- tune

int cmd_tune(const std::string& cohort_dir, const TuningOptions& opts, const fs::path& out, int workers)
{
    const auto cohort = load_cohort_dir(cohort_dir);
    const auto cfg = opts.resolve(workers);
    prepare_out(out);
    const auto report = jdp::tuner::tune(cohort, cfg);

    jdp::io::write_atomic(out / "tuning_report.json", jdp::io::to_json(report).dump(2) + "\n");
    jdp::io::write_atomic(out / "tuning_report.csv", jdp::tuner::report_csv(report));
    Manifest m("tune", out);
    m.config(tuning_config_json(cfg), cfg.master_seed);
    m.output(out / "tuning_report.json");
    m.output(out / "tuning_report.csv");
    m.write();

    if (!report.selected_mp) throw ExitError(all_infeasible, "every M_p grid value was infeasible");
    for (const auto& e : report.entries) {
        if (e.mp != *report.selected_mp) continue;
        std::cout << "selected M_p " << e.mp << ": Brier " << e.mean << ", 95% CI [" << e.ci_lower << ", "
                  << e.ci_upper << "]" << (e.unreliable ? " (unreliable: skip rate above 5%)" : "") << '\n';
    }
    return ok;
}

// ---------------------------------------------------------------- validate

int cmd_validate(const std::string& cohort_dir, double mp, const TuningOptions& opts, const fs::path& out,
                 int workers)
{
    const auto cohort = load_cohort_dir(cohort_dir);
    const auto cfg = opts.resolve(workers);
    prepare_out(out);
    const auto entry = jdp::tuner::validate(cohort, mp, cfg);

    jdp::io::write_atomic(out / "validation_report.json", jdp::io::to_json(entry).dump(2) + "\n");
    Manifest m("validate", out);
    m.config(tuning_config_json(cfg), cfg.master_seed);
    m.extra()["mp"] = mp;
    m.output(out / "validation_report.json");
    m.write();

    if (!entry.feasible) throw ExitError(all_infeasible, "validation was infeasible at M_p " + std::to_string(mp));
    std::cout << "M_p " << mp << ": Brier " << entry.mean << ", 95% CI [" << entry.ci_lower << ", " << entry.ci_upper
              << "]\n";
    return ok;
}

// ---------------------------------------------------------------- predict

struct PredictArgs {
    std::string fit_path;
    std::string cohort_dir;
    std::string subject_dir;
    std::optional<double> mp;
};

std::vector<double> covariates_for(const jdp::SurvivalRecord& s, const std::vector<std::string>& schema,
                                   const std::vector<std::string>& names)
{
    std::vector<double> w;
    for (const auto& n : names) {
        auto it = std::find(schema.begin(), schema.end(), n);
        if (it == schema.end()) throw jdp::InvalidArgument("subject file lacks covariate '" + n + "'");
        w.push_back(s.covariates[static_cast<std::size_t>(it - schema.begin())]);
    }
    return w;
}

int cmd_predict(const PredictArgs& a, const TuningOptions& opts, const fs::path& out, int workers)
{
    if (a.fit_path.empty() == a.cohort_dir.empty())
        throw jdp::InvalidArgument("give exactly one of --fit and --cohort-dir");
    if (a.mp && a.cohort_dir.empty()) throw jdp::InvalidArgument("--mp needs --cohort-dir");
    auto cfg = opts.resolve(workers, true);
    if (!(cfg.u >= cfg.t)) throw jdp::InvalidArgument("u must not precede t");

    const auto subjects = load_cohort_dir(a.subject_dir);
    for (const auto& s : subjects.subjects())
        if (s.observed_time < cfg.t)
            throw ExitError(not_at_risk, "subject " + s.subject_id + " is not at risk at t = " + std::to_string(cfg.t));
    const jdp::Cohort index = jdp::tuner::history_up_to(subjects, cfg.t);
    prepare_out(out);

    // fit per distinct subpopulation; a --fit file serves every subject
    std::map<std::vector<std::string>, std::shared_ptr<const jdp::joint::JointModelFit>> fits;
    std::vector<std::shared_ptr<const jdp::joint::JointModelFit>> fit_of(index.size());
    std::vector<std::size_t> m_of(index.size(), 0);
    if (!a.fit_path.empty()) {
        auto fit = std::make_shared<const jdp::joint::JointModelFit>(
            jdp::io::joint_fit_from_json(jdp::io::read_json_file(a.fit_path)));
        std::fill(fit_of.begin(), fit_of.end(), fit);
        std::fill(m_of.begin(), m_of.end(), fit->subject_ids.size());
    } else {
        const auto training = load_cohort_dir(a.cohort_dir);
        const double mp = a.mp.value_or(1.0);
        if (!(mp > 0.0 && mp <= 1.0)) throw jdp::InvalidArgument("--mp must lie in (0, 1]");
        const jdp::tuner::Personalizer p(training, index, cfg);
        for (std::size_t j = 0; j < index.size(); ++j) {
            const auto ids = p.subset(p.rank(j), mp);
            auto& slot = fits[ids];
            if (!slot) {
                auto spec = cfg.model;
                spec.mcmc.seed = jdp::tuner::fit_seed(cfg.master_seed, 0, 0, ids);
                spec.keep_random_effect_draws = false;
                spec.chain_workers = workers;
                try {
                    slot = std::make_shared<const jdp::joint::JointModelFit>(
                        jdp::joint::fit_joint(training.subset(ids), spec));
                } catch (const jdp::InfeasibleFit& e) {
                    throw ExitError(all_infeasible, std::string("personalized fit infeasible: ") + e.what());
                }
            }
            fit_of[j] = slot;
            m_of[j] = ids.size();
        }
    }

    json results = json::array();
    json used = json::array();
    for (std::size_t j = 0; j < index.size(); ++j) {
        const auto& s = index.subject(j);
        const auto& fit = *fit_of[j];
        jdp::dynpred::PredictionRequest req;
        for (const auto& r : index.measurements_of(j)) req.history.push_back({r.time, r.value});
        req.covariates = covariates_for(s, index.covariate_schema(), fit.covariate_names);
        req.t = cfg.t;
        req.u = cfg.u;
        req.n_mc = cfg.n_mc;
        req.seed = jdp::tuner::prediction_seed(cfg.master_seed, 0, 0, s.subject_id, a.mp.value_or(1.0));
        const auto res = jdp::dynpred::predict_survival(fit, req);
        if (res.extrapolated) spdlog::warn("subject {}: horizon {} lies beyond the baseline-hazard span", s.subject_id, cfg.u);
        results.push_back(jdp::io::to_json(res, s.subject_id, cfg.t, cfg.u));
        used.push_back({{"subject_id", s.subject_id}, {"m", m_of[j]}, {"converged", fit.converged}});
    }
    const json doc = results.size() == 1 ? results[0] : results;
    jdp::io::write_atomic(out / "prediction.json", doc.dump(2) + "\n");

    Manifest m("predict", out);
    json c = tuning_config_json(cfg);
    c["source"] = a.fit_path.empty() ? json{{"cohort_dir", a.cohort_dir}} : json{{"fit", a.fit_path}};
    if (a.mp) c["mp"] = *a.mp;
    m.config(c, cfg.master_seed);
    m.extra()["subpopulations"] = used;
    m.output(out / "prediction.json");
    m.write();
    std::cout << doc.dump(2) << '\n';
    return ok;
}

// ---------------------------------------------------------------- score

// Predictions CSV: subject_id,observed_time,event,pi_t,pi_T (pi_T may be empty).
int cmd_score(const std::string& path, double t, double u, const fs::path& out)
{
    std::ifstream in(path);
    if (!in) throw jdp::InvalidArgument("cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw jdp::ParseError(path, 1, 1, "empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "subject_id,observed_time,event,pi_t,pi_T")
        throw jdp::ParseError(path, 1, 1, "header must be subject_id,observed_time,event,pi_t,pi_T");

    const auto number = [&](const std::string& f, std::size_t row, std::size_t col) {
        try {
            std::size_t pos = 0;
            const double v = std::stod(f, &pos);
            if (pos == f.size()) return v;
        } catch (const std::exception&) {
        }
        throw jdp::ParseError(path, row, col, "not a number: '" + f + "'");
    };

    std::vector<jdp::scoring::SubjectLoss> losses;
    std::size_t row = 1, not_at_risk_rows = 0;
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) f.push_back(cell);
        if (line.back() == ',') f.emplace_back();
        if (f.size() != 5) throw jdp::ParseError(path, row, 1, "expected 5 fields");
        const double T = number(f[1], row, 2);
        if (f[2] != "0" && f[2] != "1") throw jdp::ParseError(path, row, 3, "event must be 0 or 1");
        if (T < t) {
            ++not_at_risk_rows;
            continue;
        }
        std::optional<double> pi_T;
        if (!f[4].empty()) pi_T = number(f[4], row, 5);
        losses.push_back(jdp::scoring::subject_loss(f[0], T, f[2] == "1", number(f[3], row, 4), pi_T, t, u));
    }
    const auto est = jdp::scoring::brier(losses, losses.size(), t, u);

    prepare_out(out);
    json per = json::array();
    for (const auto& l : losses) per.push_back({{"subject_id", l.subject_id}, {"loss", l.loss}});
    const json doc{{"t", t}, {"u", u}, {"brier", est.value}, {"at_risk", est.at_risk_count},
                   {"excluded_not_at_risk", not_at_risk_rows}, {"losses", per}};
    jdp::io::write_atomic(out / "score.json", doc.dump(2) + "\n");
    Manifest m("score", out);
    m.config(json{{"predictions", path}, {"t", t}, {"u", u}}, 0);
    m.output(out / "score.json");
    m.write();
    std::cout << "Brier " << est.value << " over " << est.at_risk_count << " at-risk subjects\n";
    return ok;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Personalized dynamic prediction with joint models"};
    app.require_subcommand(1);
    int workers = 1;
    std::string out = ".";
    std::string log_level = "info";
    app.add_option("--workers", workers, "worker threads")->check(CLI::PositiveNumber);
    app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off");

    SimulateArgs sim;
    auto* simulate = app.add_subcommand("simulate", "generate a synthetic cohort");
    simulate->add_option("--config", sim.config_path, "scenario configuration (JSON)")->check(CLI::ExistingFile);
    simulate->add_option("--scenario", sim.scenario, "preset 1 or 2");
    simulate->add_option("--n", sim.n, "subjects");
    simulate->add_option("--seed", sim.seed, "seed (overrides JDP_SEED and the config)");
    simulate->add_option("--generator-mode", sim.mode, "closed_form or numeric");

    std::string cohort_dir, predictions;
    double mp = 1.0, t = 1.0, u = 4.0;
    TuningOptions fit_opts, tune_opts, val_opts, pred_opts;

    auto* fit = app.add_subcommand("fit", "fit the joint model to a cohort");
    fit->add_option("--cohort-dir", cohort_dir, "directory with longitudinal.csv and survival.csv")->required();
    fit_opts.add(fit, false);

    auto* tune = app.add_subcommand("tune", "grid-search M_p by repeated K-fold cross-validation");
    tune->add_option("--cohort-dir", cohort_dir, "directory with longitudinal.csv and survival.csv")->required();
    tune_opts.add(tune, true);

    auto* validate = app.add_subcommand("validate", "Brier score of one M_p on a held-out cohort");
    validate->add_option("--cohort-dir", cohort_dir, "held-out cohort directory")->required();
    validate->add_option("--mp", mp, "M_p to evaluate")->required();
    val_opts.add(validate, true);

    PredictArgs pa;
    auto* predict = app.add_subcommand("predict", "dynamic survival prediction for new subjects");
    predict->add_option("--fit", pa.fit_path, "fit.json from the fit command")->check(CLI::ExistingFile);
    predict->add_option("--cohort-dir", pa.cohort_dir, "training cohort; fits a personalized model");
    predict->add_option("--mp", pa.mp, "similarity proportion (needs --cohort-dir)");
    predict->add_option("--subject-dir", pa.subject_dir, "subjects' longitudinal.csv and survival.csv")->required();
    pred_opts.add(predict, false);

    auto* score = app.add_subcommand("score", "censoring-corrected Brier score of a predictions CSV");
    score->add_option("--predictions", predictions, "subject_id,observed_time,event,pi_t,pi_T")
        ->required()
        ->check(CLI::ExistingFile);
    score->add_option("--t", t, "landmark time");
    score->add_option("--u", u, "prediction horizon");

    for (auto* cmd : {simulate, fit, tune, validate, predict, score})
        cmd->add_option("--out", out, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? ok : input_error;
    }

    auto logger = spdlog::stderr_color_mt("jdp");
    spdlog::set_default_logger(logger);
    spdlog::set_level(spdlog::level::from_str(log_level));

    try {
        if (*simulate) return cmd_simulate(sim, out, workers);
        if (*fit) return cmd_fit(cohort_dir, fit_opts, out, workers);
        if (*tune) return cmd_tune(cohort_dir, tune_opts, out, workers);
        if (*validate) return cmd_validate(cohort_dir, mp, val_opts, out, workers);
        if (*predict) return cmd_predict(pa, pred_opts, out, workers);
        if (*score) return cmd_score(predictions, t, u, out);
    } catch (const ExitError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return e.code;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return input_error;
    }
    return input_error;
}
