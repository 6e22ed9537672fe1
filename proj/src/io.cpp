#include "jdp/io.hpp"

#include "jdp/error.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace jdp::io {

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where)
{
    if (!j.is_object()) throw InvalidArgument(where + " must be a JSON object");
    for (const auto& [key, _] : j.items())
        if (!allowed.count(key)) throw InvalidArgument("unknown key '" + key + "' in " + where);
}

template <class T>
void read_if(const json& j, const char* key, T& out)
{
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw InvalidArgument(std::string("bad value for '") + key + "': " + e.what());
    }
}

json number_or_null(double x)
{
    return std::isfinite(x) ? json(x) : json(nullptr);
}

} // namespace

json read_json_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    const std::string text = buf.str();
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        std::size_t line = 1, col = 1;
        const std::size_t upto = std::min<std::size_t>(e.byte > 0 ? e.byte - 1 : 0, text.size());
        for (std::size_t i = 0; i < upto; ++i) {
            if (text[i] == '\n') {
                ++line;
                col = 1;
            } else {
                ++col;
            }
        }
        throw ParseError(path.string(), line, col, "malformed JSON");
    }
}

void write_atomic(const std::filesystem::path& path, const std::string& content)
{
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write " + tmp.string());
        out << content;
        out.flush();
        if (!out) {
            std::filesystem::remove(tmp);
            throw Error("failed writing " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

std::string config_digest(const json& config)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : config.dump()) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

ScenarioFile scenario_from_json(const json& j)
{
    reject_unknown(j,
                   {"scenario", "beta0", "beta1", "tau0", "tau1", "tau01", "sigma", "time_grid", "lambda", "v", "alpha",
                    "gamma1", "gamma2", "censor_upper", "n", "t_landmark", "u_horizon", "seed", "generator_mode"},
                   "scenario config");
    ScenarioFile s;
    int preset = 1;
    read_if(j, "scenario", preset);
    s.config = simgen::scenario_preset(preset);
    auto& l = s.config.longitudinal;
    auto& e = s.config.event;
    read_if(j, "beta0", l.beta0);
    read_if(j, "beta1", l.beta1);
    read_if(j, "tau0", l.tau0);
    read_if(j, "tau1", l.tau1);
    read_if(j, "tau01", l.tau01);
    read_if(j, "sigma", l.sigma);
    read_if(j, "time_grid", l.time_grid);
    read_if(j, "lambda", e.lambda);
    read_if(j, "v", e.v);
    read_if(j, "alpha", e.alpha);
    read_if(j, "gamma1", e.gamma1);
    read_if(j, "gamma2", e.gamma2);
    read_if(j, "censor_upper", e.censor_upper);
    read_if(j, "n", s.config.n);
    read_if(j, "t_landmark", s.config.t_landmark);
    read_if(j, "u_horizon", s.config.u_horizon);
    read_if(j, "seed", s.seed);
    std::string mode = simgen::to_string(s.mode);
    read_if(j, "generator_mode", mode);
    s.mode = simgen::generator_mode_from_string(mode);
    s.config.validate();
    return s;
}

json to_json(const ScenarioFile& s)
{
    const auto& l = s.config.longitudinal;
    const auto& e = s.config.event;
    return json{{"beta0", l.beta0},         {"beta1", l.beta1},   {"tau0", l.tau0},
                {"tau1", l.tau1},           {"tau01", l.tau01},   {"sigma", l.sigma},
                {"time_grid", l.time_grid}, {"lambda", e.lambda}, {"v", e.v},
                {"alpha", e.alpha},         {"gamma1", e.gamma1}, {"gamma2", e.gamma2},
                {"censor_upper", e.censor_upper}, {"n", s.config.n}, {"t_landmark", s.config.t_landmark},
                {"u_horizon", s.config.u_horizon}, {"seed", s.seed}, {"generator_mode", simgen::to_string(s.mode)}};
}

tuner::TuningConfig tuning_config_from_json(const json& j)
{
    reject_unknown(j,
                   {"mp_grid", "K", "W", "t", "u", "variance_threshold", "grid_points", "n_mc", "master_seed",
                    "workers", "skip_nonconverged", "categorical", "mcmc", "model"},
                   "tuning config");
    tuner::TuningConfig c;
    read_if(j, "mp_grid", c.mp_grid);
    read_if(j, "K", c.K);
    read_if(j, "W", c.W);
    read_if(j, "t", c.t);
    read_if(j, "u", c.u);
    read_if(j, "variance_threshold", c.variance_threshold);
    read_if(j, "grid_points", c.grid_points);
    read_if(j, "n_mc", c.n_mc);
    read_if(j, "master_seed", c.master_seed);
    read_if(j, "workers", c.workers);
    read_if(j, "skip_nonconverged", c.skip_nonconverged);
    read_if(j, "categorical", c.categorical);
    if (j.contains("mcmc")) {
        const auto& m = j.at("mcmc");
        reject_unknown(m, {"n_iterations", "n_burnin", "n_thin", "n_chains"}, "mcmc");
        read_if(m, "n_iterations", c.model.mcmc.n_iterations);
        read_if(m, "n_burnin", c.model.mcmc.n_burnin);
        read_if(m, "n_thin", c.model.mcmc.n_thin);
        read_if(m, "n_chains", c.model.mcmc.n_chains);
    }
    if (j.contains("model")) {
        const auto& m = j.at("model");
        reject_unknown(m, {"n_internal_knots", "degree", "covariates", "min_subjects"}, "model");
        read_if(m, "n_internal_knots", c.model.n_internal_knots);
        read_if(m, "degree", c.model.degree);
        read_if(m, "covariates", c.model.covariates);
        read_if(m, "min_subjects", c.model.min_subjects);
    }
    c.validate();
    return c;
}

json to_json(const tuner::TuningConfig& c)
{
    return json{{"mp_grid", c.mp_grid},
                {"K", c.K},
                {"W", c.W},
                {"t", c.t},
                {"u", c.u},
                {"variance_threshold", c.variance_threshold},
                {"grid_points", c.grid_points},
                {"n_mc", c.n_mc},
                {"master_seed", c.master_seed},
                {"skip_nonconverged", c.skip_nonconverged},
                {"categorical", c.categorical},
                {"mcmc",
                 {{"n_iterations", c.model.mcmc.n_iterations},
                  {"n_burnin", c.model.mcmc.n_burnin},
                  {"n_thin", c.model.mcmc.n_thin},
                  {"n_chains", c.model.mcmc.n_chains}}},
                {"model",
                 {{"n_internal_knots", c.model.n_internal_knots},
                  {"degree", c.model.degree},
                  {"covariates", c.model.covariates},
                  {"min_subjects", c.model.min_subjects}}}};
}

json to_json(const tuner::TuningEntry& e)
{
    return json{{"mp", e.mp},
                {"mean_brier", number_or_null(e.mean)},
                {"se", number_or_null(e.se)},
                {"ci95", e.feasible ? json{e.ci_lower, e.ci_upper} : json(nullptr)},
                {"fold_values", e.fold_values},
                {"infeasible_fits", e.infeasible_fits},
                {"scored_subjects", e.scored},
                {"nonconverged_fits_used", e.nonconverged},
                {"skip_rate", e.skip_rate},
                {"feasible", e.feasible},
                {"unreliable", e.unreliable}};
}

json to_json(const tuner::TuningReport& r)
{
    json entries = json::array();
    for (const auto& e : r.entries) entries.push_back(to_json(e));
    json folds = json::array();
    for (const auto& f : r.folds)
        folds.push_back({{"mp", f.mp},
                         {"repeat", f.repeat},
                         {"fold", f.fold},
                         {"brier", f.brier ? json(*f.brier) : json(nullptr)},
                         {"at_risk", f.at_risk},
                         {"skipped", f.skipped},
                         {"nonconverged", f.nonconverged},
                         {"fits", f.fits}});
    return json{{"config", to_json(r.config)},
                {"entries", entries},
                {"selected_mp", r.selected_mp ? json(*r.selected_mp) : json(nullptr)},
                {"folds", folds}};
}

json to_json(const joint::JointModelFit& fit)
{
    json draws = json::array();
    for (const auto& th : fit.draws) draws.push_back(fit.flatten(th));
    const auto& s = fit.spec;
    return json{{"spec",
                 {{"n_internal_knots", s.n_internal_knots},
                  {"degree", s.degree},
                  {"covariates", s.covariates},
                  {"fix_association_zero", s.fix_association_zero},
                  {"mcmc",
                   {{"n_iterations", s.mcmc.n_iterations},
                    {"n_burnin", s.mcmc.n_burnin},
                    {"n_thin", s.mcmc.n_thin},
                    {"n_chains", s.mcmc.n_chains},
                    {"seed", s.mcmc.seed}}}}},
                {"covariate_names", fit.covariate_names},
                {"basis",
                 {{"lower", fit.basis.lower()},
                  {"upper", fit.basis.upper()},
                  {"interior_knots", fit.basis.interior_knots()},
                  {"degree", fit.basis.degree()}}},
                {"n_chains", fit.n_chains},
                {"rhat_alpha", number_or_null(fit.rhat_alpha)},
                {"converged", fit.converged},
                {"acceptance",
                 {{"random_effects", fit.acceptance.random_effects},
                  {"beta", fit.acceptance.beta},
                  {"gamma_alpha", fit.acceptance.gamma_alpha},
                  {"baseline", fit.acceptance.baseline},
                  {"variance", fit.acceptance.variance}}},
                {"columns", fit.column_names()},
                {"draws", draws}};
}

joint::JointModelFit joint_fit_from_json(const json& j)
{
    try {
        joint::JointModelFit fit;
        const auto& s = j.at("spec");
        fit.spec.n_internal_knots = s.at("n_internal_knots").get<int>();
        fit.spec.degree = s.at("degree").get<int>();
        fit.spec.covariates = s.at("covariates").get<std::vector<std::string>>();
        fit.spec.fix_association_zero = s.at("fix_association_zero").get<bool>();
        const auto& m = s.at("mcmc");
        fit.spec.mcmc.n_iterations = m.at("n_iterations").get<int>();
        fit.spec.mcmc.n_burnin = m.at("n_burnin").get<int>();
        fit.spec.mcmc.n_thin = m.at("n_thin").get<int>();
        fit.spec.mcmc.n_chains = m.at("n_chains").get<int>();
        fit.spec.mcmc.seed = m.at("seed").get<std::uint64_t>();
        fit.covariate_names = j.at("covariate_names").get<std::vector<std::string>>();
        const auto& b = j.at("basis");
        fit.basis = BSplineBasis(b.at("lower").get<double>(), b.at("upper").get<double>(),
                                 b.at("interior_knots").get<std::vector<double>>(), b.at("degree").get<int>());
        fit.n_chains = j.at("n_chains").get<int>();
        fit.rhat_alpha = j.at("rhat_alpha").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                      : j.at("rhat_alpha").get<double>();
        fit.converged = j.at("converged").get<bool>();
        if (j.at("columns").get<std::vector<std::string>>() != fit.column_names())
            throw InvalidArgument("fit file column names do not match its spec");
        for (const auto& row : j.at("draws")) fit.draws.push_back(fit.unflatten(row.get<std::vector<double>>()));
        return fit;
    } catch (const json::exception& e) {
        throw InvalidArgument(std::string("malformed fit file: ") + e.what());
    }
}

json to_json(const dynpred::PredictionResult& r, const std::string& subject_id, double t, double u)
{
    return json{{"subject_id", subject_id},
                {"t", t},
                {"u", u},
                {"pi_hat", r.pi_hat},
                {"mc_std_error", r.mc_std_error},
                {"extrapolated", r.extrapolated}};
}

} // namespace jdp::io
