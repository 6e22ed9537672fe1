#include "jdp/jointfit.hpp"

#include "jdp/error.hpp"
#include "jdp/parallel.hpp"
#include "jdp/random.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace jdp::joint {

namespace {

constexpr double log_2pi = 1.8378770664093454836;
constexpr double fixed_prior_var = 100.0; // N(0, 10^2): beta, gamma, alpha, baseline
constexpr double scale_prior_var = 25.0;  // half-normal(0, 5^2): sigma, tau0, tau1
constexpr double smoothing_var = 1.0;     // first-order random walk on baseline coefficients
using NodeArray = std::vector<double>;

// Calls f(lo, hi) for the pieces of [from, to] cut at the interior knots and
// at the upper boundary, beyond which the hazard is held constant.
template <class F>
void for_each_panel(const BSplineBasis& basis, double from, double to, F&& f)
{
    double lo = from;
    auto cut = [&](double k) {
        if (k <= lo || k >= to) return;
        f(lo, k);
        lo = k;
    };
    for (double k : basis.interior_knots()) cut(k);
    cut(basis.upper());
    f(lo, to);
}

double quantile_type7(std::vector<double> x, double p)
{
    std::sort(x.begin(), x.end());
    const double h = (static_cast<double>(x.size()) - 1.0) * p;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, x.size() - 1);
    return x[lo] + (h - static_cast<double>(lo)) * (x[hi] - x[lo]);
}

double long_ll_from_rss(double n, double rss, double sigma)
{
    if (n == 0.0) return 0.0;
    return -0.5 * n * (log_2pi + 2.0 * std::log(sigma)) - 0.5 * rss / (sigma * sigma);
}

double subject_rss(const lme::SubjectMoments& m, double a, double c)
{
    const double rss = m.syy - 2.0 * a * m.sy - 2.0 * c * m.sty + m.n * a * a + 2.0 * a * c * m.st + c * c * m.stt;
    return std::max(rss, 0.0);
}

void log_baseline_at_nodes(const SubjectData& s, std::span<const double> coef, NodeArray& lb, double& lb_event)
{
    const std::size_t K = coef.size();
    lb.resize(s.node_time.size());
    for (std::size_t k = 0; k < lb.size(); ++k) {
        const double* row = s.node_basis.data() + static_cast<std::size_t>(k) * K;
        double acc = 0.0;
        for (std::size_t q = 0; q < K; ++q) acc += row[q] * coef[q];
        lb[k] = acc;
    }
    double acc = 0.0;
    for (std::size_t q = 0; q < K; ++q) acc += s.event_basis[q] * coef[q];
    lb_event = acc;
}

// delta (log h0(T) + eta + alpha c T) - sum_k w_k exp(log h0(s_k) + eta + alpha c s_k),
// eta = gamma'w + alpha a.
double survival_ll_cached(const SubjectData& s, const NodeArray& lb, double lb_event, double eta, double alpha_slope)
{
    double H = 0.0;
    for (std::size_t k = 0; k < lb.size(); ++k) H += s.node_weight[k] * std::exp(lb[k] + eta + alpha_slope * s.node_time[k]);
    double ll = -H;
    if (s.event) ll += lb_event + eta + alpha_slope * s.T;
    return ll;
}

double covariate_term(std::span<const double> gamma, std::span<const double> w)
{
    double acc = 0.0;
    for (std::size_t j = 0; j < gamma.size(); ++j) acc += gamma[j] * w[j];
    return acc;
}

double baseline_log_prior(std::span<const double> coef)
{
    double lp = 0.0;
    for (std::size_t q = 0; q < coef.size(); ++q) {
        lp -= 0.5 * coef[q] * coef[q] / fixed_prior_var;
        if (q > 0) {
            const double d = coef[q] - coef[q - 1];
            lp -= 0.5 * d * d / smoothing_var;
        }
    }
    return lp;
}

// Random-walk Metropolis proposal with Robbins–Monro scale adaptation and,
// for multivariate blocks, a covariance learned from burn-in draws.
class AdaptiveProposal {
public:
    AdaptiveProposal() = default;
    AdaptiveProposal(Eigen::VectorXd initial_sd, double target)
        : dim_(static_cast<int>(initial_sd.size())), target_(target)
    {
        chol_ = initial_sd.asDiagonal();
        reset_moments();
    }

    Eigen::VectorXd draw(Rng& rng)
    {
        std::normal_distribution<double> z;
        Eigen::VectorXd e(dim_);
        for (int i = 0; i < dim_; ++i) e(i) = z(rng);
        return std::exp(log_scale_) * (chol_ * e);
    }

    void adapt(bool accepted, int iteration)
    {
        const double rate = 1.0 / std::pow(1.0 + iteration, 0.6);
        log_scale_ += rate * ((accepted ? 1.0 : 0.0) - target_);
        log_scale_ = std::clamp(log_scale_, -15.0, 8.0);
    }

    void record(const Eigen::VectorXd& x)
    {
        sum_ += x;
        sumsq_ += x * x.transpose();
        ++count_;
    }

    void reset_moments()
    {
        sum_ = Eigen::VectorXd::Zero(dim_);
        sumsq_ = Eigen::MatrixXd::Zero(dim_, dim_);
        count_ = 0;
    }

    void refresh_covariance()
    {
        if (dim_ < 2 || count_ < 2 * dim_ + 20) return;
        const double n = static_cast<double>(count_);
        Eigen::MatrixXd cov = (sumsq_ - sum_ * sum_.transpose() / n) / (n - 1.0);
        const double ridge = 1e-10 + 1e-6 * cov.diagonal().cwiseAbs().maxCoeff();
        cov = cov * (2.38 * 2.38 / dim_) + ridge * Eigen::MatrixXd::Identity(dim_, dim_);
        const Eigen::LLT<Eigen::MatrixXd> llt(cov);
        if (llt.info() != Eigen::Success) return;
        chol_ = llt.matrixL();
        log_scale_ = 0.0;
    }

    void count(bool accepted)
    {
        ++attempts_;
        accepts_ += accepted ? 1 : 0;
    }
    double acceptance() const { return attempts_ ? static_cast<double>(accepts_) / static_cast<double>(attempts_) : 0.0; }

private:
    int dim_ = 0;
    double target_ = 0.234;
    double log_scale_ = 0.0;
    Eigen::MatrixXd chol_;
    Eigen::VectorXd sum_;
    Eigen::MatrixXd sumsq_;
    long count_ = 0;
    long attempts_ = 0;
    long accepts_ = 0;
};

struct StartingPoint {
    Theta theta;
    std::vector<Eigen::Vector2d> b;
    std::vector<Eigen::Matrix2d> b_cov;
    Eigen::Matrix2d beta_cov = 1e-4 * Eigen::Matrix2d::Identity();
};

struct ChainResult {
    std::vector<Theta> draws;
    std::vector<std::vector<Eigen::Vector2d>> b_draws;
    std::vector<Eigen::Vector2d> b_sum;
    AcceptanceRates acceptance;
};

class Sampler {
public:
    Sampler(const std::vector<SubjectData>& subjects, const StartingPoint& start, const JointModelSpec& spec,
            double biomarker_center, std::vector<double> covariate_center, bool has_longitudinal)
        : subjects_(subjects), start_(start), spec_(spec), m_center_(biomarker_center),
          w_center_(std::move(covariate_center)), longitudinal_(has_longitudinal)
    {
    }

    ChainResult run(int chain) const;

private:
    const std::vector<SubjectData>& subjects_;
    const StartingPoint& start_;
    const JointModelSpec& spec_;
    double m_center_;
    std::vector<double> w_center_;
    bool longitudinal_;
};

ChainResult Sampler::run(int chain) const
{
    const auto& mc = spec_.mcmc;
    Rng rng(derive_seed(mc.seed, static_cast<std::uint64_t>(chain)));
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> stdnorm;
    auto accept = [&](double log_ratio) { return std::isfinite(log_ratio) && std::log(unif(rng)) < log_ratio; };

    const std::size_t n = subjects_.size();
    const std::size_t P = start_.theta.gamma.size();
    const std::size_t K = start_.theta.baseline.size();

    // --- state
    Eigen::Vector2d beta = start_.theta.beta;
    std::vector<double> gamma = start_.theta.gamma;
    double alpha = start_.theta.alpha;
    std::vector<double> coef = start_.theta.baseline;
    double log_tau0 = 0.5 * std::log(start_.theta.D(0, 0));
    double log_tau1 = 0.5 * std::log(start_.theta.D(1, 1));
    double z_rho = std::atanh(std::clamp(start_.theta.D(0, 1) / std::sqrt(start_.theta.D(0, 0) * start_.theta.D(1, 1)),
                                         -0.95, 0.95));
    double log_sigma = std::log(start_.theta.sigma);
    std::vector<Eigen::Vector2d> b = start_.b;

    if (chain > 0) {
        // overdispersed start for the between-chain comparison
        for (auto& g : gamma) g += 0.1 * stdnorm(rng);
        if (!spec_.fix_association_zero) alpha += 0.1 * stdnorm(rng);
    }

    auto make_D = [](double lt0, double lt1, double zr) {
        const double t0 = std::exp(lt0), t1 = std::exp(lt1), r = std::tanh(zr);
        Eigen::Matrix2d D;
        D << t0 * t0, t0 * t1 * r, t0 * t1 * r, t1 * t1;
        return D;
    };
    Eigen::Matrix2d D = make_D(log_tau0, log_tau1, z_rho);
    Eigen::Matrix2d D_inv = D.inverse();
    double D_logdet = std::log(D.determinant());

    // --- caches
    std::vector<NodeArray> lb(n);
    std::vector<double> lb_event(n), eta_w(n), surv(n), rss(n);
    for (std::size_t i = 0; i < n; ++i) {
        log_baseline_at_nodes(subjects_[i], coef, lb[i], lb_event[i]);
        eta_w[i] = covariate_term(gamma, subjects_[i].w);
        const double a = beta(0) + b[i](0), c = beta(1) + b[i](1);
        surv[i] = survival_ll_cached(subjects_[i], lb[i], lb_event[i], eta_w[i] + alpha * a, alpha * c);
        rss[i] = subject_rss(subjects_[i].moments, a, c);
    }
    auto re_ll = [&](const Eigen::Vector2d& bi) { return -log_2pi - 0.5 * D_logdet - 0.5 * bi.dot(D_inv * bi); };

    // --- proposals
    std::vector<double> b_log_scale(n, 0.0);
    std::vector<Eigen::Matrix2d> b_chol(n);
    for (std::size_t i = 0; i < n; ++i) {
        const Eigen::LLT<Eigen::Matrix2d> llt(start_.b_cov[i] + 1e-12 * Eigen::Matrix2d::Identity());
        b_chol[i] = llt.matrixL();
        b_chol[i] *= 2.38 / std::sqrt(2.0);
    }
    long b_attempts = 0, b_accepts = 0;

    Eigen::VectorXd beta_sd = start_.beta_cov.diagonal().cwiseMax(1e-12).cwiseSqrt();
    AdaptiveProposal beta_prop(beta_sd, 0.234);
    const int ga_dim = static_cast<int>(P) + (spec_.fix_association_zero ? 0 : 1);
    AdaptiveProposal ga_prop(Eigen::VectorXd::Constant(std::max(ga_dim, 1), 0.05), ga_dim > 1 ? 0.234 : 0.44);
    AdaptiveProposal base_prop(Eigen::VectorXd::Constant(static_cast<Eigen::Index>(K), 0.1), K > 1 ? 0.234 : 0.44);
    AdaptiveProposal var_prop(Eigen::VectorXd::Constant(4, 0.05), 0.234);

    ChainResult out;
    out.b_sum.assign(n, Eigen::Vector2d::Zero());

    std::vector<NodeArray> lb_new(n);
    std::vector<double> lb_event_new(n), eta_new(n), surv_new(n), rss_new(n);

    for (int iter = 0; iter < mc.n_iterations; ++iter) {
        const bool burnin = iter < mc.n_burnin;
        const bool tally = !burnin;

        // -- per-subject random effects
        if (longitudinal_) {
            for (std::size_t i = 0; i < n; ++i) {
                const Eigen::Vector2d e(stdnorm(rng), stdnorm(rng));
                const Eigen::Vector2d prop = b[i] + std::exp(b_log_scale[i]) * (b_chol[i] * e);
                const double a = beta(0) + prop(0), c = beta(1) + prop(1);
                const double s_new = survival_ll_cached(subjects_[i], lb[i], lb_event[i], eta_w[i] + alpha * a, alpha * c);
                const double r_new = subject_rss(subjects_[i].moments, a, c);
                const double sigma = std::exp(log_sigma);
                const double n_i = subjects_[i].moments.n;
                const double log_ratio = (s_new - surv[i]) + (long_ll_from_rss(n_i, r_new, sigma) - long_ll_from_rss(n_i, rss[i], sigma)) +
                                         (re_ll(prop) - re_ll(b[i]));
                const bool ok = accept(log_ratio);
                if (ok) {
                    b[i] = prop;
                    surv[i] = s_new;
                    rss[i] = r_new;
                }
                if (burnin) {
                    const double rate = 1.0 / std::pow(1.0 + iter, 0.6);
                    b_log_scale[i] = std::clamp(b_log_scale[i] + rate * ((ok ? 1.0 : 0.0) - 0.234), -15.0, 8.0);
                }
                if (tally) {
                    ++b_attempts;
                    b_accepts += ok ? 1 : 0;
                }
            }

            // -- fixed effects of the biomarker
            {
                const Eigen::VectorXd step = beta_prop.draw(rng);
                const Eigen::Vector2d prop = beta + Eigen::Vector2d(step(0), step(1));
                const double sigma = std::exp(log_sigma);
                double delta = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    const double a = prop(0) + b[i](0), c = prop(1) + b[i](1);
                    surv_new[i] = survival_ll_cached(subjects_[i], lb[i], lb_event[i], eta_w[i] + alpha * a, alpha * c);
                    rss_new[i] = subject_rss(subjects_[i].moments, a, c);
                    const double n_i = subjects_[i].moments.n;
                    delta += (surv_new[i] - surv[i]) + long_ll_from_rss(n_i, rss_new[i], sigma) - long_ll_from_rss(n_i, rss[i], sigma);
                }
                delta += -0.5 * (prop.squaredNorm() - beta.squaredNorm()) / fixed_prior_var;
                const bool ok = accept(delta);
                if (ok) {
                    beta = prop;
                    surv.swap(surv_new);
                    rss.swap(rss_new);
                }
                if (burnin) beta_prop.adapt(ok, iter);
                if (tally) beta_prop.count(ok);
                if (burnin && iter >= 100) beta_prop.record(Eigen::Vector2d(beta));
            }
        }

        // -- covariate effects and association (with a compensating shift of
        //    the baseline so the mean log-hazard stays put)
        if (ga_dim > 0) {
            const Eigen::VectorXd step = ga_prop.draw(rng);
            std::vector<double> g_prop = gamma;
            double a_prop = alpha;
            double shift = 0.0;
            for (std::size_t j = 0; j < P; ++j) {
                g_prop[j] += step(static_cast<Eigen::Index>(j));
                shift -= step(static_cast<Eigen::Index>(j)) * w_center_[j];
            }
            if (!spec_.fix_association_zero) {
                a_prop += step(static_cast<Eigen::Index>(P));
                shift -= step(static_cast<Eigen::Index>(P)) * m_center_;
            }
            std::vector<double> c_prop = coef;
            for (auto& cq : c_prop) cq += shift;

            double delta = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                lb_new[i].resize(lb[i].size());
                for (std::size_t k = 0; k < lb[i].size(); ++k) lb_new[i][k] = lb[i][k] + shift;
                lb_event_new[i] = lb_event[i] + shift;
                eta_new[i] = covariate_term(g_prop, subjects_[i].w);
                const double a = beta(0) + b[i](0), c = beta(1) + b[i](1);
                surv_new[i] = survival_ll_cached(subjects_[i], lb_new[i], lb_event_new[i], eta_new[i] + a_prop * a, a_prop * c);
                delta += surv_new[i] - surv[i];
            }
            double prior = 0.0;
            for (std::size_t j = 0; j < P; ++j) prior -= 0.5 * (g_prop[j] * g_prop[j] - gamma[j] * gamma[j]) / fixed_prior_var;
            prior -= 0.5 * (a_prop * a_prop - alpha * alpha) / fixed_prior_var;
            prior += baseline_log_prior(c_prop) - baseline_log_prior(coef);
            const bool ok = accept(delta + prior);
            if (ok) {
                gamma = std::move(g_prop);
                alpha = a_prop;
                coef = std::move(c_prop);
                lb.swap(lb_new);
                lb_event.swap(lb_event_new);
                eta_w.swap(eta_new);
                surv.swap(surv_new);
            }
            if (burnin) ga_prop.adapt(ok, iter);
            if (tally) ga_prop.count(ok);
            if (burnin && iter >= 100) {
                Eigen::VectorXd x(ga_dim);
                for (std::size_t j = 0; j < P; ++j) x(static_cast<Eigen::Index>(j)) = gamma[j];
                if (!spec_.fix_association_zero) x(static_cast<Eigen::Index>(P)) = alpha;
                ga_prop.record(x);
            }
        }

        // -- baseline hazard spline
        {
            const Eigen::VectorXd step = base_prop.draw(rng);
            std::vector<double> c_prop = coef;
            for (std::size_t q = 0; q < K; ++q) c_prop[q] += step(static_cast<Eigen::Index>(q));
            double delta = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                log_baseline_at_nodes(subjects_[i], c_prop, lb_new[i], lb_event_new[i]);
                const double a = beta(0) + b[i](0), c = beta(1) + b[i](1);
                surv_new[i] = survival_ll_cached(subjects_[i], lb_new[i], lb_event_new[i], eta_w[i] + alpha * a, alpha * c);
                delta += surv_new[i] - surv[i];
            }
            delta += baseline_log_prior(c_prop) - baseline_log_prior(coef);
            const bool ok = accept(delta);
            if (ok) {
                coef = std::move(c_prop);
                lb.swap(lb_new);
                lb_event.swap(lb_event_new);
                surv.swap(surv_new);
            }
            if (burnin) base_prop.adapt(ok, iter);
            if (tally) base_prop.count(ok);
            if (burnin && iter >= 100)
                base_prop.record(Eigen::Map<const Eigen::VectorXd>(coef.data(), static_cast<Eigen::Index>(K)));
        }

        // -- random-effect covariance and residual SD
        if (longitudinal_) {
            Eigen::Matrix2d Sb = Eigen::Matrix2d::Zero();
            double rss_total = 0.0, n_total = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                Sb += b[i] * b[i].transpose();
                rss_total += rss[i];
                n_total += subjects_[i].moments.n;
            }
            const double nn = static_cast<double>(n);
            auto log_target = [&](double lt0, double lt1, double zr, double ls) {
                const Eigen::Matrix2d Dx = make_D(lt0, lt1, zr);
                const double det = Dx.determinant();
                if (!(det > 0.0)) return -std::numeric_limits<double>::infinity();
                const double re = -nn * log_2pi - 0.5 * nn * std::log(det) - 0.5 * (Dx.inverse() * Sb).trace();
                const double sigma = std::exp(ls);
                const double lon = long_ll_from_rss(n_total, rss_total, sigma);
                const double t0 = std::exp(lt0), t1 = std::exp(lt1), r = std::tanh(zr);
                const double prior = -0.5 * (t0 * t0 + t1 * t1 + sigma * sigma) / scale_prior_var;
                const double jac = lt0 + lt1 + std::log1p(-r * r) + ls;
                return re + lon + prior + jac;
            };
            const Eigen::VectorXd step = var_prop.draw(rng);
            const double cur = log_target(log_tau0, log_tau1, z_rho, log_sigma);
            const double nxt = log_target(log_tau0 + step(0), log_tau1 + step(1), z_rho + step(2), log_sigma + step(3));
            const bool ok = accept(nxt - cur);
            if (ok) {
                log_tau0 += step(0);
                log_tau1 += step(1);
                z_rho += step(2);
                log_sigma += step(3);
                D = make_D(log_tau0, log_tau1, z_rho);
                D_inv = D.inverse();
                D_logdet = std::log(D.determinant());
            }
            if (burnin) var_prop.adapt(ok, iter);
            if (tally) var_prop.count(ok);
            if (burnin && iter >= 100) var_prop.record(Eigen::Vector4d(log_tau0, log_tau1, z_rho, log_sigma));
        }

        if (burnin && iter >= 200 && iter % 100 == 0) {
            if (iter == std::max(200, (mc.n_burnin / 2) / 100 * 100)) {
                // forget the transient before the final covariance estimates
                beta_prop.refresh_covariance();
                ga_prop.refresh_covariance();
                base_prop.refresh_covariance();
                var_prop.refresh_covariance();
                beta_prop.reset_moments();
                ga_prop.reset_moments();
                base_prop.reset_moments();
                var_prop.reset_moments();
            } else {
                beta_prop.refresh_covariance();
                ga_prop.refresh_covariance();
                base_prop.refresh_covariance();
                var_prop.refresh_covariance();
            }
        }

        if (!burnin && (iter - mc.n_burnin + 1) % mc.n_thin == 0) {
            Theta th;
            th.beta = beta;
            th.gamma = gamma;
            th.alpha = alpha;
            th.D = D;
            th.sigma = std::exp(log_sigma);
            th.baseline = coef;
            out.draws.push_back(std::move(th));
            if (spec_.keep_random_effect_draws) out.b_draws.push_back(b);
            for (std::size_t i = 0; i < n; ++i) out.b_sum[i] += b[i];
        }
    }

    out.acceptance.random_effects = b_attempts ? static_cast<double>(b_accepts) / static_cast<double>(b_attempts) : 0.0;
    out.acceptance.beta = beta_prop.acceptance();
    out.acceptance.gamma_alpha = ga_prop.acceptance();
    out.acceptance.baseline = base_prop.acceptance();
    out.acceptance.variance = var_prop.acceptance();
    return out;
}

// Weibull fit without covariates, projected onto the spline basis.
std::vector<double> initial_baseline(const Cohort& cohort, const BSplineBasis& basis)
{
    double d = 0.0, sum_log_t = 0.0;
    for (const auto& s : cohort.subjects())
        if (s.event) {
            d += 1.0;
            sum_log_t += std::log(s.observed_time);
        }
    d = std::max(d, 0.5);
    auto profile = [&](double log_v) {
        const double v = std::exp(log_v);
        double st = 0.0;
        for (const auto& s : cohort.subjects()) st += std::pow(s.observed_time, v);
        const double lambda = d / st;
        return std::pair{d * std::log(lambda) + d * log_v + (v - 1.0) * sum_log_t - d, lambda};
    };
    // golden-section search on log v
    double a = -3.0, bnd = 3.0;
    const double g = 0.5 * (std::sqrt(5.0) - 1.0);
    double x1 = bnd - g * (bnd - a), x2 = a + g * (bnd - a);
    double f1 = profile(x1).first, f2 = profile(x2).first;
    for (int it = 0; it < 100; ++it) {
        if (f1 < f2) {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (bnd - a);
            f2 = profile(x2).first;
        } else {
            bnd = x2;
            x2 = x1;
            f2 = f1;
            x1 = bnd - g * (bnd - a);
            f1 = profile(x1).first;
        }
    }
    const double log_v = 0.5 * (a + bnd);
    const double v = std::exp(log_v);
    const double lambda = profile(log_v).second;

    const int J = 60;
    const auto K = static_cast<Eigen::Index>(basis.size());
    Eigen::MatrixXd B(J, K);
    Eigen::VectorXd y(J);
    std::vector<double> row(basis.size());
    for (int j = 0; j < J; ++j) {
        const double t = basis.lower() + (basis.upper() - basis.lower()) * (j + 0.5) / J;
        basis.evaluate(t, row);
        for (Eigen::Index q = 0; q < K; ++q) B(j, q) = row[static_cast<std::size_t>(q)];
        y(j) = std::log(lambda) + log_v + (v - 1.0) * std::log(t);
    }
    const Eigen::VectorXd c = B.colPivHouseholderQr().solve(y);
    return std::vector<double>(c.data(), c.data() + K);
}

} // namespace

double log_baseline_hazard(const BaselineHazardSpline& spline, double t, bool* extrapolated)
{
    std::vector<double> row(spline.basis.size());
    const bool inside = spline.basis.evaluate(t, row);
    if (extrapolated) *extrapolated = !inside;
    double acc = spline.intercept;
    for (std::size_t q = 0; q < row.size(); ++q) acc += row[q] * spline.coefficients.at(q);
    return acc;
}

void McmcConfig::validate() const
{
    if (n_iterations <= 0 || n_burnin < 0 || !(n_burnin < n_iterations))
        throw InvalidArgument("MCMC requires 0 <= n_burnin < n_iterations");
    if (n_thin < 1) throw InvalidArgument("MCMC thinning must be >= 1");
    if (n_chains < 1) throw InvalidArgument("MCMC needs at least one chain");
}

SubjectData make_subject_data(const SurvivalRecord& subject, std::span<const LongitudinalRecord> measurements,
                              const BSplineBasis& basis, std::span<const std::size_t> covariate_columns)
{
    SubjectData s;
    s.T = subject.observed_time;
    s.event = subject.event;
    for (std::size_t c : covariate_columns) s.w.push_back(subject.covariates.at(c));
    s.moments = lme::subject_moments(measurements);
    for_each_panel(basis, 0.0, s.T, [&](double lo, double hi) {
        std::array<double, GaussLegendre15::size> x{}, wt{};
        GaussLegendre15::instance().map(lo, hi, x, wt);
        s.node_time.insert(s.node_time.end(), x.begin(), x.end());
        s.node_weight.insert(s.node_weight.end(), wt.begin(), wt.end());
    });
    const std::size_t K = basis.size();
    s.node_basis.resize(s.node_time.size() * K);
    for (std::size_t k = 0; k < s.node_time.size(); ++k)
        basis.evaluate(s.node_time[k], std::span<double>(s.node_basis).subspan(k * K, K));
    s.event_basis.resize(K);
    basis.evaluate(s.T, s.event_basis);
    return s;
}

double survival_log_likelihood(const Theta& theta, const Eigen::Vector2d& b, const SubjectData& s)
{
    NodeArray lb;
    double lb_event = 0.0;
    log_baseline_at_nodes(s, theta.baseline, lb, lb_event);
    const double a = theta.beta(0) + b(0), c = theta.beta(1) + b(1);
    return survival_ll_cached(s, lb, lb_event, covariate_term(theta.gamma, s.w) + theta.alpha * a, theta.alpha * c);
}

double longitudinal_log_likelihood(const Theta& theta, const Eigen::Vector2d& b, const SubjectData& s)
{
    const double a = theta.beta(0) + b(0), c = theta.beta(1) + b(1);
    return long_ll_from_rss(s.moments.n, subject_rss(s.moments, a, c), theta.sigma);
}

double random_effect_log_density(const Eigen::Matrix2d& D, const Eigen::Vector2d& b)
{
    return -log_2pi - 0.5 * std::log(D.determinant()) - 0.5 * b.dot(D.inverse() * b);
}

double subject_log_likelihood(const Theta& theta, const Eigen::Vector2d& b, const SubjectData& s)
{
    return survival_log_likelihood(theta, b, s) + longitudinal_log_likelihood(theta, b, s) +
           random_effect_log_density(theta.D, b);
}

double total_log_likelihood_serial(const Theta& theta, std::span<const Eigen::Vector2d> b,
                                   std::span<const SubjectData> subjects)
{
    double acc = 0.0;
    for (std::size_t i = 0; i < subjects.size(); ++i) acc += subject_log_likelihood(theta, b[i], subjects[i]);
    return acc;
}

double total_log_likelihood(const Theta& theta, std::span<const Eigen::Vector2d> b,
                            std::span<const SubjectData> subjects, int workers)
{
    std::vector<double> terms(subjects.size());
    parallel_for(subjects.size(), workers,
                 [&](std::size_t i) { terms[i] = subject_log_likelihood(theta, b[i], subjects[i]); });
    double acc = 0.0;
    for (double t : terms) acc += t;
    return acc;
}

double cumulative_hazard(const Theta& theta, const BSplineBasis& basis, const Eigen::Vector2d& b,
                         std::span<const double> w, double from, double to)
{
    if (to <= from) return 0.0;
    const double eta = covariate_term(theta.gamma, w);
    const double a = theta.beta(0) + b(0), c = theta.beta(1) + b(1);
    std::vector<double> row(basis.size());
    auto hazard = [&](double s) {
        basis.evaluate(s, row);
        double lh = 0.0;
        for (std::size_t q = 0; q < row.size(); ++q) lh += row[q] * theta.baseline[q];
        return std::exp(lh + eta + theta.alpha * (a + c * s));
    };
    double H = 0.0;
    for_each_panel(basis, from, to,
                   [&](double lo, double hi) { H += GaussLegendre15::instance().integrate(hazard, lo, hi); });
    return H;
}

BSplineBasis baseline_basis(const Cohort& cohort, int n_internal_knots, int degree)
{
    if (cohort.empty()) throw InvalidArgument("cannot place baseline knots for an empty cohort");
    double upper = 0.0;
    std::vector<double> events, all;
    for (const auto& s : cohort.subjects()) {
        upper = std::max(upper, s.observed_time);
        all.push_back(s.observed_time);
        if (s.event) events.push_back(s.observed_time);
    }
    const auto& source = events.size() >= static_cast<std::size_t>(n_internal_knots + 1) ? events : all;
    std::vector<double> knots;
    for (int q = 1; q <= n_internal_knots; ++q) {
        const double k = quantile_type7(source, static_cast<double>(q) / (n_internal_knots + 1));
        const double eps = 1e-8 * upper;
        if (k <= eps || k >= upper - eps) continue;
        if (!knots.empty() && k <= knots.back() + eps) continue;
        knots.push_back(k);
    }
    return BSplineBasis(0.0, upper, std::move(knots), degree);
}

double split_rhat(const std::vector<std::vector<double>>& chains)
{
    std::vector<std::vector<double>> halves;
    for (const auto& c : chains) {
        const std::size_t h = c.size() / 2;
        if (h < 2) continue;
        halves.emplace_back(c.begin(), c.begin() + static_cast<long>(h));
        halves.emplace_back(c.end() - static_cast<long>(h), c.end());
    }
    if (halves.size() < 2) return std::numeric_limits<double>::quiet_NaN();
    const std::size_t len = std::min_element(halves.begin(), halves.end(), [](auto& x, auto& y) {
                                return x.size() < y.size();
                            })->size();
    const double nlen = static_cast<double>(len);
    const double m = static_cast<double>(halves.size());
    std::vector<double> means, vars;
    for (auto& hseq : halves) {
        hseq.resize(len);
        const double mu = std::accumulate(hseq.begin(), hseq.end(), 0.0) / nlen;
        double v = 0.0;
        for (double x : hseq) v += (x - mu) * (x - mu);
        means.push_back(mu);
        vars.push_back(v / (nlen - 1.0));
    }
    const double grand = std::accumulate(means.begin(), means.end(), 0.0) / m;
    double B = 0.0;
    for (double mu : means) B += (mu - grand) * (mu - grand);
    B *= nlen / (m - 1.0);
    const double W = std::accumulate(vars.begin(), vars.end(), 0.0) / m;
    if (W <= 0.0) return B <= 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
    const double var_plus = (nlen - 1.0) / nlen * W + B / nlen;
    return std::sqrt(var_plus / W);
}

JointModelFit fit_joint(const Cohort& cohort, const JointModelSpec& spec)
{
    spec.mcmc.validate();
    if (cohort.size() < static_cast<std::size_t>(spec.min_subjects))
        throw InfeasibleFit("joint model needs at least " + std::to_string(spec.min_subjects) + " subjects, got " +
                            std::to_string(cohort.size()));

    JointModelFit fit;
    fit.spec = spec;
    fit.n_chains = spec.mcmc.n_chains;

    std::vector<std::size_t> columns;
    const auto& schema = cohort.covariate_schema();
    if (spec.covariates.empty()) {
        for (std::size_t j = 0; j < schema.size(); ++j) columns.push_back(j);
        fit.covariate_names = schema;
    } else {
        for (const auto& name : spec.covariates) {
            auto it = std::find(schema.begin(), schema.end(), name);
            if (it == schema.end()) throw InvalidArgument("covariate '" + name + "' is not in the cohort schema");
            columns.push_back(static_cast<std::size_t>(it - schema.begin()));
        }
        fit.covariate_names = spec.covariates;
    }

    fit.basis = baseline_basis(cohort, spec.n_internal_knots, spec.degree);

    std::vector<SubjectData> subjects;
    subjects.reserve(cohort.size());
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        subjects.push_back(make_subject_data(cohort.subject(i), cohort.measurements_of(i), fit.basis, columns));
        fit.subject_ids.push_back(cohort.subject(i).subject_id);
    }

    StartingPoint start;
    const bool has_longitudinal = !cohort.measurements().empty();
    if (has_longitudinal) {
        lme::LmeFit lfit;
        try {
            lfit = lme::fit_lme(cohort);
        } catch (const Error& e) {
            throw InfeasibleFit(std::string("longitudinal starting fit failed: ") + e.what());
        }
        start.theta.beta = lfit.beta;
        Eigen::Matrix2d D0 = lfit.D;
        // keep the starting covariance strictly inside the parameter space
        const double floor0 = 1e-4 * std::max(1e-4, lfit.sigma * lfit.sigma);
        D0(0, 0) = std::max(D0(0, 0), floor0);
        D0(1, 1) = std::max(D0(1, 1), floor0);
        const double r = D0(0, 1) / std::sqrt(D0(0, 0) * D0(1, 1));
        D0(0, 1) = D0(1, 0) = std::clamp(r, -0.9, 0.9) * std::sqrt(D0(0, 0) * D0(1, 1));
        start.theta.D = D0;
        start.theta.sigma = std::max(lfit.sigma, 1e-6);
        start.b = lfit.b;
        start.b_cov = lfit.b_cov;
        for (auto& c : start.b_cov)
            if (Eigen::LLT<Eigen::Matrix2d>(c).info() != Eigen::Success || c.determinant() <= 0.0) c = D0;
        start.beta_cov = lfit.beta_cov;
    } else {
        if (!spec.fix_association_zero)
            throw InvalidArgument("a cohort without longitudinal data can only be fitted with alpha fixed at 0");
        start.b.assign(cohort.size(), Eigen::Vector2d::Zero());
        start.b_cov.assign(cohort.size(), Eigen::Matrix2d::Identity());
    }
    start.theta.gamma.assign(columns.size(), 0.0);
    start.theta.alpha = 0.0;
    start.theta.baseline = initial_baseline(cohort, fit.basis);

    double m_center = 0.0;
    if (has_longitudinal) {
        for (const auto& r : cohort.measurements()) m_center += r.value;
        m_center /= static_cast<double>(cohort.measurements().size());
    }
    std::vector<double> w_center(columns.size(), 0.0);
    for (const auto& s : subjects)
        for (std::size_t j = 0; j < columns.size(); ++j) w_center[j] += s.w[j] / static_cast<double>(subjects.size());

    const Sampler sampler(subjects, start, spec, m_center, w_center, has_longitudinal);
    std::vector<ChainResult> chains(static_cast<std::size_t>(spec.mcmc.n_chains));
    parallel_for(chains.size(), spec.chain_workers,
                 [&](std::size_t c) { chains[c] = sampler.run(static_cast<int>(c)); });

    fit.random_effect_means.assign(cohort.size(), Eigen::Vector2d::Zero());
    std::vector<std::vector<double>> alpha_traces;
    double total_draws = 0.0;
    for (auto& ch : chains) {
        alpha_traces.emplace_back();
        for (const auto& th : ch.draws) alpha_traces.back().push_back(th.alpha);
        for (std::size_t i = 0; i < cohort.size(); ++i) fit.random_effect_means[i] += ch.b_sum[i];
        total_draws += static_cast<double>(ch.draws.size());
        fit.acceptance.random_effects += ch.acceptance.random_effects / chains.size();
        fit.acceptance.beta += ch.acceptance.beta / chains.size();
        fit.acceptance.gamma_alpha += ch.acceptance.gamma_alpha / chains.size();
        fit.acceptance.baseline += ch.acceptance.baseline / chains.size();
        fit.acceptance.variance += ch.acceptance.variance / chains.size();
        std::move(ch.draws.begin(), ch.draws.end(), std::back_inserter(fit.draws));
        std::move(ch.b_draws.begin(), ch.b_draws.end(), std::back_inserter(fit.random_effect_draws));
    }
    if (total_draws > 0)
        for (auto& m : fit.random_effect_means) m /= total_draws;

    if (spec.fix_association_zero) {
        fit.rhat_alpha = 1.0;
    } else {
        fit.rhat_alpha = split_rhat(alpha_traces);
        fit.converged = !(fit.rhat_alpha > 1.1);
        if (!fit.converged) spdlog::debug("jointfit: split R-hat of alpha is {:.3f} (> 1.1)", fit.rhat_alpha);
    }
    return fit;
}

Theta JointModelFit::posterior_mean() const
{
    if (draws.empty()) throw InvalidArgument("fit has no draws");
    std::vector<double> acc(column_names().size(), 0.0);
    for (const auto& th : draws) {
        const auto row = flatten(th);
        for (std::size_t j = 0; j < row.size(); ++j) acc[j] += row[j];
    }
    for (auto& a : acc) a /= static_cast<double>(draws.size());
    return unflatten(acc);
}

std::vector<std::string> JointModelFit::column_names() const
{
    std::vector<std::string> names{"beta0", "beta1"};
    for (const auto& c : covariate_names) names.push_back("gamma_" + c);
    names.insert(names.end(), {"alpha", "D11", "D12", "D22", "sigma"});
    for (std::size_t q = 0; q < basis.size(); ++q) names.push_back("baseline_" + std::to_string(q));
    return names;
}

std::vector<double> JointModelFit::flatten(const Theta& th) const
{
    std::vector<double> row{th.beta(0), th.beta(1)};
    row.insert(row.end(), th.gamma.begin(), th.gamma.end());
    row.insert(row.end(), {th.alpha, th.D(0, 0), th.D(0, 1), th.D(1, 1), th.sigma});
    row.insert(row.end(), th.baseline.begin(), th.baseline.end());
    return row;
}

Theta JointModelFit::unflatten(std::span<const double> row) const
{
    const std::size_t P = covariate_names.size();
    const std::size_t K = basis.size();
    if (row.size() != 2 + P + 5 + K) throw InvalidArgument("draw row has the wrong width");
    Theta th;
    th.beta = Eigen::Vector2d(row[0], row[1]);
    th.gamma.assign(row.begin() + 2, row.begin() + 2 + static_cast<long>(P));
    std::size_t j = 2 + P;
    th.alpha = row[j];
    th.D << row[j + 1], row[j + 2], row[j + 2], row[j + 3];
    th.sigma = row[j + 4];
    th.baseline.assign(row.begin() + static_cast<long>(j + 5), row.end());
    return th;
}

std::vector<double> JointModelFit::trace(const std::string& column) const
{
    const auto names = column_names();
    auto it = std::find(names.begin(), names.end(), column);
    if (it == names.end()) throw InvalidArgument("unknown column '" + column + "'");
    const auto j = static_cast<std::size_t>(it - names.begin());
    std::vector<double> out;
    out.reserve(draws.size());
    for (const auto& th : draws) out.push_back(flatten(th)[j]);
    return out;
}

} // namespace jdp::joint
