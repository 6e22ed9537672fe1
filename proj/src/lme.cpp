#include "jdp/lme.hpp"

#include "jdp/error.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <sstream>

namespace jdp::lme {

namespace {

using Params = Eigen::Vector3d; // (l11, l21, l22) of the relative Cholesky factor

Eigen::Matrix2d lower_factor(const Params& p)
{
    Eigen::Matrix2d L;
    L << p(0), 0.0, p(1), p(2);
    return L;
}

struct Profile {
    double loglik = -std::numeric_limits<double>::infinity();
    Eigen::Vector2d beta = Eigen::Vector2d::Zero();
    double sigma2 = 0.0;
    Eigen::Matrix2d A = Eigen::Matrix2d::Zero();
};

struct Design {
    std::vector<Eigen::Matrix2d> G;
    std::vector<Eigen::Vector2d> g;
    std::vector<double> yy;
    double n_obs = 0.0;
};

Profile profile(const Design& d, const Params& p)
{
    const Eigen::Matrix2d L = lower_factor(p);
    Eigen::Matrix2d A = Eigen::Matrix2d::Zero();
    Eigen::Vector2d c = Eigen::Vector2d::Zero();
    double q = 0.0;
    double logdet = 0.0;
    for (std::size_t i = 0; i < d.G.size(); ++i) {
        const Eigen::Matrix2d M = L.transpose() * d.G[i] * L + Eigen::Matrix2d::Identity();
        const Eigen::Matrix2d P = L * M.inverse() * L.transpose();
        A += d.G[i] - d.G[i] * P * d.G[i];
        c += d.g[i] - d.G[i] * P * d.g[i];
        q += d.yy[i] - d.g[i].dot(P * d.g[i]);
        logdet += std::log(M.determinant());
    }
    Profile out;
    out.A = A;
    const Eigen::LDLT<Eigen::Matrix2d> solver(A);
    out.beta = solver.solve(c);
    const double rss = std::max(q - c.dot(out.beta), 0.0);
    out.sigma2 = std::max(rss / d.n_obs, std::numeric_limits<double>::min());
    out.loglik = -0.5 * d.n_obs * (std::log(2.0 * std::numbers::pi * out.sigma2) + 1.0) - 0.5 * logdet;
    if (!std::isfinite(out.loglik)) out.loglik = -std::numeric_limits<double>::infinity();
    return out;
}

// Moment-based starting point: per-subject OLS lines.
Params initial_params(const Design& d, const std::vector<SubjectMoments>& moments)
{
    std::vector<Eigen::Vector2d> coefs;
    Eigen::Matrix2d mean_inv = Eigen::Matrix2d::Zero();
    double rss = 0.0, dof = 0.0;
    for (std::size_t i = 0; i < moments.size(); ++i) {
        const auto& m = moments[i];
        if (m.n < 2 || std::abs(d.G[i].determinant()) < 1e-12 * std::max(1.0, m.stt * m.n)) continue;
        const Eigen::Matrix2d Ginv = d.G[i].inverse();
        const Eigen::Vector2d b = Ginv * d.g[i];
        coefs.push_back(b);
        mean_inv += Ginv;
        rss += std::max(0.0, d.yy[i] - b.dot(d.g[i]));
        dof += m.n - 2;
    }
    const double s2 = dof > 0 ? std::max(rss / dof, 1e-12) : 1.0;
    const auto k = static_cast<double>(coefs.size());
    Eigen::Vector2d mean = Eigen::Vector2d::Zero();
    for (const auto& b : coefs) mean += b;
    mean /= k;
    Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
    for (const auto& b : coefs) cov += (b - mean) * (b - mean).transpose();
    cov /= std::max(1.0, k - 1.0);
    cov -= s2 * mean_inv / k;
    Eigen::Matrix2d rel = nearest_psd(cov) / s2 + 1e-4 * Eigen::Matrix2d::Identity();
    const Eigen::LLT<Eigen::Matrix2d> llt(rel);
    const Eigen::Matrix2d L = llt.matrixL();
    return Params(L(0, 0), L(1, 0), L(1, 1));
}

} // namespace

SubjectMoments subject_moments(std::span<const LongitudinalRecord> measurements)
{
    SubjectMoments m;
    for (const auto& r : measurements) {
        m.n += 1;
        m.st += r.time;
        m.stt += r.time * r.time;
        m.sy += r.value;
        m.sty += r.time * r.value;
        m.syy += r.value * r.value;
    }
    return m;
}

Eigen::Matrix2d nearest_psd(const Eigen::Matrix2d& m, bool* projected)
{
    const Eigen::Matrix2d sym = 0.5 * (m + m.transpose());
    const Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(sym);
    Eigen::Vector2d ev = es.eigenvalues();
    const bool changed = ev.minCoeff() < 0.0;
    if (projected) *projected = changed;
    if (!changed) return sym;
    ev = ev.cwiseMax(0.0);
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

LmeFit fit_lme(const Cohort& cohort, const LmeOptions& options)
{
    Design d;
    std::vector<SubjectMoments> moments;
    int identifiable = 0;
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        const auto m = subject_moments(cohort.measurements_of(i));
        moments.push_back(m);
        Eigen::Matrix2d G;
        G << m.n, m.st, m.st, m.stt;
        d.G.push_back(G);
        d.g.emplace_back(m.sy, m.sty);
        d.yy.push_back(m.syy);
        d.n_obs += m.n;
        if (m.n >= 2 && m.n * m.stt - m.st * m.st > 0.0) ++identifiable;
    }
    if (identifiable < 2)
        throw InvalidArgument("random-slope model is not identifiable: need at least 2 subjects with 2 or more "
                              "distinct measurement times (have " + std::to_string(identifiable) + ")");

    Params p = initial_params(d, moments);
    Profile cur = profile(d, p);
    LmeFit fit;
    fit.loglik_trace.push_back(cur.loglik);

    double mu = 1e-3;
    bool converged = false;
    int it = 0;
    for (; it < options.max_iterations && !converged; ++it) {
        // central-difference gradient and Hessian of the profiled log-likelihood
        const double h = 1e-4;
        Eigen::Vector3d grad;
        Eigen::Matrix3d hess;
        auto f = [&](const Params& q) { return profile(d, q).loglik; };
        const double f0 = cur.loglik;
        std::array<double, 3> fp{}, fm{};
        for (int a = 0; a < 3; ++a) {
            Params e = Params::Zero();
            e(a) = h;
            fp[a] = f(p + e);
            fm[a] = f(p - e);
            grad(a) = (fp[a] - fm[a]) / (2 * h);
            hess(a, a) = (fp[a] - 2 * f0 + fm[a]) / (h * h);
        }
        for (int a = 0; a < 3; ++a)
            for (int b = a + 1; b < 3; ++b) {
                Params ea = Params::Zero(), eb = Params::Zero();
                ea(a) = h;
                eb(b) = h;
                const double v = (f(p + ea + eb) - f(p + ea - eb) - f(p - ea + eb) + f(p - ea - eb)) / (4 * h * h);
                hess(a, b) = hess(b, a) = v;
            }

        bool accepted = false;
        for (int tries = 0; tries < 40; ++tries) {
            const Eigen::Matrix3d lhs = -hess + mu * (Eigen::Matrix3d::Identity() * std::max(1.0, hess.diagonal().cwiseAbs().maxCoeff()));
            const Eigen::Vector3d step = lhs.ldlt().solve(grad);
            if (!step.allFinite()) {
                mu *= 10;
                continue;
            }
            const Params cand = p + step;
            const Profile next = profile(d, cand);
            if (next.loglik >= cur.loglik) {
                const double gain = next.loglik - cur.loglik;
                p = cand;
                cur = next;
                fit.loglik_trace.push_back(cur.loglik);
                mu = std::max(mu / 3.0, 1e-10);
                accepted = true;
                if (gain < options.tolerance) converged = true;
                break;
            }
            mu *= 10;
        }
        if (!accepted) converged = true; // no ascent direction left at this precision
    }
    fit.iterations = it;
    if (!converged) {
        std::ostringstream msg;
        msg << "LME fit did not converge in " << options.max_iterations << " iterations; last loglik=" << cur.loglik
            << " beta=(" << cur.beta(0) << ", " << cur.beta(1) << ") sigma=" << std::sqrt(cur.sigma2);
        throw ConvergenceError(msg.str());
    }

    const Eigen::Matrix2d L = lower_factor(p);
    fit.beta = cur.beta;
    fit.sigma = std::sqrt(cur.sigma2);
    fit.loglik = cur.loglik;
    fit.D = nearest_psd(cur.sigma2 * L * L.transpose(), &fit.psd_projected);
    if (fit.D.determinant() <= 1e-14 * std::max(1e-300, fit.D.trace() * fit.D.trace())) {
        fit.psd_projected = true;
        spdlog::debug("lme: estimated random-effects covariance is singular");
    }
    fit.beta_cov = cur.sigma2 * cur.A.inverse();
    fit.subject_ids.reserve(cohort.size());
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        const Eigen::Matrix2d M = L.transpose() * d.G[i] * L + Eigen::Matrix2d::Identity();
        const Eigen::Matrix2d P = L * M.inverse() * L.transpose();
        fit.subject_ids.push_back(cohort.subject(i).subject_id);
        fit.b.push_back(P * (d.g[i] - d.G[i] * fit.beta));
        fit.b_cov.push_back(cur.sigma2 * P);
    }
    return fit;
}

double predict_trajectory(const LmeFit& fit, const std::string& subject_id, double t)
{
    auto it = std::lower_bound(fit.subject_ids.begin(), fit.subject_ids.end(), subject_id);
    if (it == fit.subject_ids.end() || *it != subject_id)
        throw InvalidArgument("subject '" + subject_id + "' is not part of the LME fit");
    const auto& b = fit.b[static_cast<std::size_t>(it - fit.subject_ids.begin())];
    return (fit.beta(0) + b(0)) + (fit.beta(1) + b(1)) * t;
}

} // namespace jdp::lme
