#include "jdp/fpca.hpp"

#include "jdp/error.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

namespace jdp::fpca {

namespace {

constexpr std::size_t max_groups_1d = 400;
constexpr std::size_t max_times_2d = 64;

// Observations sharing one design point. Local-linear fits only need these
// sums, so grouping identical points loses nothing.
struct Group1 {
    double x = 0.0;
    double n = 0.0;
    double sy = 0.0;
    double syy = 0.0;
};

struct Group2 {
    double s = 0.0;
    double t = 0.0;
    double n = 0.0;
    double sz = 0.0;
    double szz = 0.0;
};

// Maps raw times onto at most `cap` representative times: exact when the
// data has few distinct times, equal-width bins (at the bin mean) otherwise.
class TimeIndex {
public:
    TimeIndex(std::vector<double> times, double lower, double upper, std::size_t cap)
    {
        std::sort(times.begin(), times.end());
        times.erase(std::unique(times.begin(), times.end()), times.end());
        if (times.size() <= cap) {
            points_ = times;
            exact_ = true;
            return;
        }
        lower_ = lower;
        width_ = (upper - lower) / static_cast<double>(cap);
        // bin() clamps against bins_.size(), so size it before accumulating
        bins_.assign(cap, std::numeric_limits<std::size_t>::max());
        std::vector<double> sum(cap, 0.0), cnt(cap, 0.0);
        for (double x : times) {
            const auto b = bin(x);
            sum[b] += x;
            cnt[b] += 1.0;
        }
        for (std::size_t b = 0; b < cap; ++b)
            if (cnt[b] > 0) {
                bins_[b] = points_.size();
                points_.push_back(sum[b] / cnt[b]);
            }
    }

    std::size_t index(double x) const
    {
        if (exact_) return static_cast<std::size_t>(std::lower_bound(points_.begin(), points_.end(), x) - points_.begin());
        return bins_[bin(x)];
    }
    const std::vector<double>& points() const { return points_; }

private:
    std::size_t bin(double x) const
    {
        const auto b = static_cast<long long>(std::floor((x - lower_) / width_));
        return static_cast<std::size_t>(std::clamp<long long>(b, 0, static_cast<long long>(bins_.size()) - 1));
    }

    bool exact_ = false;
    double lower_ = 0.0;
    double width_ = 1.0;
    std::vector<std::size_t> bins_;
    std::vector<double> points_;
};

struct Fit1 {
    bool ok = false;
    double value = 0.0;
    double leverage = 0.0; // per observation located exactly at x0
};

Fit1 local_linear_groups(const std::vector<Group1>& g, double x0, double h)
{
    double dmin = std::numeric_limits<double>::infinity();
    for (const auto& q : g) dmin = std::min(dmin, (q.x - x0) * (q.x - x0));
    const double inv = 0.5 / (h * h);
    double S0 = 0, S1 = 0, S2 = 0, T0 = 0, T1 = 0;
    for (const auto& q : g) {
        const double d = q.x - x0;
        const double k = std::exp(-(d * d - dmin) * inv); // rescaled; ratios are unaffected
        S0 += k * q.n;
        S1 += k * q.n * d;
        S2 += k * q.n * d * d;
        T0 += k * q.sy;
        T1 += k * d * q.sy;
    }
    Fit1 f;
    const double det = S0 * S2 - S1 * S1;
    if (!(S0 > 0.0) || !(det > 1e-10 * S0 * S2) || !std::isfinite(det)) return f;
    f.ok = true;
    f.value = (S2 * T0 - S1 * T1) / det;
    f.leverage = dmin == 0.0 ? S2 / det : 0.0;
    return f;
}

struct Fit2 {
    bool ok = false;
    double value = 0.0;
    double leverage = 0.0;
};

Fit2 local_plane_groups(const std::vector<Group2>& g, double s0, double t0, double h)
{
    double dmin = std::numeric_limits<double>::infinity();
    for (const auto& q : g) dmin = std::min(dmin, (q.s - s0) * (q.s - s0) + (q.t - t0) * (q.t - t0));
    const double inv = 0.5 / (h * h);
    Eigen::Matrix3d A = Eigen::Matrix3d::Zero();
    Eigen::Vector3d c = Eigen::Vector3d::Zero();
    for (const auto& q : g) {
        const double ds = q.s - s0, dt = q.t - t0;
        const double k = std::exp(-(ds * ds + dt * dt - dmin) * inv);
        const Eigen::Vector3d x(1.0, ds, dt);
        A.noalias() += (k * q.n) * x * x.transpose();
        c.noalias() += (k * q.sz) * x;
    }
    Fit2 f;
    const double scale = A(0, 0) * A(1, 1) * A(2, 2);
    const double det = A.determinant();
    if (!(A(0, 0) > 0.0) || !(det > 1e-10 * scale) || !std::isfinite(det)) return f;
    const Eigen::Matrix3d Ai = A.inverse();
    f.ok = true;
    f.value = Ai.row(0).dot(c);
    f.leverage = dmin == 0.0 ? Ai(0, 0) : 0.0;
    return f;
}

// Covariance on the diagonal at (t0, t0) from off-diagonal cross-products,
// fitted linear along the diagonal and quadratic across it. The quadratic term
// absorbs the ridge curvature, and the along-diagonal kernel has the same width
// as the variance smoother, so the two biases cancel in the noise gap.
std::optional<double> diagonal_covariance(const std::vector<Group2>& g, double t0, double h)
{
    const double inv = 0.5 / (h * h);
    Eigen::Matrix3d A = Eigen::Matrix3d::Zero();
    Eigen::Vector3d c = Eigen::Vector3d::Zero();
    double emin = std::numeric_limits<double>::infinity();
    for (const auto& q : g) {
        const double m = 0.5 * (q.s + q.t) - t0, d = q.s - q.t;
        emin = std::min(emin, (m * m + 0.5 * d * d) * inv);
    }
    for (const auto& q : g) {
        const double m = 0.5 * (q.s + q.t) - t0, d = q.s - q.t;
        const double k = std::exp(-(m * m + 0.5 * d * d) * inv + emin);
        const Eigen::Vector3d x(1.0, m, d * d);
        A.noalias() += (k * q.n) * x * x.transpose();
        c.noalias() += (k * q.sz) * x;
    }
    const double det = A.determinant();
    if (!(A(0, 0) > 0.0) || !(det > 1e-10 * A(0, 0) * A(1, 1) * A(2, 2)) || !std::isfinite(det)) return std::nullopt;
    return A.ldlt().solve(c)(0);
}

std::vector<double> candidate_bandwidths(double span, std::initializer_list<double> fractions)
{
    std::vector<double> out;
    for (double f : fractions) out.push_back(f * span);
    return out;
}

double select_bandwidth_1d(const std::vector<Group1>& g, const std::vector<double>& grid, double span)
{
    double total_n = 0.0;
    for (const auto& q : g) total_n += q.n;
    double best = std::numeric_limits<double>::infinity(), best_h = 0.0;
    for (double h : candidate_bandwidths(span, {0.02, 0.03, 0.05, 0.075, 0.1, 0.15, 0.2, 0.3, 0.5})) {
        bool valid = true;
        for (double x : grid)
            if (!local_linear_groups(g, x, h).ok) {
                valid = false;
                break;
            }
        if (!valid) continue;
        double rss = 0.0, trace = 0.0;
        for (const auto& q : g) {
            const auto f = local_linear_groups(g, q.x, h);
            if (!f.ok) {
                valid = false;
                break;
            }
            rss += std::max(0.0, q.syy - 2.0 * f.value * q.sy + q.n * f.value * f.value);
            trace += q.n * f.leverage;
        }
        if (!valid || !(trace < total_n)) continue;
        const double denom = 1.0 - trace / total_n;
        const double gcv = (rss / total_n) / (denom * denom);
        if (gcv < best) {
            best = gcv;
            best_h = h;
        }
    }
    return best_h > 0.0 ? best_h : 0.1 * span;
}

double select_bandwidth_2d(const std::vector<Group2>& g, const std::vector<double>& grid, double span)
{
    double total_n = 0.0;
    for (const auto& q : g) total_n += q.n;
    double best = std::numeric_limits<double>::infinity(), best_h = 0.0;
    for (double h : candidate_bandwidths(span, {0.015, 0.02, 0.03, 0.05, 0.075, 0.1, 0.15, 0.2, 0.3, 0.5})) {
        bool valid = true;
        // validity on the grid diagonal and corners is representative and cheap
        for (std::size_t i = 0; i < grid.size() && valid; ++i)
            valid = local_plane_groups(g, grid[i], grid[i], h).ok &&
                    local_plane_groups(g, grid[i], grid[grid.size() - 1 - i], h).ok;
        if (!valid) continue;
        double rss = 0.0, trace = 0.0;
        for (const auto& q : g) {
            const auto f = local_plane_groups(g, q.s, q.t, h);
            if (!f.ok) {
                valid = false;
                break;
            }
            rss += std::max(0.0, q.szz - 2.0 * f.value * q.sz + q.n * f.value * f.value);
            trace += q.n * f.leverage;
        }
        if (!valid || !(trace < total_n)) continue;
        const double denom = 1.0 - trace / total_n;
        const double gcv = (rss / total_n) / (denom * denom);
        if (gcv < best) {
            best = gcv;
            best_h = h;
        }
    }
    return best_h > 0.0 ? best_h : 0.1 * span;
}

double interpolate(const std::vector<double>& grid, const double* values, std::ptrdiff_t stride, double t)
{
    if (t <= grid.front()) return values[0];
    if (t >= grid.back()) return values[stride * static_cast<std::ptrdiff_t>(grid.size() - 1)];
    const auto hi = static_cast<std::size_t>(std::upper_bound(grid.begin(), grid.end(), t) - grid.begin());
    const std::size_t lo = hi - 1;
    const double w = (t - grid[lo]) / (grid[hi] - grid[lo]);
    return (1.0 - w) * values[stride * static_cast<std::ptrdiff_t>(lo)] +
           w * values[stride * static_cast<std::ptrdiff_t>(hi)];
}

} // namespace

std::optional<double> local_linear(std::span<const double> x, std::span<const double> y, double x0, double h)
{
    if (x.size() != y.size()) throw InvalidArgument("local_linear: x and y differ in length");
    std::vector<Group1> g;
    for (std::size_t i = 0; i < x.size(); ++i) g.push_back({x[i], 1.0, y[i], y[i] * y[i]});
    const auto f = local_linear_groups(g, x0, h);
    if (!f.ok) return std::nullopt;
    return f.value;
}

std::vector<double> equispaced_grid(double lower, double upper, int n)
{
    if (n < 2 || !(upper > lower)) throw InvalidArgument("grid needs n >= 2 and upper > lower");
    std::vector<double> g(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) g[static_cast<std::size_t>(i)] = lower + (upper - lower) * i / (n - 1);
    g.back() = upper;
    return g;
}

double FpcaModel::mean_at(double t) const
{
    return interpolate(grid, mean.data(), 1, t);
}

double FpcaModel::eigenfunction_at(int k, double t) const
{
    return interpolate(grid, eigenfunctions.col(k).data(), 1, t);
}

const double* FpcaModel::scores_of(const std::string& subject_id) const
{
    auto it = std::lower_bound(subject_ids.begin(), subject_ids.end(), subject_id);
    if (it == subject_ids.end() || *it != subject_id) return nullptr;
    return scores.row(it - subject_ids.begin()).data();
}

FpcaModel fit_fpca(const Cohort& cohort, std::vector<double> grid, const FpcaOptions& options)
{
    if (grid.size() < 2) throw InvalidArgument("FPCA grid needs at least two points");
    for (std::size_t i = 1; i < grid.size(); ++i)
        if (!(grid[i] > grid[i - 1])) throw InvalidArgument("FPCA grid must be strictly increasing");
    if (!(options.variance_threshold > 0.0 && options.variance_threshold <= 1.0))
        throw InvalidArgument("variance threshold must lie in (0, 1]");

    const double lower = grid.front(), upper = grid.back(), span = upper - lower;
    auto inside = [&](double t) { return t >= lower && t <= upper; };

    std::vector<double> times;
    std::size_t with_data = 0;
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        bool any = false;
        for (const auto& r : cohort.measurements_of(i))
            if (inside(r.time)) {
                times.push_back(r.time);
                any = true;
            }
        with_data += any ? 1 : 0;
    }
    if (with_data < options.min_subjects)
        throw InvalidArgument("FPCA needs at least " + std::to_string(options.min_subjects) +
                              " subjects with measurements in the grid span, got " + std::to_string(with_data));

    FpcaModel model;
    model.grid = grid;
    const std::size_t G = grid.size();
    model.weights.assign(G, 0.0);
    for (std::size_t i = 0; i + 1 < G; ++i) {
        const double h = 0.5 * (grid[i + 1] - grid[i]);
        model.weights[i] += h;
        model.weights[i + 1] += h;
    }

    // --- mean function
    const TimeIndex tix(times, lower, upper, max_groups_1d);
    std::vector<Group1> mg(tix.points().size());
    for (std::size_t j = 0; j < mg.size(); ++j) mg[j].x = tix.points()[j];
    double pooled_sq = 0.0, pooled_n = 0.0;
    for (const auto& r : cohort.measurements()) {
        if (!inside(r.time)) continue;
        auto& q = mg[tix.index(r.time)];
        q.n += 1.0;
        q.sy += r.value;
        q.syy += r.value * r.value;
        pooled_sq += r.value * r.value;
        pooled_n += 1.0;
    }
    model.mean_bandwidth = options.mean_bandwidth ? *options.mean_bandwidth : select_bandwidth_1d(mg, grid, span);
    model.mean.resize(G);
    for (std::size_t i = 0; i < G; ++i) {
        const auto f = local_linear_groups(mg, grid[i], model.mean_bandwidth);
        if (!f.ok) throw InvalidArgument("mean smoother is singular at t=" + std::to_string(grid[i]));
        model.mean[i] = f.value;
    }
    std::vector<double> mean_at_point(mg.size());
    for (std::size_t j = 0; j < mg.size(); ++j) {
        const auto f = local_linear_groups(mg, mg[j].x, model.mean_bandwidth);
        mean_at_point[j] = f.ok ? f.value : model.mean_at(mg[j].x);
    }

    // --- raw covariances
    const TimeIndex cix(times, lower, upper, max_times_2d);
    const std::size_t P = cix.points().size();
    std::vector<Group2> cg(P * P);
    std::vector<Group1> dg(P);
    for (std::size_t a = 0; a < P; ++a) {
        dg[a].x = cix.points()[a];
        for (std::size_t b = 0; b < P; ++b) {
            cg[a * P + b].s = cix.points()[a];
            cg[a * P + b].t = cix.points()[b];
        }
    }
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        std::vector<std::pair<std::size_t, double>> res;
        for (const auto& r : cohort.measurements_of(i))
            if (inside(r.time)) res.emplace_back(cix.index(r.time), r.value - mean_at_point[tix.index(r.time)]);
        for (std::size_t j = 0; j < res.size(); ++j) {
            auto& d = dg[res[j].first];
            d.n += 1.0;
            d.sy += res[j].second * res[j].second;
            d.syy += std::pow(res[j].second, 4);
            for (std::size_t k = 0; k < res.size(); ++k) {
                if (j == k) continue;
                auto& q = cg[res[j].first * P + res[k].first];
                const double z = res[j].second * res[k].second;
                q.n += 1.0;
                q.sz += z;
                q.szz += z * z;
            }
        }
    }
    std::erase_if(cg, [](const Group2& q) { return q.n == 0.0; });
    std::erase_if(dg, [](const Group1& q) { return q.n == 0.0; });
    if (cg.empty()) throw InvalidArgument("no subject has two measurements in the grid span; covariance is not estimable");

    model.cov_bandwidth = options.cov_bandwidth ? *options.cov_bandwidth : select_bandwidth_2d(cg, grid, span);
    Eigen::MatrixXd C(G, G);
    for (std::size_t i = 0; i < G; ++i)
        for (std::size_t j = i; j < G; ++j) {
            const auto f = local_plane_groups(cg, grid[i], grid[j], model.cov_bandwidth);
            if (!f.ok) throw InvalidArgument("covariance smoother is singular on the grid");
            C(i, j) = C(j, i) = f.value;
        }
    // symmetrize against the asymmetric rounding of the two triangles
    C = 0.5 * (C + C.transpose()).eval();

    // --- noise variance from the diagonal gap, over the middle half of the span
    // where both smoothers are interior
    double gap = 0.0, used = 0.0;
    for (std::size_t i = 0; i < G; ++i) {
        if (grid[i] < lower + 0.25 * span || grid[i] > upper - 0.25 * span) continue;
        const auto v = local_linear_groups(dg, grid[i], model.cov_bandwidth);
        const auto c = diagonal_covariance(cg, grid[i], model.cov_bandwidth);
        if (!v.ok || !c) continue;
        gap += v.value - *c;
        used += 1.0;
    }
    model.noise_variance = used > 0.0 ? std::max(0.0, gap / used) : 0.0;

    // --- eigendecomposition under trapezoid weights
    Eigen::VectorXd sw(G);
    for (std::size_t i = 0; i < G; ++i) sw(i) = std::sqrt(model.weights[i]);
    const Eigen::MatrixXd M = sw.asDiagonal() * C * sw.asDiagonal();
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M);
    if (es.info() != Eigen::Success) throw ConvergenceError("FPCA eigendecomposition failed");
    const Eigen::VectorXd ev = es.eigenvalues();
    const double top = ev.maxCoeff();
    double total = 0.0;
    std::vector<Eigen::Index> keep;
    for (Eigen::Index k = ev.size() - 1; k >= 0; --k)
        if (ev(k) > 0.0 && ev(k) > 1e-12 * top) {
            keep.push_back(k);
            total += ev(k);
        }
    if (ev.minCoeff() < -1e-8 * std::max(top, 0.0)) spdlog::debug("fpca: smoothed covariance has negative eigenvalues; truncated at 0");

    const double scale = pooled_n > 0 ? pooled_sq / pooled_n : 0.0;
    if (keep.empty() || total <= 1e-12 * std::max(scale, std::numeric_limits<double>::min())) {
        model.degenerate = true;
        model.r = 0;
        model.eigenfunctions.resize(static_cast<Eigen::Index>(G), 0);
    } else {
        model.eigenfunctions.resize(static_cast<Eigen::Index>(G), static_cast<Eigen::Index>(keep.size()));
        double cum = 0.0;
        for (std::size_t c = 0; c < keep.size(); ++c) {
            Eigen::VectorXd phi = es.eigenvectors().col(keep[c]).cwiseQuotient(sw);
            double integral = 0.0;
            for (std::size_t i = 0; i < G; ++i) integral += model.weights[i] * phi(static_cast<Eigen::Index>(i));
            double sign = 1.0;
            if (std::abs(integral) > 1e-10) {
                sign = integral > 0 ? 1.0 : -1.0;
            } else {
                for (Eigen::Index i = 0; i < phi.size(); ++i)
                    if (std::abs(phi(i)) > 1e-12) {
                        sign = phi(i) > 0 ? 1.0 : -1.0;
                        break;
                    }
            }
            model.eigenfunctions.col(static_cast<Eigen::Index>(c)) = sign * phi;
            model.eigenvalues.push_back(ev(keep[c]));
            cum += ev(keep[c]);
            model.explained.push_back(std::min(1.0, cum / total));
        }
        model.r = 1;
        while (model.r < static_cast<int>(keep.size()) &&
               model.explained[static_cast<std::size_t>(model.r - 1)] < options.variance_threshold - 1e-12)
            ++model.r;
    }

    // --- scores of the fitting set
    model.scores.setZero(static_cast<Eigen::Index>(cohort.size()), model.r);
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        model.subject_ids.push_back(cohort.subject(i).subject_id);
        if (model.r == 0) continue;
        const auto ms = cohort.measurements_of(i);
        if (std::none_of(ms.begin(), ms.end(), [&](const auto& r) { return inside(r.time); })) continue;
        const auto s = scores_for_subject(model, ms);
        for (int k = 0; k < model.r; ++k) model.scores(static_cast<Eigen::Index>(i), k) = s[static_cast<std::size_t>(k)];
    }
    return model;
}

std::vector<double> scores_for_subject(const FpcaModel& model, std::span<const LongitudinalRecord> measurements)
{
    std::vector<const LongitudinalRecord*> pts;
    for (const auto& r : measurements)
        if (r.time >= model.grid.front() && r.time <= model.grid.back()) pts.push_back(&r);
    if (pts.empty()) throw InvalidArgument("subject has no measurements within the FPCA grid span");
    const int r = model.r;
    if (r == 0) return {};

    const auto n = static_cast<Eigen::Index>(pts.size());
    Eigen::MatrixXd Phi(n, r);
    Eigen::VectorXd resid(n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const double t = pts[static_cast<std::size_t>(j)]->time;
        resid(j) = pts[static_cast<std::size_t>(j)]->value - model.mean_at(t);
        for (int k = 0; k < r; ++k) Phi(j, k) = model.eigenfunction_at(k, t);
    }
    Eigen::VectorXd lambda(r);
    for (int k = 0; k < r; ++k) lambda(k) = model.eigenvalues[static_cast<std::size_t>(k)];

    Eigen::MatrixXd Sigma = Phi * lambda.asDiagonal() * Phi.transpose();
    Sigma.diagonal().array() += model.noise_variance;
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Sigma);
    const Eigen::VectorXd ev = es.eigenvalues();
    const double tol = 1e-10 * std::max(ev.cwiseAbs().maxCoeff(), std::numeric_limits<double>::min());
    Eigen::VectorXd inv(ev.size());
    for (Eigen::Index k = 0; k < ev.size(); ++k) inv(k) = ev(k) > tol ? 1.0 / ev(k) : 0.0;
    const Eigen::MatrixXd pinv = es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
    const Eigen::VectorXd xi = lambda.asDiagonal() * (Phi.transpose() * (pinv * resid));
    return std::vector<double>(xi.data(), xi.data() + r);
}

std::vector<double> basis_alignment(const FpcaModel& a, const FpcaModel& b)
{
    const int k_max = std::min(a.r, b.r);
    std::vector<double> out;
    for (int k = 0; k < k_max; ++k) {
        double acc = 0.0;
        for (std::size_t i = 0; i < a.grid.size(); ++i)
            acc += a.weights[i] * a.eigenfunctions(static_cast<Eigen::Index>(i), k) * b.eigenfunction_at(k, a.grid[i]);
        out.push_back(std::abs(acc));
    }
    return out;
}

} // namespace jdp::fpca
