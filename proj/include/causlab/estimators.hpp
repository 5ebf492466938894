#pragma once

// Marginal effects E_ex[Y | A = a] three ways: standardization over the
// covariate law (g-formula), the count-normalized IPW mean, and the weighted
// estimating equation sum_i W_S D(A_i; b) [Y_i - g(A_i; b)] = 0.

#include "causlab/measures.hpp"
#include "causlab/rng.hpp"
#include "causlab/sim.hpp"
#include "causlab/util.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace causlab {

class SingularSystemError : public Error {
  public:
    using Error::Error;
};

// ---------------------------------------------------------------------------
// g-formula

/// Discrete law of the covariate vector C.
struct CovariateLaw {
    std::vector<std::string> names;
    std::vector<std::vector<double>> support;
    std::vector<double> prob;
};

/// E[Y | A = a, C = c] on a finite support.
struct OutcomeRegression {
    std::map<std::pair<double, std::vector<double>>, double> mean;

    std::optional<double> at(double a, const std::vector<double> &c) const {
        auto it = mean.find({a, c});
        if (it == mean.end()) return std::nullopt;
        return it->second;
    }
};

inline CovariateLaw exact_covariate_law(const SystemSpec &spec, std::span<const std::string> covariates) {
    DiscreteLaw law = exact_law(spec, covariates);
    return {std::move(law.names), std::move(law.support), std::move(law.prob)};
}

/// Conditional means from the exact joint; cells of zero probability are omitted.
inline OutcomeRegression exact_outcome_regression(const JointTable &joint, std::string_view y, std::string_view a,
                                                  std::span<const std::string> covariates) {
    const std::size_t jy = joint.index_of(y);
    const std::size_t ja = joint.index_of(a);
    std::vector<std::size_t> jc;
    for (const auto &c : covariates) jc.push_back(joint.index_of(c));
    std::map<std::pair<double, std::vector<double>>, std::pair<double, double>> acc;
    for (std::size_t k = 0; k < joint.support.size(); ++k) {
        const auto &x = joint.support[k];
        std::vector<double> c;
        for (auto j : jc) c.push_back(x[j]);
        auto &[num, den] = acc[{static_cast<double>(x[ja]), c}];
        num += joint.prob[k] * x[jy];
        den += joint.prob[k];
    }
    OutcomeRegression reg;
    for (const auto &[key, nd] : acc)
        if (nd.second > 0.0) reg.mean.emplace(key, nd.first / nd.second);
    return reg;
}

inline CovariateLaw empirical_covariate_law(const Dataset &data, std::span<const std::string> covariates) {
    CovariateLaw law;
    law.names.assign(covariates.begin(), covariates.end());
    std::vector<const std::vector<double> *> cols;
    for (const auto &c : covariates) cols.push_back(&data.column(c));
    const auto idx = detail::index_cells(cols, data.n);
    std::vector<double> counts(idx.cells.size(), 0.0);
    for (std::size_t i = 0; i < data.n; ++i) counts[idx.id[i]] += 1.0;
    for (std::size_t k = 0; k < counts.size(); ++k) {
        law.support.push_back(idx.cells[k]);
        law.prob.push_back(counts[k] / static_cast<double>(data.n));
    }
    return law;
}

/// Cell means of Y within (A, C) cells.
inline OutcomeRegression empirical_outcome_regression(const Dataset &data, std::string_view y, std::string_view a,
                                                      std::span<const std::string> covariates) {
    const auto &yc = data.column(y);
    const auto &ac = data.column(a);
    std::vector<const std::vector<double> *> cols;
    for (const auto &c : covariates) cols.push_back(&data.column(c));
    cols.insert(cols.begin(), &ac);
    const auto idx = detail::index_cells(cols, data.n);
    std::vector<std::pair<double, double>> sums(idx.cells.size(), {0.0, 0.0});
    for (std::size_t i = 0; i < data.n; ++i) {
        auto &[s, k] = sums[idx.id[i]];
        s += yc[i];
        k += 1.0;
    }
    std::map<std::pair<double, std::vector<double>>, std::pair<double, double>> acc;
    for (std::size_t k = 0; k < sums.size(); ++k) {
        const auto &cell = idx.cells[k];
        acc.emplace(std::make_pair(cell[0], std::vector<double>(cell.begin() + 1, cell.end())), sums[k]);
    }
    OutcomeRegression reg;
    for (const auto &[key, sk] : acc) reg.mean.emplace(key, sk.first / sk.second);
    return reg;
}

/// sum_c E[Y | A = a, C = c] P(C = c).
inline double g_formula(const OutcomeRegression &cond, const CovariateLaw &cov, double a) {
    double total = 0.0;
    for (std::size_t k = 0; k < cov.support.size(); ++k) {
        if (cov.prob[k] == 0.0) continue;
        auto m = cond.at(a, cov.support[k]);
        if (!m) {
            std::string cell;
            for (std::size_t j = 0; j < cov.support[k].size(); ++j)
                cell += (j ? ", " : "") + (j < cov.names.size() ? cov.names[j] + "=" : "") +
                        detail::format_shortest(cov.support[k][j]);
            throw Error("support mismatch: no outcome model for A=" + detail::format_shortest(a) + " at " + cell);
        }
        total += cov.prob[k] * *m;
    }
    return total;
}

namespace detail {

/// Nodes and weights of n-point Gauss-Legendre quadrature on [-1, 1].
inline std::pair<std::vector<double>, std::vector<double>> gauss_legendre(std::size_t n) {
    std::vector<double> x(n);
    std::vector<double> w(n);
    for (std::size_t i = 0; i < (n + 1) / 2; ++i) {
        double z = std::cos(std::numbers::pi * (static_cast<double>(i) + 0.75) / (static_cast<double>(n) + 0.5));
        double dp = 0.0;
        for (int iter = 0; iter < 100; ++iter) {
            double p0 = 1.0;
            double p1 = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                const double p2 = p1;
                p1 = p0;
                const auto jj = static_cast<double>(j);
                p0 = ((2.0 * jj + 1.0) * z * p1 - jj * p2) / (jj + 1.0);
            }
            dp = static_cast<double>(n) * (z * p0 - p1) / (z * z - 1.0);
            const double dz = p0 / dp;
            z -= dz;
            if (std::abs(dz) < 1e-16) break;
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = w[n - 1 - i] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
    return {x, w};
}

} // namespace detail

/// Continuous-C g-formula: integral over [lo, hi] of E[Y | A = a, C = c] f_C(c) dc by
/// 128-point Gauss-Legendre. Unbounded supports are rejected.
inline double g_formula_quadrature(const std::function<double(double, double)> &cond_mean,
                                   const std::function<double(double)> &cov_density, double lo, double hi,
                                   double a) {
    if (!std::isfinite(lo) || !std::isfinite(hi) || !(lo < hi))
        throw Error("g-formula quadrature needs a bounded covariate support lo < hi");
    static const auto rule = detail::gauss_legendre(128);
    const double half = 0.5 * (hi - lo);
    const double mid = 0.5 * (hi + lo);
    double s = 0.0;
    for (std::size_t i = 0; i < rule.first.size(); ++i) {
        const double c = mid + half * rule.first[i];
        s += rule.second[i] * cond_mean(a, c) * cov_density(c);
    }
    return half * s;
}

// ---------------------------------------------------------------------------
// Weighted means

/// (1 / #{A_i = a}) sum_{A_i = a} Z_i Y_i with Z the stabilized weight.
inline double ipw_mean(const Dataset &data, const WeightVector &wv, std::string_view exposure,
                       std::string_view outcome, double a) {
    const auto &ac = data.column(exposure);
    const auto &yc = data.column(outcome);
    if (wv.size() != data.n) throw Error("weight vector length differs from dataset");
    double s = 0.0;
    std::size_t k = 0;
    for (std::size_t i = 0; i < data.n; ++i)
        if (ac[i] == a) {
            s += wv.ws[i] * yc[i];
            ++k;
        }
    if (k == 0) throw Error("no records with " + std::string(exposure) + "=" + detail::format_shortest(a));
    return s / static_cast<double>(k);
}

/// Unweighted E_obs[Y | A = a].
inline double naive_mean(const Dataset &data, std::string_view exposure, std::string_view outcome, double a) {
    const auto &ac = data.column(exposure);
    const auto &yc = data.column(outcome);
    double s = 0.0;
    std::size_t k = 0;
    for (std::size_t i = 0; i < data.n; ++i)
        if (ac[i] == a) {
            s += yc[i];
            ++k;
        }
    if (k == 0) throw Error("no records with " + std::string(exposure) + "=" + detail::format_shortest(a));
    return s / static_cast<double>(k);
}

// ---------------------------------------------------------------------------
// Marginal models and the weighted estimating equation

class MarginalModel {
  public:
    enum class Form { saturated_discrete, linear, logistic, custom };
    using MeanFn = std::function<double(double, std::span<const double>)>;
    using GradFn = std::function<void(double, std::span<const double>, std::span<double>)>;

    /// One parameter per exposure level: g(a_k; b) = b_k.
    static MarginalModel saturated(std::vector<double> levels) {
        std::sort(levels.begin(), levels.end());
        levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
        if (levels.empty()) throw Error("saturated model needs at least one level");
        MarginalModel m(Form::saturated_discrete, levels.size());
        m.levels_ = std::move(levels);
        return m;
    }
    /// g(a; b) = b0 + b1 a.
    static MarginalModel linear() { return MarginalModel(Form::linear, 2); }
    /// g(a; b) = expit(b0 + b1 a).
    static MarginalModel logistic() { return MarginalModel(Form::logistic, 2); }
    /// User form; the Newton Jacobian falls back to finite differences.
    static MarginalModel custom(std::size_t dim, MeanFn g, GradFn dg) {
        MarginalModel m(Form::custom, dim);
        m.g_ = std::move(g);
        m.dg_ = std::move(dg);
        return m;
    }

    Form form() const noexcept { return form_; }
    std::size_t dim() const noexcept { return dim_; }
    const std::vector<double> &levels() const noexcept { return levels_; }

    double g(double a, std::span<const double> beta) const {
        switch (form_) {
        case Form::saturated_discrete: return beta[level_index(a)];
        case Form::linear: return beta[0] + beta[1] * a;
        case Form::logistic: return detail::logistic(beta[0] + beta[1] * a);
        case Form::custom: return g_(a, beta);
        }
        return 0.0;
    }

    /// D(a; b) = dg/db written into `out` (length dim()).
    void dg(double a, std::span<const double> beta, std::span<double> out) const {
        switch (form_) {
        case Form::saturated_discrete:
            std::fill(out.begin(), out.end(), 0.0);
            out[level_index(a)] = 1.0;
            return;
        case Form::linear:
            out[0] = 1.0;
            out[1] = a;
            return;
        case Form::logistic: {
            const double mu = detail::logistic(beta[0] + beta[1] * a);
            out[0] = mu * (1.0 - mu);
            out[1] = a * mu * (1.0 - mu);
            return;
        }
        case Form::custom: dg_(a, beta, out); return;
        }
    }

    std::size_t level_index(double a) const {
        auto it = std::lower_bound(levels_.begin(), levels_.end(), a);
        if (it == levels_.end() || *it != a)
            throw Error("exposure level " + detail::format_shortest(a) + " is not in the saturated model");
        return static_cast<std::size_t>(it - levels_.begin());
    }

  private:
    MarginalModel(Form f, std::size_t dim) : form_(f), dim_(dim) {}

    Form form_;
    std::size_t dim_;
    std::vector<double> levels_;
    MeanFn g_;
    GradFn dg_;
};

struct WgeeFit {
    std::vector<double> beta;
    int iterations = 0;
    double norm = 0.0; ///< final norm of the mean estimating function
};

/// Root of (1/n) sum_i W_S(A_i, C_i) D(A_i; b) [Y_i - g(A_i; b)] by damped Newton.
/// Stops when the norm drops below 1e-10; at most 200 iterations.
inline WgeeFit fit_wgee(const Dataset &data, const WeightVector &wv, std::string_view exposure,
                        std::string_view outcome, const MarginalModel &model) {
    const auto &ac = data.column(exposure);
    const auto &yc = data.column(outcome);
    if (wv.size() != data.n) throw Error("weight vector length differs from dataset");
    for (double v : wv.ws)
        if (!(v > 0.0) || !std::isfinite(v)) throw PositivityError("weights must be finite and positive");
    const std::size_t p = model.dim();
    const auto ip = static_cast<Eigen::Index>(p);
    const double inv_n = 1.0 / static_cast<double>(data.n);

    Eigen::VectorXd beta = Eigen::VectorXd::Zero(ip);
    if (model.form() == MarginalModel::Form::saturated_discrete) {
        std::vector<double> sum(p, 0.0);
        std::vector<double> cnt(p, 0.0);
        for (std::size_t i = 0; i < data.n; ++i) {
            const auto k = model.level_index(ac[i]);
            sum[k] += yc[i];
            cnt[k] += 1.0;
        }
        for (std::size_t k = 0; k < p; ++k) {
            if (cnt[k] == 0.0)
                throw SingularSystemError("singular Jacobian: no records at exposure level " +
                                          detail::format_shortest(model.levels()[k]));
            beta(static_cast<Eigen::Index>(k)) = sum[k] / cnt[k];
        }
    }

    std::vector<double> d(p);
    auto estimating = [&](const Eigen::VectorXd &b) {
        Eigen::VectorXd u = Eigen::VectorXd::Zero(ip);
        const std::span<const double> bs(b.data(), p);
        for (std::size_t i = 0; i < data.n; ++i) {
            model.dg(ac[i], bs, d);
            const double r = wv.ws[i] * (yc[i] - model.g(ac[i], bs));
            for (std::size_t j = 0; j < p; ++j) u(static_cast<Eigen::Index>(j)) += d[j] * r;
        }
        return Eigen::VectorXd(u * inv_n);
    };
    auto jacobian = [&](const Eigen::VectorXd &b, const Eigen::VectorXd &u0) {
        Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(ip, ip);
        if (model.form() != MarginalModel::Form::custom) {
            const std::span<const double> bs(b.data(), p);
            for (std::size_t i = 0; i < data.n; ++i) {
                model.dg(ac[i], bs, d);
                const Eigen::Map<const Eigen::VectorXd> dv(d.data(), ip);
                jac.noalias() -= wv.ws[i] * dv * dv.transpose();
            }
            return Eigen::MatrixXd(jac * inv_n);
        }
        for (Eigen::Index j = 0; j < ip; ++j) {
            Eigen::VectorXd bj = b;
            const double h = 1e-6 * (1.0 + std::abs(b(j)));
            bj(j) += h;
            jac.col(j) = (estimating(bj) - u0) / h;
        }
        return jac;
    };

    constexpr int max_iter = 200;
    constexpr double tol = 1e-10;
    Eigen::VectorXd u = estimating(beta);
    for (int it = 0;; ++it) {
        const double norm = u.norm();
        if (norm < tol) return {std::vector<double>(beta.data(), beta.data() + p), it, norm};
        if (it == max_iter) throw ConvergenceError("weighted GEE did not converge", norm);
        Eigen::FullPivLU<Eigen::MatrixXd> lu(jacobian(beta, u));
        if (!lu.isInvertible()) throw SingularSystemError("singular Jacobian in weighted GEE (collinear design)");
        const Eigen::VectorXd step = lu.solve(-u);
        double t = 1.0;
        Eigen::VectorXd next = beta + step;
        Eigen::VectorXd un = estimating(next);
        while (!(un.norm() < norm) && t > 0x1p-30) {
            t *= 0.5;
            next = beta + t * step;
            un = estimating(next);
        }
        if (!(un.norm() < norm)) throw ConvergenceError("weighted GEE line search failed", norm);
        beta = next;
        u = un;
    }
}

// ---------------------------------------------------------------------------
// Effects and contrasts

struct EffectEstimate {
    std::string method;
    std::vector<double> levels;
    std::vector<double> means;
    std::vector<std::optional<double>> se;

    double mean_at(double a) const {
        for (std::size_t k = 0; k < levels.size(); ++k)
            if (levels[k] == a) return means[k];
        throw Error("estimate has no level " + detail::format_shortest(a));
    }
};

struct Contrast {
    double difference = 0.0;
    double ratio = 0.0;
};

inline Contrast contrast(const EffectEstimate &est, double a1, double a0) {
    const double m1 = est.mean_at(a1);
    const double m0 = est.mean_at(a0);
    if (m0 == 0.0) throw Error("ratio contrast undefined: mean at level " + detail::format_shortest(a0) + " is zero");
    return {m1 - m0, m1 / m0};
}

// ---------------------------------------------------------------------------
// Bootstrap

/// Maps a dataset to a vector of estimates (fixed length).
using Estimator = std::function<std::vector<double>(const Dataset &)>;

struct BootstrapResult {
    std::vector<double> estimate; ///< on the original data
    std::vector<double> se;       ///< replicate standard deviation
    std::vector<double> ci_low;   ///< percentile interval
    std::vector<double> ci_high;
    std::size_t replicates = 0;
    std::size_t failures = 0;
};

namespace detail {

/// Linear-interpolation quantile of sorted data.
inline double quantile_sorted(const std::vector<double> &v, double q) {
    const double h = (static_cast<double>(v.size()) - 1.0) * q;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

} // namespace detail

/// Nonparametric bootstrap with percentile intervals. Replicate b resamples with
/// stream derive(seed, b); the result does not depend on `workers`.
inline BootstrapResult bootstrap_ci(const Estimator &estimator, const Dataset &data, std::size_t replicates,
                                    std::uint64_t seed, int workers = 1, double level = 0.95) {
    if (replicates < 100) throw Error("bootstrap needs at least 100 replicates");
    BootstrapResult out;
    out.estimate = estimator(data);
    const std::size_t k = out.estimate.size();
    std::vector<std::vector<double>> reps(replicates);
    std::vector<char> failed(replicates, 0);
    detail::parallel_for(replicates, workers, [&](std::size_t begin, std::size_t end) {
        std::vector<std::size_t> idx(data.n);
        for (std::size_t b = begin; b < end; ++b) {
            Rng rng(derive(seed, b));
            for (auto &i : idx) i = static_cast<std::size_t>(rng.below(data.n));
            try {
                reps[b] = estimator(data.take(idx));
                if (reps[b].size() != k) failed[b] = 1;
            } catch (const Error &) {
                failed[b] = 1;
            }
        }
    });
    for (char f : failed) out.failures += static_cast<std::size_t>(f);
    if (static_cast<double>(out.failures) > 0.01 * static_cast<double>(replicates))
        throw Error("bootstrap: estimator failed in " + std::to_string(out.failures) + " of " +
                    std::to_string(replicates) + " replicates");
    out.replicates = replicates - out.failures;
    const double alpha = 0.5 * (1.0 - level);
    for (std::size_t j = 0; j < k; ++j) {
        std::vector<double> v;
        v.reserve(out.replicates);
        for (std::size_t b = 0; b < replicates; ++b)
            if (!failed[b]) v.push_back(reps[b][j]);
        std::sort(v.begin(), v.end());
        double mean = 0.0;
        for (double x : v) mean += x;
        mean /= static_cast<double>(v.size());
        double ss = 0.0;
        for (double x : v) ss += (x - mean) * (x - mean);
        out.se.push_back(std::sqrt(ss / static_cast<double>(v.size() - 1)));
        out.ci_low.push_back(detail::quantile_sorted(v, alpha));
        out.ci_high.push_back(detail::quantile_sorted(v, 1.0 - alpha));
    }
    return out;
}

/// How weights are produced inside an estimator, so bootstrap replicates refit
/// an estimated propensity model instead of reusing the original weights.
struct WeightPlan {
    std::optional<SystemSpec> truth; ///< true-model weights when set
    std::string exposure;
    std::vector<std::string> covariates;
    PropensityForm form = PropensityForm::frequency_table;
    std::optional<double> cap;

    WeightVector make(const Dataset &data) const {
        WeightVector wv = truth ? true_weights(*truth, data, exposure)
                                : estimated_weights(fit_propensity(data, exposure, covariates, form), data);
        return cap ? apply_weight_cap(std::move(wv), *cap) : wv;
    }
};

inline Estimator ipw_estimator(WeightPlan plan, std::string outcome, std::vector<double> levels) {
    return [plan = std::move(plan), outcome = std::move(outcome), levels = std::move(levels)](const Dataset &d) {
        const WeightVector wv = plan.make(d);
        std::vector<double> out;
        for (double a : levels) out.push_back(ipw_mean(d, wv, plan.exposure, outcome, a));
        return out;
    };
}

inline Estimator naive_estimator(std::string exposure, std::string outcome, std::vector<double> levels) {
    return [=](const Dataset &d) {
        std::vector<double> out;
        for (double a : levels) out.push_back(naive_mean(d, exposure, outcome, a));
        return out;
    };
}

/// Plug-in g-formula with cell-frequency estimates of E[Y | A, C] and f_C.
inline Estimator g_formula_estimator(std::string exposure, std::string outcome, std::vector<std::string> covariates,
                                     std::vector<double> levels) {
    return [=](const Dataset &d) {
        const auto law = empirical_covariate_law(d, covariates);
        const auto reg = empirical_outcome_regression(d, outcome, exposure, covariates);
        std::vector<double> out;
        for (double a : levels) out.push_back(g_formula(reg, law, a));
        return out;
    };
}

/// Saturated weighted GEE; returns one mean per level.
inline Estimator wgee_estimator(WeightPlan plan, std::string outcome, std::vector<double> levels) {
    return [plan = std::move(plan), outcome = std::move(outcome), levels = std::move(levels)](const Dataset &d) {
        const WeightVector wv = plan.make(d);
        const auto model = MarginalModel::saturated(levels);
        const auto fit = fit_wgee(d, wv, plan.exposure, outcome, model);
        std::vector<double> out;
        for (double a : levels) out.push_back(fit.beta[model.level_index(a)]);
        return out;
    };
}

} // namespace causlab
