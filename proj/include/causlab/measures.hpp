#pragma once

// Change of probability measure. The experimental measure P_ex obtained by
// surgery on the exposure A (keeping f_A^ex = f_A^obs) has Radon-Nikodym
// derivative with respect to P_obs
//
//     Z = f_A(A) / f_{A|C}(A | C),
//
// which is the stabilized weight W_S. E_obs[Z] = 1 and, conditionally on A,
// E_ex[Q | A] = E_obs[Z Q | A].

#include "causlab/sim.hpp"
#include "causlab/specio.hpp"
#include "causlab/util.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace causlab {

enum class WeightSource { true_model, estimated };

struct WeightVector {
    std::vector<double> w;  ///< 1 / f(A|C)
    std::vector<double> ws; ///< f(A) / f(A|C)
    WeightSource source = WeightSource::true_model;
    std::optional<double> cap;

    std::size_t size() const noexcept { return ws.size(); }
};

/// The unique node of kind exposure, unless `name` is given.
inline const NodeSpec &exposure_node(const SystemSpec &spec, std::string_view name = {}) {
    if (!name.empty()) {
        const auto *n = spec.find(name);
        if (!n) throw Error("unknown node " + std::string(name));
        if (n->kind != NodeKind::exposure) throw Error("node " + std::string(name) + " is not an exposure");
        return *n;
    }
    const NodeSpec *found = nullptr;
    for (const auto &n : spec.nodes)
        if (n.kind == NodeKind::exposure) {
            if (found) throw Error("system has several exposures; name one explicitly");
            found = &n;
        }
    if (!found) throw Error("system has no exposure node");
    return *found;
}

namespace detail {

/// f_A(a) = sum_c P(C=c) f(a | c) over the exact law of the exposure's parents.
class ExposureDensity {
  public:
    ExposureDensity(const SystemSpec &spec, const NodeSpec &exposure)
        : dist_(exposure.dist), parents_law_(exact_law(spec, exposure.parents)) {}

    double conditional(double a, std::span<const double> c) const { return conditional_density(dist_, c, a); }

    double marginal(double a) const {
        if (auto it = cache_.find(a); it != cache_.end()) return it->second;
        double f = 0.0;
        for (std::size_t k = 0; k < parents_law_.support.size(); ++k)
            if (parents_law_.prob[k] > 0.0) f += parents_law_.prob[k] * conditional_density(dist_, parents_law_.support[k], a);
        if (is_discrete_family(dist_.family)) cache_.emplace(a, f);
        return f;
    }

  private:
    const DistSpec &dist_;
    DiscreteLaw parents_law_;
    mutable std::map<double, double> cache_;
};

inline std::string describe_cell(std::string_view a_name, double a, std::span<const std::string> c_names,
                                 std::span<const double> c) {
    std::string s = std::string(a_name) + "=" + format_shortest(a);
    if (!c_names.empty()) {
        s += " | ";
        for (std::size_t j = 0; j < c_names.size(); ++j)
            s += (j ? ", " : "") + c_names[j] + "=" + format_shortest(c[j]);
    }
    return s;
}

} // namespace detail

/// Weights from the data-generating spec. The exposure's parents must have a
/// discrete law; the exposure itself may be discrete or continuous.
inline WeightVector true_weights(const SystemSpec &spec, const Dataset &data, std::string_view exposure = {}) {
    const NodeSpec &a_node = exposure_node(spec, exposure);
    const detail::ExposureDensity density(spec, a_node);
    const auto &a_col = data.column(a_node.name);
    std::vector<const std::vector<double> *> c_cols;
    for (const auto &p : a_node.parents) c_cols.push_back(&data.column(p));

    WeightVector wv;
    wv.source = WeightSource::true_model;
    wv.w.resize(data.n);
    wv.ws.resize(data.n);
    std::vector<double> c(c_cols.size());
    for (std::size_t i = 0; i < data.n; ++i) {
        for (std::size_t j = 0; j < c.size(); ++j) c[j] = (*c_cols[j])[i];
        const double f_ac = density.conditional(a_col[i], c);
        if (!(f_ac > 0.0) || !std::isfinite(f_ac))
            throw PositivityError("positivity violation at record " + std::to_string(i) + ": f(" +
                                  detail::describe_cell(a_node.name, a_col[i], a_node.parents, c) + ") = " +
                                  detail::format_shortest(f_ac));
        wv.w[i] = 1.0 / f_ac;
        wv.ws[i] = density.marginal(a_col[i]) / f_ac;
    }
    return wv;
}

/// E_obs[Z * q | A = a] by enumeration of a fully discrete spec. With q = 1 this
/// is 1; with a = any level and q = Y it equals E_ex[Y | A = a].
inline double exact_reweighted_expectation(const SystemSpec &spec,
                                           const std::function<double(std::span<const int>)> &q, int a,
                                           std::string_view exposure = {}) {
    const NodeSpec &a_node = exposure_node(spec, exposure);
    const JointTable joint = exact_joint(spec);
    const detail::ExposureDensity density(spec, a_node);
    const std::size_t ja = joint.index_of(a_node.name);
    std::vector<std::size_t> jc;
    for (const auto &p : a_node.parents) jc.push_back(joint.index_of(p));

    double num = 0.0;
    double pa = 0.0;
    std::vector<double> c(jc.size());
    for (std::size_t k = 0; k < joint.support.size(); ++k) {
        const auto &x = joint.support[k];
        if (x[ja] != a || joint.prob[k] == 0.0) continue;
        for (std::size_t j = 0; j < jc.size(); ++j) c[j] = x[jc[j]];
        const double z = density.marginal(a) / density.conditional(a, c);
        num += joint.prob[k] * z * q(x);
        pa += joint.prob[k];
    }
    if (pa == 0.0) throw PositivityError("exposure level " + std::to_string(a) + " has zero probability");
    return num / pa;
}

/// E_obs[W_S] by enumeration.
inline double exact_weight_mean(const SystemSpec &spec, std::string_view exposure = {}) {
    const NodeSpec &a_node = exposure_node(spec, exposure);
    const JointTable joint = exact_joint(spec);
    const detail::ExposureDensity density(spec, a_node);
    const std::size_t ja = joint.index_of(a_node.name);
    std::vector<std::size_t> jc;
    for (const auto &p : a_node.parents) jc.push_back(joint.index_of(p));
    std::vector<double> c(jc.size());
    return joint.expect([&](std::span<const int> x) {
        for (std::size_t j = 0; j < jc.size(); ++j) c[j] = x[jc[j]];
        return density.marginal(x[ja]) / density.conditional(x[ja], c);
    });
}

// ---------------------------------------------------------------------------
// Estimated propensity models

enum class PropensityForm { frequency_table, logistic_linear };

struct PropensityModel {
    PropensityForm form = PropensityForm::frequency_table;
    std::string exposure;
    std::vector<std::string> covariates;
    std::vector<double> levels;   ///< observed exposure levels, ascending
    std::vector<double> marginal; ///< empirical f_A per level
    std::map<std::vector<double>, std::vector<double>> cells; ///< frequency table: P(A = level | cell)
    std::vector<double> coefficients; ///< logistic: intercept then one per covariate
    std::string fitted_on;            ///< dataset spec hash and seed
    int iterations = 0;

    std::size_t level_index(double a) const {
        auto it = std::lower_bound(levels.begin(), levels.end(), a);
        if (it == levels.end() || *it != a) throw Error("exposure level " + detail::format_shortest(a) + " not seen in fit");
        return static_cast<std::size_t>(it - levels.begin());
    }

    double marginal_prob(double a) const { return marginal[level_index(a)]; }

    double conditional(double a, std::span<const double> c) const {
        const std::size_t k = level_index(a);
        if (form == PropensityForm::frequency_table) {
            auto it = cells.find(std::vector<double>(c.begin(), c.end()));
            if (it == cells.end())
                throw PositivityError("covariate cell not seen in fit: " +
                                      detail::describe_cell(exposure, a, covariates, c));
            return it->second[k];
        }
        double eta = coefficients[0];
        for (std::size_t j = 0; j < c.size(); ++j) eta += coefficients[j + 1] * c[j];
        const double p1 = detail::logistic(eta);
        return k == 1 ? p1 : 1.0 - p1;
    }
};

namespace detail {

inline std::vector<double> row_of(const std::vector<const std::vector<double> *> &cols, std::size_t i) {
    std::vector<double> r(cols.size());
    for (std::size_t j = 0; j < cols.size(); ++j) r[j] = (*cols[j])[i];
    return r;
}

/// Distinct covariate rows in ascending order and the cell id of every record.
struct CellIndex {
    std::vector<std::vector<double>> cells;
    std::vector<std::size_t> id;
};

inline CellIndex index_cells(const std::vector<const std::vector<double> *> &cols, std::size_t n) {
    std::map<std::vector<double>, std::size_t> seen;
    std::vector<double> key(cols.size());
    CellIndex out;
    out.id.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < cols.size(); ++j) key[j] = (*cols[j])[i];
        auto it = seen.find(key);
        if (it == seen.end()) it = seen.emplace(key, seen.size()).first;
        out.id[i] = it->second;
    }
    std::vector<std::size_t> rank(seen.size());
    for (auto &[cell, first] : seen) {
        rank[first] = out.cells.size();
        out.cells.push_back(cell);
    }
    for (auto &v : out.id) v = rank[v];
    return out;
}

} // namespace detail

/// Fits f(A | C) and f(A) on a dataset. Logistic fits stop when the mean score
/// has norm below 1e-10 and fail after 100 damped Newton iterations.
inline PropensityModel fit_propensity(const Dataset &data, std::string_view exposure,
                                      std::vector<std::string> covariates, PropensityForm form) {
    if (data.n == 0) throw Error("cannot fit a propensity model on an empty dataset");
    PropensityModel m;
    m.form = form;
    m.exposure = std::string(exposure);
    m.covariates = std::move(covariates);
    m.fitted_on = data.spec_hash + ":" + std::to_string(data.seed);
    const auto &a = data.column(exposure);
    std::vector<const std::vector<double> *> c_cols;
    for (const auto &c : m.covariates) c_cols.push_back(&data.column(c));

    std::set<double> level_set(a.begin(), a.end());
    m.levels.assign(level_set.begin(), level_set.end());
    if (m.levels.size() < 2)
        throw PositivityError("exposure " + m.exposure + " takes the single level " +
                              detail::format_shortest(m.levels[0]) + "; weights are undefined");
    std::vector<double> counts(m.levels.size(), 0.0);
    for (double v : a) counts[m.level_index(v)] += 1.0;
    for (double &c : counts) c /= static_cast<double>(data.n);
    m.marginal = counts;

    if (form == PropensityForm::frequency_table) {
        const auto idx = detail::index_cells(c_cols, data.n);
        std::vector<std::vector<double>> tally(idx.cells.size(), std::vector<double>(m.levels.size(), 0.0));
        for (std::size_t i = 0; i < data.n; ++i) tally[idx.id[i]][m.level_index(a[i])] += 1.0;
        for (std::size_t ci = 0; ci < tally.size(); ++ci) {
            const auto &cell = idx.cells[ci];
            auto &t = tally[ci];
            double total = 0.0;
            for (double v : t) total += v;
            for (std::size_t k = 0; k < t.size(); ++k) {
                if (t[k] == 0.0)
                    throw PositivityError("empty cell " + detail::describe_cell(m.exposure, m.levels[k], m.covariates, cell));
                t[k] /= total;
            }
            m.cells.emplace(cell, t);
        }
        return m;
    }

    if (m.levels.size() != 2 || m.levels[0] != 0.0 || m.levels[1] != 1.0)
        throw Error("logistic-linear propensity needs a 0/1 exposure");
    const auto p = static_cast<Eigen::Index>(m.covariates.size() + 1);
    Eigen::MatrixXd x(static_cast<Eigen::Index>(data.n), p);
    Eigen::VectorXd y(static_cast<Eigen::Index>(data.n));
    for (std::size_t i = 0; i < data.n; ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        x(r, 0) = 1.0;
        for (std::size_t j = 0; j < c_cols.size(); ++j) x(r, static_cast<Eigen::Index>(j + 1)) = (*c_cols[j])[i];
        y(r) = a[i];
    }
    const double inv_n = 1.0 / static_cast<double>(data.n);
    auto loglik = [&](const Eigen::VectorXd &beta) {
        const Eigen::VectorXd eta = x * beta;
        double ll = 0.0;
        for (Eigen::Index i = 0; i < eta.size(); ++i) {
            const double e = eta(i);
            // log(1 + exp(e)) without overflow
            const double softplus = e > 0 ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e));
            ll += y(i) * e - softplus;
        }
        return ll * inv_n;
    };
    auto score = [&](const Eigen::VectorXd &beta, Eigen::MatrixXd *info) {
        const Eigen::VectorXd eta = x * beta;
        Eigen::VectorXd mu(eta.size());
        for (Eigen::Index i = 0; i < eta.size(); ++i) mu(i) = detail::logistic(eta(i));
        if (info) {
            const Eigen::VectorXd v = mu.array() * (1.0 - mu.array());
            *info = x.transpose() * v.asDiagonal() * x * inv_n;
        }
        return Eigen::VectorXd(x.transpose() * (y - mu) * inv_n);
    };

    Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
    constexpr int max_iter = 100;
    constexpr double tol = 1e-10;
    Eigen::MatrixXd info;
    for (int it = 0;; ++it) {
        const Eigen::VectorXd g = score(beta, &info);
        if (g.norm() < tol) {
            m.iterations = it;
            break;
        }
        if (it == max_iter) throw ConvergenceError("logistic propensity fit did not converge", g.norm());
        Eigen::FullPivLU<Eigen::MatrixXd> lu(info);
        if (!lu.isInvertible()) throw ConvergenceError("logistic propensity: singular information matrix", g.norm());
        const Eigen::VectorXd step = lu.solve(g);
        const double base = loglik(beta);
        const double gnorm = g.norm();
        auto improves = [&](const Eigen::VectorXd &b) {
            return loglik(b) > base || score(b, nullptr).norm() < gnorm;
        };
        double t = 1.0;
        Eigen::VectorXd next = beta + step;
        while (!improves(next) && t > 0x1p-30) {
            t *= 0.5;
            next = beta + t * step;
        }
        if (t <= 0x1p-30) throw ConvergenceError("logistic propensity: line search failed", g.norm());
        beta = next;
    }
    m.coefficients.assign(beta.data(), beta.data() + beta.size());
    return m;
}

/// W and W_S from a fitted propensity model.
inline WeightVector estimated_weights(const PropensityModel &model, const Dataset &data) {
    const auto &a = data.column(model.exposure);
    std::vector<const std::vector<double> *> c_cols;
    for (const auto &c : model.covariates) c_cols.push_back(&data.column(c));
    WeightVector wv;
    wv.source = WeightSource::estimated;
    wv.w.resize(data.n);
    wv.ws.resize(data.n);
    const auto idx = detail::index_cells(c_cols, data.n);
    std::vector<std::vector<double>> memo(idx.cells.size(),
                                          std::vector<double>(model.levels.size(), std::numeric_limits<double>::quiet_NaN()));
    for (std::size_t i = 0; i < data.n; ++i) {
        const auto &c = idx.cells[idx.id[i]];
        double &f_ac = memo[idx.id[i]][model.level_index(a[i])];
        if (std::isnan(f_ac)) f_ac = model.conditional(a[i], c);
        if (!(f_ac > 0.0))
            throw PositivityError("positivity violation at record " + std::to_string(i) + ": estimated f(" +
                                  detail::describe_cell(model.exposure, a[i], model.covariates, c) + ") = 0");
        wv.w[i] = 1.0 / f_ac;
        wv.ws[i] = model.marginal_prob(a[i]) / f_ac;
    }
    return wv;
}

/// Caps both weight columns at `cap` and records the cap.
inline WeightVector apply_weight_cap(WeightVector wv, double cap) {
    if (!(cap > 0.0)) throw Error("weight cap must be positive");
    for (auto &v : wv.w) v = std::min(v, cap);
    for (auto &v : wv.ws) v = std::min(v, cap);
    wv.cap = cap;
    return wv;
}

// ---------------------------------------------------------------------------
// Reweighting

/// Hajek ratio sum_{A_i=a} ws_i q_i / sum_{A_i=a} ws_i: the sample version of E_obs[Z Q | A=a].
inline double reweighted_expectation(const Dataset &data, const WeightVector &wv, std::string_view q,
                                     std::string_view exposure, double a) {
    const auto &qc = data.column(q);
    const auto &ac = data.column(exposure);
    if (wv.size() != data.n) throw Error("weight vector length differs from dataset");
    double num = 0.0;
    double den = 0.0;
    for (std::size_t i = 0; i < data.n; ++i)
        if (ac[i] == a) {
            num += wv.ws[i] * qc[i];
            den += wv.ws[i];
        }
    if (den == 0.0) throw Error("no records with " + std::string(exposure) + "=" + detail::format_shortest(a));
    return num / den;
}

struct WeightReport {
    std::size_t n = 0;
    double mean_ws = 0.0;
    double max_ws = 0.0;
    double min_ws = 0.0;
    double ess = 0.0; ///< (sum ws)^2 / sum ws^2
    double mean_w = 0.0;
    double max_w = 0.0;
};

inline WeightReport weight_diagnostics(const WeightVector &wv) {
    if (wv.ws.empty()) throw Error("empty weight vector");
    WeightReport r;
    r.n = wv.ws.size();
    double s = 0.0;
    double s2 = 0.0;
    r.max_ws = wv.ws[0];
    r.min_ws = wv.ws[0];
    for (double v : wv.ws) {
        s += v;
        s2 += v * v;
        r.max_ws = std::max(r.max_ws, v);
        r.min_ws = std::min(r.min_ws, v);
    }
    r.mean_ws = s / static_cast<double>(r.n);
    r.ess = s * s / s2;
    if (!wv.w.empty()) {
        double sw = 0.0;
        for (double v : wv.w) {
            sw += v;
            r.max_w = std::max(r.max_w, v);
        }
        r.mean_w = sw / static_cast<double>(wv.w.size());
    }
    return r;
}

} // namespace causlab
