#pragma once

// Forward sampling under the observational measure, graph surgery for the
// experimental measure, and exact enumeration of fully discrete systems.

#include "causlab/rng.hpp"
#include "causlab/specio.hpp"
#include "causlab/util.hpp"

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace causlab {

// ---------------------------------------------------------------------------
// Conditional distributions

namespace detail {

inline bool matches(std::span<const int> pattern, std::span<const double> parents) noexcept {
    for (std::size_t j = 0; j < pattern.size(); ++j)
        if (parents[j] != static_cast<double>(pattern[j])) return false;
    return true;
}

} // namespace detail

/// Parameters in effect for the given parent values: the matching table row, or
/// the direct parameters. Throws when a table has no row for the parent values.
inline const std::vector<double> &active_params(const DistSpec &d, std::span<const double> parents) {
    if (!d.is_table()) return d.params;
    for (const auto &row : d.table)
        if (row.pattern.size() == parents.size() && detail::matches(row.pattern, parents)) return row.params;
    std::string pat;
    for (std::size_t j = 0; j < parents.size(); ++j) pat += (j ? "," : "") + detail::format_shortest(parents[j]);
    throw Error("no table row for parent values " + pat);
}

namespace detail {

/// sum_j b_j x_j over the linear coefficients starting at `offset`; zero inside table rows.
inline double linear_term(const DistSpec &d, const std::vector<double> &p, std::size_t offset,
                          std::span<const double> parents) noexcept {
    if (d.is_table()) return 0.0;
    double s = 0.0;
    for (std::size_t j = 0; j < parents.size(); ++j) s += p[offset + j] * parents[j];
    return s;
}

inline double discrete_pmf(Family f, const std::vector<double> &p, double x) noexcept {
    if (x != std::floor(x) || x < 0) return 0.0;
    const auto k = static_cast<std::size_t>(x);
    if (f == Family::bernoulli) return k == 0 ? 1.0 - p[0] : (k == 1 ? p[0] : 0.0);
    return k < p.size() ? p[k] : 0.0;
}

} // namespace detail

/// Probability mass (discrete families) or density (continuous families) of x.
inline double conditional_density(const DistSpec &d, std::span<const double> parents, double x) {
    const auto &p = active_params(d, parents);
    switch (d.family) {
    case Family::bernoulli:
    case Family::categorical: return detail::discrete_pmf(d.family, p, x);
    case Family::gaussian: {
        const double mean = p[0] + detail::linear_term(d, p, 1, parents);
        const double sd = p.back();
        if (sd == 0.0) return x == mean ? std::numeric_limits<double>::infinity() : 0.0;
        const double z = (x - mean) / sd;
        return std::exp(-0.5 * z * z) / (sd * std::sqrt(2.0 * std::numbers::pi));
    }
    case Family::exponential_hazard: {
        const double rate = p[0] * std::exp(detail::linear_term(d, p, 1, parents));
        return x < 0 ? 0.0 : rate * std::exp(-rate * x);
    }
    case Family::gamma_frailty: {
        const double var = p[0];
        if (var == 0.0) return x == 1.0 ? std::numeric_limits<double>::infinity() : 0.0;
        if (x <= 0) return 0.0;
        const double shape = 1.0 / var;
        return std::exp((shape - 1.0) * std::log(x) - x / var - std::lgamma(shape) - shape * std::log(var));
    }
    case Family::linear_gaussian_step: break;
    }
    throw Error("linear-gaussian-step has no static density");
}

/// Conditional mean of a node given its parents.
inline double conditional_mean(const DistSpec &d, std::span<const double> parents) {
    const auto &p = active_params(d, parents);
    switch (d.family) {
    case Family::bernoulli: return p[0];
    case Family::categorical: {
        double m = 0.0;
        for (std::size_t k = 0; k < p.size(); ++k) m += static_cast<double>(k) * p[k];
        return m;
    }
    case Family::gaussian: return p[0] + detail::linear_term(d, p, 1, parents);
    case Family::exponential_hazard: return 1.0 / (p[0] * std::exp(detail::linear_term(d, p, 1, parents)));
    case Family::gamma_frailty: return 1.0;
    case Family::linear_gaussian_step: break;
    }
    throw Error("linear-gaussian-step has no static mean");
}

/// One draw of a random-variable node given its parent values.
inline double draw(const DistSpec &d, std::span<const double> parents, Rng &rng) {
    const auto &p = active_params(d, parents);
    switch (d.family) {
    case Family::bernoulli: return rng.uniform() < p[0] ? 1.0 : 0.0;
    case Family::categorical: {
        const double u = rng.uniform();
        double acc = 0.0;
        for (std::size_t k = 0; k + 1 < p.size(); ++k) {
            acc += p[k];
            if (u < acc) return static_cast<double>(k);
        }
        return static_cast<double>(p.size() - 1);
    }
    case Family::gaussian: return p[0] + detail::linear_term(d, p, 1, parents) + p.back() * rng.normal();
    case Family::exponential_hazard: return rng.exponential(p[0] * std::exp(detail::linear_term(d, p, 1, parents)));
    case Family::gamma_frailty: return p[0] == 0.0 ? 1.0 : rng.gamma(1.0 / p[0], p[0]);
    case Family::linear_gaussian_step: break;
    }
    throw Error("linear-gaussian-step nodes are simulated by simulate_process_system");
}

// ---------------------------------------------------------------------------
// Datasets

struct Dataset {
    std::vector<std::string> names;
    std::vector<std::vector<double>> columns;
    std::size_t n = 0;
    std::uint64_t seed = 0;
    Regime regime;
    std::string spec_hash;

    bool operator==(const Dataset &) const = default;

    bool has(std::string_view name) const noexcept {
        for (const auto &nm : names)
            if (nm == name) return true;
        return false;
    }

    const std::vector<double> &column(std::string_view name) const {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return columns[i];
        throw Error("dataset has no column " + std::string(name));
    }

    void add_column(std::string name, std::vector<double> values) {
        if (!names.empty() && values.size() != n) throw Error("column " + name + " has wrong length");
        n = values.size();
        names.push_back(std::move(name));
        columns.push_back(std::move(values));
    }

    /// Rows selected by index, repeats allowed (bootstrap resampling).
    Dataset take(std::span<const std::size_t> rows) const {
        Dataset out;
        out.names = names;
        out.n = rows.size();
        out.seed = seed;
        out.regime = regime;
        out.spec_hash = spec_hash;
        out.columns.resize(columns.size());
        for (std::size_t c = 0; c < columns.size(); ++c) {
            out.columns[c].resize(rows.size());
            for (std::size_t i = 0; i < rows.size(); ++i) out.columns[c][i] = columns[c][rows[i]];
        }
        return out;
    }
};

// ---------------------------------------------------------------------------
// Graph surgery

/// do(exposure ~ marginal): cut every arrow into the exposure and give it the
/// supplied marginal. All other nodes are copied unchanged.
inline SystemSpec apply_do(const SystemSpec &spec, std::string_view exposure, const DistSpec &marginal) {
    auto idx = spec.index_of(exposure);
    if (!idx) throw Error("unknown node " + std::string(exposure));
    if (spec.nodes[*idx].kind != NodeKind::exposure)
        throw Error("node " + std::string(exposure) + " is not an exposure");
    if (marginal.is_table()) throw Error("intervention marginal must not be conditional");
    if (auto want = expected_arity(marginal.family, 0);
        (want && marginal.params.size() != *want) || marginal.params.empty())
        throw Error("intervention marginal has wrong parameter count");
    if (marginal.family == Family::linear_gaussian_step)
        throw Error("intervention marginal must be a random-variable family");
    SystemSpec out = spec;
    out.nodes[*idx].parents.clear();
    out.nodes[*idx].dist = marginal;
    out.regime = {Regime::Kind::experimental, std::string(exposure)};
    return out;
}

// ---------------------------------------------------------------------------
// Exact enumeration

struct JointTable {
    std::vector<std::string> names;
    std::vector<std::vector<int>> support; ///< full assignments, lexicographic in declaration order
    std::vector<double> prob;

    std::size_t index_of(std::string_view name) const {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return i;
        throw Error("joint table has no variable " + std::string(name));
    }

    /// sum over cells of prob * f(assignment)
    double expect(const std::function<double(std::span<const int>)> &f) const {
        double s = 0.0;
        for (std::size_t c = 0; c < support.size(); ++c)
            if (prob[c] != 0.0) s += prob[c] * f(support[c]);
        return s;
    }

    double probability(const std::function<bool(std::span<const int>)> &event) const {
        return expect([&](std::span<const int> x) { return event(x) ? 1.0 : 0.0; });
    }

    /// Marginal pmf of one variable, indexed by value.
    std::vector<double> marginal(std::string_view name) const {
        const std::size_t j = index_of(name);
        std::vector<double> pmf;
        for (std::size_t c = 0; c < support.size(); ++c) {
            const auto v = static_cast<std::size_t>(support[c][j]);
            if (pmf.size() <= v) pmf.resize(v + 1, 0.0);
            pmf[v] += prob[c];
        }
        return pmf;
    }
};

/// Full enumeration of the joint law of a fully discrete system.
inline JointTable exact_joint(const SystemSpec &spec) {
    if (auto diags = validate(spec); !diags.empty()) throw SpecError(std::move(diags));
    const std::size_t m = spec.nodes.size();
    std::vector<std::size_t> sizes(m);
    std::vector<std::vector<std::size_t>> parent_idx(m);
    for (std::size_t i = 0; i < m; ++i) {
        const auto &n = spec.nodes[i];
        if (!is_variable_kind(n.kind) || !is_discrete_family(n.dist.family))
            throw Error("exact_joint requires a fully discrete system; node " + n.name + " is continuous");
        sizes[i] = support_size(n.dist);
        for (const auto &p : n.parents) parent_idx[i].push_back(*spec.index_of(p));
    }

    JointTable table;
    for (const auto &n : spec.nodes) table.names.push_back(n.name);
    std::vector<int> cur(m, 0);
    std::vector<double> vals(m, 0.0);
    std::vector<double> pv;

    std::function<void(std::size_t, double)> rec = [&](std::size_t i, double p) {
        if (i == m) {
            table.support.push_back(cur);
            table.prob.push_back(p);
            return;
        }
        pv.clear();
        for (auto j : parent_idx[i]) pv.push_back(vals[j]);
        const auto parents = pv; // rec() below reuses pv
        for (std::size_t v = 0; v < sizes[i]; ++v) {
            cur[i] = static_cast<int>(v);
            vals[i] = static_cast<double>(v);
            const double q = p == 0.0 ? 0.0 : conditional_density(spec.nodes[i].dist, parents, vals[i]);
            rec(i + 1, p * q);
        }
    };
    rec(0, 1.0);
    return table;
}

/// The node together with all of its ancestors, in declaration order.
inline SystemSpec ancestral_subsystem(const SystemSpec &spec, std::span<const std::string> targets) {
    std::vector<bool> keep(spec.nodes.size(), false);
    std::vector<std::size_t> stack;
    for (const auto &t : targets) {
        auto i = spec.index_of(t);
        if (!i) throw Error("unknown node " + t);
        stack.push_back(*i);
    }
    while (!stack.empty()) {
        const auto i = stack.back();
        stack.pop_back();
        if (keep[i]) continue;
        keep[i] = true;
        for (const auto &p : spec.nodes[i].parents)
            if (auto j = spec.index_of(p)) stack.push_back(*j);
    }
    SystemSpec sub;
    sub.name = spec.name;
    for (std::size_t i = 0; i < spec.nodes.size(); ++i)
        if (keep[i]) sub.nodes.push_back(spec.nodes[i]);
    return sub;
}

/// Exact joint law of a set of discrete nodes: (value tuple, probability) pairs.
struct DiscreteLaw {
    std::vector<std::string> names;
    std::vector<std::vector<double>> support;
    std::vector<double> prob;
};

inline DiscreteLaw exact_law(const SystemSpec &spec, std::span<const std::string> nodes) {
    DiscreteLaw law;
    law.names.assign(nodes.begin(), nodes.end());
    if (nodes.empty()) {
        law.support.push_back({});
        law.prob.push_back(1.0);
        return law;
    }
    const JointTable joint = exact_joint(ancestral_subsystem(spec, nodes));
    std::vector<std::size_t> cols;
    for (const auto &n : nodes) cols.push_back(joint.index_of(n));
    std::map<std::vector<double>, double> acc;
    for (std::size_t c = 0; c < joint.support.size(); ++c) {
        std::vector<double> key;
        for (auto j : cols) key.push_back(joint.support[c][j]);
        acc[key] += joint.prob[c];
    }
    for (auto &[k, p] : acc) {
        law.support.push_back(k);
        law.prob.push_back(p);
    }
    return law;
}

/// Observational marginal of a discrete node, as a bernoulli/categorical DistSpec.
inline DistSpec implied_marginal(const SystemSpec &spec, std::string_view node) {
    const std::string name(node);
    const JointTable joint = exact_joint(ancestral_subsystem(spec, std::span(&name, 1)));
    auto pmf = joint.marginal(name);
    const auto *n = spec.find(name);
    if (n->dist.family == Family::bernoulli) return DistSpec::direct(Family::bernoulli, {pmf.size() > 1 ? pmf[1] : 0.0});
    pmf.resize(support_size(n->dist), 0.0);
    return DistSpec::direct(Family::categorical, pmf);
}

// ---------------------------------------------------------------------------
// Sampling

/// n i.i.d. records drawn ancestrally in declaration order; record i uses
/// stream derive(seed, i), so the result does not depend on `workers`.
inline Dataset sample(const SystemSpec &spec, std::size_t n, std::uint64_t seed, int workers = 1) {
    if (n == 0) throw Error("sample size must be at least 1");
    if (auto diags = validate(spec); !diags.empty()) throw SpecError(std::move(diags));
    const std::size_t m = spec.nodes.size();
    std::vector<std::vector<std::size_t>> parent_idx(m);
    for (std::size_t i = 0; i < m; ++i) {
        if (!is_variable_kind(spec.nodes[i].kind))
            throw Error("node " + spec.nodes[i].name + " is a process; use simulate_process_system");
        for (const auto &p : spec.nodes[i].parents) parent_idx[i].push_back(*spec.index_of(p));
    }

    Dataset data;
    data.n = n;
    data.seed = seed;
    data.regime = spec.regime;
    data.spec_hash = spec_hash(spec);
    for (const auto &node : spec.nodes) data.names.push_back(node.name);
    data.columns.assign(m, std::vector<double>(n));

    detail::parallel_for(n, workers, [&](std::size_t begin, std::size_t end) {
        std::vector<double> vals(m);
        std::vector<double> pv;
        for (std::size_t r = begin; r < end; ++r) {
            Rng rng(derive(seed, r));
            for (std::size_t i = 0; i < m; ++i) {
                pv.clear();
                for (auto j : parent_idx[i]) pv.push_back(vals[j]);
                vals[i] = draw(spec.nodes[i].dist, pv, rng);
                data.columns[i][r] = vals[i];
            }
        }
    });
    return data;
}

} // namespace causlab
