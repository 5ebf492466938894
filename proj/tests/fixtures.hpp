#pragma once

#include "causlab/rng.hpp"
#include "causlab/sim.hpp"
#include "causlab/specio.hpp"

#include <functional>
#include <span>

#include <string>
#include <string_view>
#include <vector>

namespace causlab::testing {

// Binary confounder C, exposure A | C, outcome Y | A, C.
// E_ex[Y | A=1] = 0.6, E_ex[Y | A=0] = 0.35; naive means 0.68 / 0.29.
inline constexpr std::string_view kS1 = R"(# confounding benchmark
system "S1"
node C kind=covariate dist=bernoulli(0.5)
node A kind=exposure given=(C) dist=table{0: bernoulli(0.3); 1: bernoulli(0.7)}
node Y kind=outcome given=(A, C) dist=table{0,0: bernoulli(0.2); 0,1: bernoulli(0.5); 1,0: bernoulli(0.4); 1,1: bernoulli(0.8)}
)";

// Independent V, G; collider Y with P(Y=1 | V, G) = 0.1 + 0.4 V + 0.4 G.
inline constexpr std::string_view kColliderDemo = R"(system "collider-demo"
node V kind=exposure dist=bernoulli(0.5)
node G kind=covariate dist=bernoulli(0.5)
node Y kind=outcome given=(V, G) dist=table{0,0: bernoulli(0.1); 0,1: bernoulli(0.5); 1,0: bernoulli(0.5); 1,1: bernoulli(0.9)}
)";

inline std::vector<double> random_simplex(Rng &rng, std::size_t k, double floor = 0.15) {
    std::vector<double> p(k);
    double s = 0.0;
    for (auto &v : p) s += (v = floor + rng.uniform());
    for (auto &v : p) v /= s;
    return p;
}

/// Random fully discrete confounding system: covariates C1..Cm, exposure A | C, outcome Y | A, C.
/// All conditional probabilities are bounded away from zero.
inline SystemSpec random_discrete_system(Rng &rng, const std::string &name = "random") {
    SystemSpec spec;
    spec.name = name;
    const std::size_t m = 1 + rng.below(2);
    std::vector<std::size_t> sizes;
    for (std::size_t j = 0; j < m; ++j) {
        NodeSpec c;
        c.name = "C" + std::to_string(j + 1);
        c.kind = NodeKind::covariate;
        const std::size_t k = 2 + rng.below(2);
        sizes.push_back(k);
        if (j == 0) {
            c.dist = DistSpec::direct(Family::categorical, random_simplex(rng, k));
        } else {
            c.parents = {"C1"};
            std::vector<TableRow> rows;
            for (int v = 0; v < static_cast<int>(sizes[0]); ++v) rows.push_back({{v}, random_simplex(rng, k)});
            c.dist = DistSpec::tabular(Family::categorical, rows);
        }
        spec.nodes.push_back(c);
    }

    std::vector<std::vector<int>> cells{{}};
    for (auto s : sizes) {
        std::vector<std::vector<int>> next;
        for (const auto &cell : cells)
            for (int v = 0; v < static_cast<int>(s); ++v) {
                auto c2 = cell;
                c2.push_back(v);
                next.push_back(c2);
            }
        cells = next;
    }

    NodeSpec a;
    a.name = "A";
    a.kind = NodeKind::exposure;
    for (std::size_t j = 0; j < m; ++j) a.parents.push_back("C" + std::to_string(j + 1));
    const std::size_t levels = 2 + rng.below(2);
    std::vector<TableRow> arows;
    for (const auto &cell : cells) arows.push_back({cell, random_simplex(rng, levels)});
    a.dist = DistSpec::tabular(Family::categorical, arows);
    spec.nodes.push_back(a);

    NodeSpec y;
    y.name = "Y";
    y.kind = NodeKind::outcome;
    y.parents = {"A"};
    for (std::size_t j = 0; j < m; ++j) y.parents.push_back("C" + std::to_string(j + 1));
    std::vector<TableRow> yrows;
    for (int lv = 0; lv < static_cast<int>(levels); ++lv)
        for (const auto &cell : cells) {
            std::vector<int> pat{lv};
            pat.insert(pat.end(), cell.begin(), cell.end());
            yrows.push_back({pat, {0.05 + 0.9 * rng.uniform()}});
        }
    y.dist = DistSpec::tabular(Family::bernoulli, yrows);
    spec.nodes.push_back(y);
    return spec;
}

/// E[q | A = a] under the post-surgery exact joint, with A set to its implied marginal.
inline double experimental_conditional(const SystemSpec &spec, const std::function<double(std::span<const int>)> &q,
                                       int a, const std::string &exposure = "A") {
    const auto joint = exact_joint(apply_do(spec, exposure, implied_marginal(spec, exposure)));
    const auto ja = joint.index_of(exposure);
    double num = 0.0, den = 0.0;
    for (std::size_t k = 0; k < joint.support.size(); ++k)
        if (joint.support[k][ja] == a) {
            num += joint.prob[k] * q(joint.support[k]);
            den += joint.prob[k];
        }
    return num / den;
}

inline std::vector<std::string> covariate_names(const SystemSpec &spec) {
    std::vector<std::string> out;
    for (const auto &n : spec.nodes)
        if (n.kind == NodeKind::covariate) out.push_back(n.name);
    return out;
}

} // namespace causlab::testing
