#pragma once

// Dynamic selection scenarios: gamma-frailty survival cohorts, collider
// enumeration, and discrete-time process/death panels.

#include "causlab/rng.hpp"
#include "causlab/sim.hpp"
#include "causlab/specio.hpp"
#include "causlab/util.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace causlab {

// ---------------------------------------------------------------------------
// Gamma frailty

/// Exposed subjects (V = 1) have hazard Z * lambda0 * r, unexposed Z * lambda0,
/// with Z ~ gamma(mean 1, variance delta_V).
struct FrailtyParams {
    double lambda0 = 1.0;
    double r = 2.0;
    double delta0 = 1.0;
    double delta1 = 1.0;
    double horizon = 2.0;
    double p_exposed = 0.5;

    void check() const {
        if (!(lambda0 > 0.0)) throw Error("lambda0 must be > 0");
        if (!(r > 0.0)) throw Error("r must be > 0");
        if (!(delta0 >= 0.0) || !(delta1 >= 0.0)) throw Error("frailty variances must be >= 0");
        if (!(horizon > 0.0)) throw Error("horizon must be > 0");
        if (!(p_exposed >= 0.0 && p_exposed <= 1.0)) throw Error("p_exposed must lie in [0,1]");
    }
};

/// Population survival (1 + delta Lambda)^(-1/delta) with Lambda = rate * t.
inline double gamma_frailty_survival(double rate, double delta, double t) {
    const double cum = rate * t;
    return delta == 0.0 ? std::exp(-cum) : std::pow(1.0 + delta * cum, -1.0 / delta);
}

/// Ratio of population hazards, r (1 + delta0 Lambda0(t)) / (1 + delta1 r Lambda0(t)).
inline double gamma_frailty_marginal_hr(const FrailtyParams &p, double t) {
    if (!(t >= 0.0)) throw Error("time must be >= 0");
    const double cum0 = p.lambda0 * t;
    return p.r * (1.0 + p.delta0 * cum0) / (1.0 + p.delta1 * p.r * cum0);
}

struct SurvivalData {
    std::vector<int> group;      ///< V
    std::vector<double> time;    ///< event or censoring time
    std::vector<char> event;     ///< 1 = event, 0 = censored at horizon
    std::vector<double> entry;   ///< 0, or t0 after late entry
    std::vector<double> frailty; ///< latent, kept for selection checks
    double horizon = 0.0;

    std::size_t size() const noexcept { return time.size(); }
    bool operator==(const SurvivalData &) const = default;
};

inline SurvivalData simulate_frailty_cohort(const FrailtyParams &p, std::size_t n, std::uint64_t seed,
                                            int workers = 1) {
    p.check();
    if (n == 0) throw Error("cohort size must be at least 1");
    SurvivalData d;
    d.horizon = p.horizon;
    d.group.resize(n);
    d.time.resize(n);
    d.event.resize(n);
    d.entry.assign(n, 0.0);
    d.frailty.resize(n);
    detail::parallel_for(n, workers, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            Rng rng(derive(seed, i));
            const int v = rng.bernoulli(p.p_exposed) ? 1 : 0;
            const double delta = v ? p.delta1 : p.delta0;
            const double z = delta == 0.0 ? 1.0 : rng.gamma(1.0 / delta, delta);
            const double t = rng.exponential(z * p.lambda0 * (v ? p.r : 1.0));
            d.group[i] = v;
            d.frailty[i] = z;
            if (t <= p.horizon) {
                d.time[i] = t;
                d.event[i] = 1;
            } else {
                d.time[i] = p.horizon;
                d.event[i] = 0;
            }
        }
    });
    return d;
}

/// Left truncation at t0: keep subjects still at risk after t0 and set their entry to t0.
inline SurvivalData late_entry(const SurvivalData &d, double t0) {
    if (!(t0 >= 0.0)) throw Error("entry time must be >= 0");
    if (!(t0 < d.horizon)) throw Error("entry time " + detail::format_shortest(t0) + " is not before the horizon " +
                                       detail::format_shortest(d.horizon));
    if (t0 == 0.0) return d;
    SurvivalData out;
    out.horizon = d.horizon;
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (!(d.time[i] > t0)) continue;
        out.group.push_back(d.group[i]);
        out.time.push_back(d.time[i]);
        out.event.push_back(d.event[i]);
        out.entry.push_back(std::max(d.entry[i], t0));
        out.frailty.push_back(d.frailty[i]);
    }
    return out;
}

struct FrailtySummary {
    double mean = 0.0;
    double se = 0.0;
    std::size_t count = 0;
};

/// Mean latent frailty among group members still at risk at time t.
inline FrailtySummary survivor_frailty(const SurvivalData &d, int group, double t) {
    FrailtySummary s;
    double sum = 0.0;
    double sum2 = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i)
        if (d.group[i] == group && d.time[i] > t && d.entry[i] <= t) {
            sum += d.frailty[i];
            sum2 += d.frailty[i] * d.frailty[i];
            ++s.count;
        }
    if (s.count < 2) throw Error("fewer than two survivors at t=" + detail::format_shortest(t));
    const double k = static_cast<double>(s.count);
    s.mean = sum / k;
    s.se = std::sqrt(std::max(0.0, sum2 / k - s.mean * s.mean) / (k - 1.0));
    return s;
}

struct HazardWindow {
    double t_low = 0.0;
    double t_high = 0.0;
    double events0 = 0.0;
    double events1 = 0.0;
    double exposure0 = 0.0; ///< person-time
    double exposure1 = 0.0;
    double hazard0 = 0.0;
    double hazard1 = 0.0;
    double hr = std::numeric_limits<double>::quiet_NaN();
    double se_log = std::numeric_limits<double>::quiet_NaN(); ///< sqrt(1/d0 + 1/d1)
    double se = std::numeric_limits<double>::quiet_NaN();     ///< delta-method SE of hr
    double closed_form = std::numeric_limits<double>::quiet_NaN();
    std::string flag; ///< "", "no-person-time" or "no-events"
};

struct HazardCurve {
    std::vector<HazardWindow> windows;
};

/// Piecewise-constant occurrence/exposure hazards per group on windows (grid[k], grid[k+1]].
inline HazardCurve hr_curve(const SurvivalData &d, const std::vector<double> &grid,
                            const std::optional<FrailtyParams> &closed = std::nullopt) {
    if (d.size() == 0) throw Error("hr_curve: empty survival data");
    if (grid.size() < 2) throw Error("hr_curve: grid needs at least two points");
    for (std::size_t k = 0; k + 1 < grid.size(); ++k)
        if (!(grid[k] < grid[k + 1])) throw Error("hr_curve: grid must be strictly increasing");
    if (grid.front() < 0.0) throw Error("hr_curve: grid starts before time 0");

    const std::size_t w = grid.size() - 1;
    HazardCurve c;
    c.windows.resize(w);
    for (std::size_t k = 0; k < w; ++k) {
        c.windows[k].t_low = grid[k];
        c.windows[k].t_high = grid[k + 1];
    }
    for (std::size_t i = 0; i < d.size(); ++i) {
        const double a = d.entry[i];
        const double b = d.time[i];
        // Windows overlapping (a, b]
        auto k0 = static_cast<std::size_t>(std::upper_bound(grid.begin(), grid.end(), a) - grid.begin());
        k0 = k0 == 0 ? 0 : k0 - 1;
        for (std::size_t k = k0; k < w && grid[k] < b; ++k) {
            const double lo = std::max(a, grid[k]);
            const double hi = std::min(b, grid[k + 1]);
            if (hi <= lo) continue;
            auto &win = c.windows[k];
            (d.group[i] ? win.exposure1 : win.exposure0) += hi - lo;
            if (d.event[i] && b <= grid[k + 1]) (d.group[i] ? win.events1 : win.events0) += 1.0;
        }
    }
    for (auto &win : c.windows) {
        if (closed) win.closed_form = gamma_frailty_marginal_hr(*closed, 0.5 * (win.t_low + win.t_high));
        if (win.exposure0 == 0.0 || win.exposure1 == 0.0) {
            win.flag = "no-person-time";
            win.hazard0 = win.exposure0 > 0.0 ? win.events0 / win.exposure0 : 0.0;
            win.hazard1 = win.exposure1 > 0.0 ? win.events1 / win.exposure1 : 0.0;
            continue;
        }
        win.hazard0 = win.events0 / win.exposure0;
        win.hazard1 = win.events1 / win.exposure1;
        if (win.events0 == 0.0 || win.events1 == 0.0) {
            win.flag = "no-events";
            continue;
        }
        win.hr = win.hazard1 / win.hazard0;
        win.se_log = std::sqrt(1.0 / win.events0 + 1.0 / win.events1);
        win.se = win.hr * win.se_log;
    }
    return c;
}

inline std::vector<double> uniform_grid(double lo, double hi, std::size_t windows) {
    if (windows == 0 || !(lo < hi)) throw Error("uniform_grid: need lo < hi and at least one window");
    std::vector<double> g(windows + 1);
    for (std::size_t k = 0; k <= windows; ++k)
        g[k] = lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(windows);
    return g;
}

/// Weighted least-squares non-increasing fit (pool adjacent violators).
inline std::vector<double> isotonic_decreasing(const std::vector<double> &y, const std::vector<double> &w) {
    if (y.size() != w.size()) throw Error("isotonic_decreasing: size mismatch");
    struct Block {
        double value, weight;
        std::size_t count;
    };
    std::vector<Block> blocks;
    for (std::size_t i = 0; i < y.size(); ++i) {
        blocks.push_back({y[i], w[i], 1});
        while (blocks.size() > 1 && blocks[blocks.size() - 2].value < blocks.back().value) {
            const Block b = blocks.back();
            blocks.pop_back();
            Block &a = blocks.back();
            const double tw = a.weight + b.weight;
            a.value = (a.value * a.weight + b.value * b.weight) / tw;
            a.weight = tw;
            a.count += b.count;
        }
    }
    std::vector<double> out;
    for (const auto &b : blocks) out.insert(out.end(), b.count, b.value);
    return out;
}

inline void write_hazard_csv(const HazardCurve &c, std::ostream &os) {
    os << "t_low,t_high,hazard0,hazard1,hr,se\n";
    for (const auto &w : c.windows)
        os << detail::format_shortest(w.t_low) << ',' << detail::format_shortest(w.t_high) << ','
           << detail::format_shortest(w.hazard0) << ',' << detail::format_shortest(w.hazard1) << ','
           << detail::format_shortest(w.hr) << ',' << detail::format_shortest(w.se) << '\n';
}

// ---------------------------------------------------------------------------
// Collider enumeration

struct ColliderReport {
    std::string v, g, collider;
    int level = 1;
    double p_v_given_g1 = 0.0; ///< P(V=1 | G=1)
    double p_v_given_g0 = 0.0; ///< P(V=1 | G=0)
    double p_v_given_g1_c = 0.0; ///< P(V=1 | G=1, collider=level)
    double p_v_given_g0_c = 0.0; ///< P(V=1 | G=0, collider=level)
    double odds_ratio = 0.0;   ///< marginal V-G odds ratio
    double odds_ratio_c = 0.0; ///< V-G odds ratio given collider=level
    bool marginally_independent = false;
    bool conditionally_independent = false;
};

/// Exact V-G association with and without conditioning on collider = level.
/// V and G must be binary.
inline ColliderReport collider_report(const SystemSpec &spec, const std::string &collider, int level,
                                      const std::string &v, const std::string &g) {
    for (const auto *name : {&collider, &v, &g})
        if (!spec.find(*name)) throw Error("collider_report: no node " + *name);
    for (const auto *name : {&v, &g})
        if (support_size(spec.find(*name)->dist) != 2) throw Error("collider_report: node " + *name + " must be binary");
    const JointTable joint = exact_joint(spec);
    const std::size_t jv = joint.index_of(v);
    const std::size_t jg = joint.index_of(g);
    const std::size_t jc = joint.index_of(collider);

    double m[2][2] = {{0, 0}, {0, 0}}; // [v][g]
    double c[2][2] = {{0, 0}, {0, 0}};
    for (std::size_t k = 0; k < joint.support.size(); ++k) {
        const auto &x = joint.support[k];
        m[x[jv]][x[jg]] += joint.prob[k];
        if (x[jc] == level) c[x[jv]][x[jg]] += joint.prob[k];
    }
    auto cond = [](const double t[2][2], int gv) {
        const double den = t[0][gv] + t[1][gv];
        return den > 0.0 ? t[1][gv] / den : std::numeric_limits<double>::quiet_NaN();
    };
    auto odds = [](const double t[2][2]) {
        const double den = t[1][0] * t[0][1];
        return den > 0.0 ? t[1][1] * t[0][0] / den : std::numeric_limits<double>::infinity();
    };
    auto independent = [](const double t[2][2]) {
        const double total = t[0][0] + t[0][1] + t[1][0] + t[1][1];
        if (total == 0.0) return false;
        for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b) {
                const double pa = (t[a][0] + t[a][1]) / total;
                const double pb = (t[0][b] + t[1][b]) / total;
                if (std::abs(t[a][b] / total - pa * pb) > 1e-12) return false;
            }
        return true;
    };
    if (c[0][0] + c[0][1] + c[1][0] + c[1][1] == 0.0)
        throw Error("collider_report: " + collider + "=" + std::to_string(level) + " has zero probability");

    ColliderReport r;
    r.v = v;
    r.g = g;
    r.collider = collider;
    r.level = level;
    r.p_v_given_g1 = cond(m, 1);
    r.p_v_given_g0 = cond(m, 0);
    r.p_v_given_g1_c = cond(c, 1);
    r.p_v_given_g0_c = cond(c, 0);
    r.odds_ratio = odds(m);
    r.odds_ratio_c = odds(c);
    r.marginally_independent = independent(m);
    r.conditionally_independent = independent(c);
    return r;
}

// ---------------------------------------------------------------------------
// Process / death panels

struct ProcessConfig {
    std::size_t n = 1000;
    double horizon = 1.0;
    double step = 0.01;
    std::uint64_t seed = 1;
    int observe_every = 1; ///< record every k-th step
    bool truncate = true;  ///< simulate death; requires a death node
    int workers = 1;
};

/// Subject trajectories truncated at death. Observation o of subject i lives at
/// index offset[i] + o; its time is step_index * step.
struct PanelData {
    SystemSpec spec;
    double step = 0.0;
    double horizon = 0.0;
    std::uint64_t seed = 0;
    std::vector<std::string> attribute_names;
    std::vector<std::vector<double>> attributes; ///< [attribute][subject]
    std::vector<std::string> process_names;
    std::vector<std::size_t> offset;             ///< size n + 1
    std::vector<std::uint32_t> step_index;       ///< per observation
    std::vector<std::vector<double>> values;     ///< [process][observation]
    std::vector<double> death_time;              ///< +inf when alive at the horizon
    std::string death_name;

    std::size_t size() const noexcept { return death_time.size(); }
    double time_of(std::size_t obs) const noexcept { return static_cast<double>(step_index[obs]) * step; }
    bool operator==(const PanelData &) const = default;

    std::optional<std::size_t> attribute_index(std::string_view name) const {
        for (std::size_t j = 0; j < attribute_names.size(); ++j)
            if (attribute_names[j] == name) return j;
        return std::nullopt;
    }
    std::optional<std::size_t> process_index(std::string_view name) const {
        for (std::size_t j = 0; j < process_names.size(); ++j)
            if (process_names[j] == name) return j;
        return std::nullopt;
    }
};

namespace detail {

// Where a parent's current value is read from during process simulation.
struct Source {
    bool process = false;
    std::size_t index = 0;
};

} // namespace detail

/// Euler scheme: X(t + h) = X(t) + (drift + sum_j b_j x_j(t)) h + noise_sd sqrt(h) N(0,1),
/// with every parent read at the step start (feedback cycles resolve through the
/// previous step). Death in (t, t + h] is drawn from the step-start hazard.
inline PanelData simulate_process_system(const SystemSpec &spec, const ProcessConfig &cfg) {
    if (!(cfg.step > 0.0)) throw Error("step must be > 0");
    if (!(cfg.horizon > 0.0)) throw Error("horizon must be > 0");
    if (cfg.n == 0) throw Error("panel size must be at least 1");
    if (cfg.observe_every < 1) throw Error("observe_every must be >= 1");
    if (auto diags = validate(spec); !diags.empty()) throw SpecError(std::move(diags));
    const double ratio = cfg.horizon / cfg.step;
    const auto steps = static_cast<std::uint32_t>(std::llround(ratio));
    if (steps == 0 || std::abs(ratio - steps) > 1e-9 * std::max(1.0, ratio))
        throw Error("horizon must be a whole number of steps");

    PanelData panel;
    panel.spec = spec;
    panel.step = cfg.step;
    panel.horizon = cfg.horizon;
    panel.seed = cfg.seed;

    std::vector<std::size_t> attr_nodes, proc_nodes;
    std::optional<std::size_t> death_node;
    std::vector<detail::Source> where(spec.nodes.size());
    for (std::size_t i = 0; i < spec.nodes.size(); ++i) {
        const auto &nd = spec.nodes[i];
        if (is_variable_kind(nd.kind)) {
            where[i] = {false, attr_nodes.size()};
            attr_nodes.push_back(i);
            panel.attribute_names.push_back(nd.name);
        } else if (nd.kind == NodeKind::process) {
            where[i] = {true, proc_nodes.size()};
            proc_nodes.push_back(i);
            panel.process_names.push_back(nd.name);
        } else {
            death_node = i;
            panel.death_name = nd.name;
        }
    }
    if (cfg.truncate && !death_node) throw Error("truncation by death requested but the system has no death node");
    const bool with_death = cfg.truncate && death_node.has_value();

    auto parents_of = [&](std::size_t i) {
        std::vector<detail::Source> s;
        for (const auto &p : spec.nodes[i].parents) s.push_back(where[*spec.index_of(p)]);
        return s;
    };
    std::vector<std::vector<std::size_t>> attr_parent_idx;
    for (auto i : attr_nodes) {
        std::vector<std::size_t> idx;
        for (const auto &p : spec.nodes[i].parents) idx.push_back(where[*spec.index_of(p)].index);
        attr_parent_idx.push_back(idx);
    }
    std::vector<std::vector<detail::Source>> proc_parents;
    for (auto i : proc_nodes) proc_parents.push_back(parents_of(i));
    const std::vector<detail::Source> death_parents = death_node ? parents_of(*death_node) : std::vector<detail::Source>{};

    const std::size_t n = cfg.n;
    const std::size_t na = attr_nodes.size();
    const std::size_t np = proc_nodes.size();
    panel.attributes.assign(na, std::vector<double>(n));
    panel.death_time.assign(n, std::numeric_limits<double>::infinity());

    // Per-subject trajectories, flattened afterwards in subject order.
    std::vector<std::vector<std::uint32_t>> obs_steps(n);
    std::vector<std::vector<double>> obs_values(n); // step-major: np values per observation

    const double sqrt_h = std::sqrt(cfg.step);
    detail::parallel_for(n, cfg.workers, [&](std::size_t begin, std::size_t end) {
        std::vector<double> attr(na), cur(np), next(np), pv;
        for (std::size_t i = begin; i < end; ++i) {
            Rng rng(derive(cfg.seed, i));
            for (std::size_t a = 0; a < na; ++a) {
                pv.clear();
                for (auto j : attr_parent_idx[a]) pv.push_back(attr[j]);
                attr[a] = draw(spec.nodes[attr_nodes[a]].dist, pv, rng);
                panel.attributes[a][i] = attr[a];
            }
            for (std::size_t p = 0; p < np; ++p) {
                const auto &par = spec.nodes[proc_nodes[p]].dist.params;
                cur[p] = par[0] + par[1] * rng.normal();
            }
            auto gather = [&](const std::vector<detail::Source> &src) {
                pv.clear();
                for (const auto &s : src) pv.push_back(s.process ? cur[s.index] : attr[s.index]);
            };
            auto &steps_i = obs_steps[i];
            auto &vals_i = obs_values[i];
            for (std::uint32_t k = 0;; ++k) {
                if (k % static_cast<std::uint32_t>(cfg.observe_every) == 0 || k == steps) {
                    steps_i.push_back(k);
                    vals_i.insert(vals_i.end(), cur.begin(), cur.end());
                }
                if (k == steps) break;
                for (std::size_t p = 0; p < np; ++p) {
                    const auto &par = spec.nodes[proc_nodes[p]].dist.params;
                    gather(proc_parents[p]);
                    double drift = par[2];
                    for (std::size_t j = 0; j < pv.size(); ++j) drift += par[3 + j] * pv[j];
                    next[p] = cur[p] + drift * cfg.step + par.back() * sqrt_h * rng.normal();
                }
                if (with_death) {
                    const auto &dd = spec.nodes[*death_node].dist;
                    gather(death_parents);
                    const auto &par = active_params(dd, pv);
                    const double hazard = par[0] * std::exp(detail::linear_term(dd, par, 1, pv));
                    const double e = rng.exponential(hazard);
                    if (e < cfg.step) {
                        panel.death_time[i] = static_cast<double>(k) * cfg.step + e;
                        break;
                    }
                }
                cur.swap(next);
            }
        }
    });

    panel.offset.assign(n + 1, 0);
    for (std::size_t i = 0; i < n; ++i) panel.offset[i + 1] = panel.offset[i] + obs_steps[i].size();
    const std::size_t total = panel.offset[n];
    panel.step_index.resize(total);
    panel.values.assign(np, std::vector<double>(total));
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t base = panel.offset[i];
        for (std::size_t o = 0; o < obs_steps[i].size(); ++o) {
            panel.step_index[base + o] = obs_steps[i][o];
            for (std::size_t p = 0; p < np; ++p) panel.values[p][base + o] = obs_values[i][o * np + p];
        }
        std::vector<std::uint32_t>().swap(obs_steps[i]);
        std::vector<double>().swap(obs_values[i]);
    }
    return panel;
}

/// Long format: subject,time,node,value. Attributes appear once at time 0.
inline void write_panel_csv(const PanelData &p, std::ostream &os) {
    os << "subject,time,node,value\n";
    for (std::size_t i = 0; i < p.size(); ++i) {
        for (std::size_t a = 0; a < p.attribute_names.size(); ++a)
            os << i << ",0," << p.attribute_names[a] << ',' << detail::format_shortest(p.attributes[a][i]) << '\n';
        for (std::size_t o = p.offset[i]; o < p.offset[i + 1]; ++o) {
            const std::string t = detail::format_shortest(p.time_of(o));
            for (std::size_t k = 0; k < p.process_names.size(); ++k)
                os << i << ',' << t << ',' << p.process_names[k] << ',' << detail::format_shortest(p.values[k][o])
                   << '\n';
        }
    }
}

/// subject,death_time,censored; censored subjects carry the horizon.
inline void write_events_csv(const PanelData &p, std::ostream &os) {
    os << "subject,death_time,censored\n";
    for (std::size_t i = 0; i < p.size(); ++i) {
        const bool censored = !std::isfinite(p.death_time[i]);
        os << i << ',' << detail::format_shortest(censored ? p.horizon : p.death_time[i]) << ','
           << (censored ? 1 : 0) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Regression helpers

struct Coefficients {
    std::vector<double> estimate;
    std::vector<double> se;
};

namespace detail {

/// Poisson regression log E[d] = log(exposure) + x'b by Newton. `visit(emit)`
/// must call emit(x, d, exposure) once per row, identically on every call.
template <class Visit>
Coefficients poisson_fit(std::size_t p, Visit &&visit) {
    const auto ip = static_cast<Eigen::Index>(p);
    double events = 0.0, time = 0.0;
    visit([&](std::span<const double>, double d, double t) {
        events += d;
        time += t;
    });
    if (events == 0.0) throw Error("Poisson regression: no events");
    if (time <= 0.0) throw Error("Poisson regression: no person-time");
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(ip);
    beta(0) = std::log(events / time);
    Eigen::MatrixXd info(ip, ip);
    Eigen::VectorXd score(ip);
    Eigen::VectorXd xv(ip);
    auto evaluate = [&](const Eigen::VectorXd &b, bool with_info) {
        score.setZero();
        if (with_info) info.setZero();
        double ll = 0.0;
        visit([&](std::span<const double> x, double d, double t) {
            for (Eigen::Index j = 0; j < ip; ++j) xv(j) = x[static_cast<std::size_t>(j)];
            const double eta = xv.dot(b);
            const double mu = t * std::exp(eta);
            ll += d * eta - mu;
            score.noalias() += (d - mu) * xv;
            if (with_info) info.selfadjointView<Eigen::Lower>().rankUpdate(xv, mu);
        });
        return ll;
    };
    double ll = evaluate(beta, true);
    for (int it = 0; it < 100; ++it) {
        const Eigen::MatrixXd full = info.selfadjointView<Eigen::Lower>();
        Eigen::FullPivLU<Eigen::MatrixXd> lu(full);
        if (!lu.isInvertible()) throw Error("Poisson regression: singular design");
        const Eigen::VectorXd step = lu.solve(score);
        double t = 1.0;
        Eigen::VectorXd next = beta + step;
        double ll_next = evaluate(next, false);
        while (!(ll_next >= ll) && t > 0x1p-20) {
            t *= 0.5;
            next = beta + t * step;
            ll_next = evaluate(next, false);
        }
        const double change = (next - beta).lpNorm<Eigen::Infinity>();
        beta = next;
        ll = evaluate(beta, true);
        if (change < 1e-10) break;
    }
    const Eigen::MatrixXd full = info.selfadjointView<Eigen::Lower>();
    const Eigen::MatrixXd cov = full.inverse();
    Coefficients c;
    for (Eigen::Index j = 0; j < ip; ++j) {
        c.estimate.push_back(beta(j));
        c.se.push_back(std::sqrt(cov(j, j)));
    }
    return c;
}

/// Ordinary least squares with classical standard errors; rows emitted by `visit`.
template <class Visit>
Coefficients ols_fit(std::size_t p, Visit &&visit) {
    const auto ip = static_cast<Eigen::Index>(p);
    Eigen::MatrixXd xtx = Eigen::MatrixXd::Zero(ip, ip);
    Eigen::VectorXd xty = Eigen::VectorXd::Zero(ip);
    Eigen::VectorXd xv(ip);
    double yy = 0.0;
    std::size_t rows = 0;
    visit([&](std::span<const double> x, double y) {
        for (Eigen::Index j = 0; j < ip; ++j) xv(j) = x[static_cast<std::size_t>(j)];
        xtx.selfadjointView<Eigen::Lower>().rankUpdate(xv);
        xty.noalias() += y * xv;
        yy += y * y;
        ++rows;
    });
    if (rows <= p) throw Error("least squares: too few rows");
    const Eigen::MatrixXd full = xtx.selfadjointView<Eigen::Lower>();
    Eigen::FullPivLU<Eigen::MatrixXd> lu(full);
    if (!lu.isInvertible()) throw Error("least squares: singular design");
    const Eigen::VectorXd b = lu.solve(xty);
    const double rss = std::max(0.0, yy - 2.0 * b.dot(xty) + b.dot(full * b));
    const double sigma2 = rss / static_cast<double>(rows - p);
    const Eigen::MatrixXd cov = lu.inverse() * sigma2;
    Coefficients c;
    for (Eigen::Index j = 0; j < ip; ++j) {
        c.estimate.push_back(b(j));
        c.se.push_back(std::sqrt(cov(j, j)));
    }
    return c;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Survivor analyses

struct SurvivorAnalysis {
    std::string exposure;            ///< attribute or process
    std::vector<std::string> adjust; ///< attributes or processes
    double landmark = 0.0;
    std::optional<double> threshold; ///< high/low split; median at the landmark by default
};

struct SurvivorBiasReport {
    std::size_t at_risk = 0; ///< alive at the landmark
    double events = 0.0;     ///< deaths after the landmark
    double threshold = 0.0;
    double naive = 0.0;       ///< log-hazard per unit exposure, exposure fixed at the landmark, unadjusted
    double naive_se = 0.0;
    double naive_log_hr = 0.0; ///< high vs low exposure at the landmark
    double naive_log_hr_se = 0.0;
    double adjusted = 0.0;     ///< time-updated exposure and adjusters
    double adjusted_se = 0.0;
    double truth = 0.0;        ///< generating death-hazard coefficient
    bool sign_reversal = false;
};

namespace detail {

inline double generating_coefficient(const PanelData &p, const std::string &child, const std::string &parent) {
    const auto *node = p.spec.find(child);
    if (!node) throw Error("no node " + child);
    if (node->dist.is_table()) throw Error("node " + child + " is tabulated; no single generating coefficient");
    const std::size_t offset = node->kind == NodeKind::process ? 3 : 1;
    for (std::size_t j = 0; j < node->parents.size(); ++j)
        if (node->parents[j] == parent) return node->dist.params[offset + j];
    return 0.0;
}

// Reads a named attribute or process value at observation `obs` of subject `i`.
struct Reader {
    bool process = false;
    std::size_t index = 0;

    static Reader of(const PanelData &p, const std::string &name) {
        if (auto a = p.attribute_index(name)) return {false, *a};
        if (auto k = p.process_index(name)) return {true, *k};
        throw Error("panel has no node " + name);
    }
    double operator()(const PanelData &p, std::size_t i, std::size_t obs) const {
        return process ? p.values[index][obs] : p.attributes[index][i];
    }
};

// Last observation at or before t for a subject alive at t.
inline std::optional<std::size_t> observation_at(const PanelData &p, std::size_t i, double t) {
    if (!(p.death_time[i] > t)) return std::nullopt;
    std::optional<std::size_t> best;
    for (std::size_t o = p.offset[i]; o < p.offset[i + 1] && p.time_of(o) <= t + 1e-12; ++o) best = o;
    return best;
}

} // namespace detail

inline SurvivorBiasReport survivor_bias_report(const PanelData &p, const SurvivorAnalysis &a) {
    if (p.death_name.empty()) throw Error("survivor analysis needs a death node");
    if (!(a.landmark >= 0.0 && a.landmark < p.horizon)) throw Error("landmark must lie in [0, horizon)");
    const auto ex = detail::Reader::of(p, a.exposure);
    std::vector<detail::Reader> adj;
    for (const auto &nm : a.adjust) adj.push_back(detail::Reader::of(p, nm));

    SurvivorBiasReport r;
    r.truth = detail::generating_coefficient(p, p.death_name, a.exposure);

    // Landmark cohort
    std::vector<std::size_t> ids;
    std::vector<double> x0;
    for (std::size_t i = 0; i < p.size(); ++i)
        if (auto o = detail::observation_at(p, i, a.landmark)) {
            ids.push_back(i);
            x0.push_back(ex(p, i, *o));
        }
    r.at_risk = ids.size();
    if (ids.empty()) throw Error("nobody is alive at the landmark");
    auto follow = [&](std::size_t i) {
        const double end = std::min(p.death_time[i], p.horizon);
        return std::pair<double, double>{std::isfinite(p.death_time[i]) ? 1.0 : 0.0, end - a.landmark};
    };
    if (a.threshold) {
        r.threshold = *a.threshold;
    } else {
        std::vector<double> s = x0;
        std::nth_element(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(s.size() / 2), s.end());
        r.threshold = s[s.size() / 2];
    }

    const auto naive = detail::poisson_fit(2, [&](auto &&emit) {
        double x[2] = {1.0, 0.0};
        for (std::size_t k = 0; k < ids.size(); ++k) {
            const auto [d, t] = follow(ids[k]);
            x[1] = x0[k];
            emit(std::span<const double>(x, 2), d, t);
        }
    });
    r.naive = naive.estimate[1];
    r.naive_se = naive.se[1];

    double d_hi = 0, t_hi = 0, d_lo = 0, t_lo = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
        const auto [d, t] = follow(ids[k]);
        if (x0[k] > r.threshold) {
            d_hi += d;
            t_hi += t;
        } else {
            d_lo += d;
            t_lo += t;
        }
        r.events += d;
    }
    if (d_hi > 0 && d_lo > 0) {
        r.naive_log_hr = std::log((d_hi / t_hi) / (d_lo / t_lo));
        r.naive_log_hr_se = std::sqrt(1.0 / d_hi + 1.0 / d_lo);
    } else {
        r.naive_log_hr = r.naive_log_hr_se = std::numeric_limits<double>::quiet_NaN();
    }

    // Person-period rows from the landmark on, covariates at each interval start.
    const std::size_t dim = 2 + adj.size();
    const auto adjusted = detail::poisson_fit(dim, [&](auto &&emit) {
        std::vector<double> x(dim, 1.0);
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double death = p.death_time[i];
            for (std::size_t o = p.offset[i]; o < p.offset[i + 1]; ++o) {
                const double t0 = p.time_of(o);
                if (t0 + 1e-12 < a.landmark || t0 >= p.horizon) continue;
                const double t1 = std::min({o + 1 < p.offset[i + 1] ? p.time_of(o + 1) : p.horizon, death, p.horizon});
                if (t1 <= t0) continue;
                x[1] = ex(p, i, o);
                for (std::size_t j = 0; j < adj.size(); ++j) x[2 + j] = adj[j](p, i, o);
                const bool dies = std::isfinite(death) && death <= t1;
                emit(std::span<const double>(x), dies ? 1.0 : 0.0, t1 - t0);
            }
        }
    });
    r.adjusted = adjusted.estimate[1];
    r.adjusted_se = adjusted.se[1];
    auto sign = [](double v) { return (v > 0) - (v < 0); };
    r.sign_reversal = sign(r.truth) != 0 && sign(r.naive) == -sign(r.truth) && sign(r.adjusted) == sign(r.truth);
    return r;
}

struct TruncationReport {
    double truth = 0.0;        ///< generating drift coefficient of the regressor
    double increment = 0.0;    ///< slope of (Y(t+h) - Y(t)) / h on the regressor among the alive
    double increment_se = 0.0;
    double cross = 0.0;        ///< survivor cross-section slope of Y(T) on the regressor, divided by T
    double cross_se = 0.0;
    std::size_t survivors = 0;
    std::size_t increments = 0;
    double bias_z = 0.0; ///< (truth - cross) / cross_se
};

/// Drift recovery for `process` from consecutive observations among the alive,
/// against the end-of-horizon survivor cross-section. The increment regression
/// uses every drift parent of the process; the cross-section uses the regressor alone.
inline TruncationReport truncation_report(const PanelData &p, const std::string &process, const std::string &regressor) {
    const auto *node = p.spec.find(process);
    if (!node || node->kind != NodeKind::process) throw Error("no process node " + process);
    const auto y = detail::Reader::of(p, process);
    std::vector<detail::Reader> xs;
    std::optional<std::size_t> target;
    for (const auto &par : node->parents) {
        if (par == regressor) target = xs.size();
        xs.push_back(detail::Reader::of(p, par));
    }
    if (!target) throw Error(regressor + " does not enter the drift of " + process);
    const auto xr = detail::Reader::of(p, regressor);

    TruncationReport r;
    r.truth = detail::generating_coefficient(p, process, regressor);
    const std::size_t dim = 1 + xs.size();
    const auto inc = detail::ols_fit(dim, [&](auto &&emit) {
        std::vector<double> x(dim, 1.0);
        for (std::size_t i = 0; i < p.size(); ++i)
            for (std::size_t o = p.offset[i]; o + 1 < p.offset[i + 1]; ++o) {
                const double h = p.time_of(o + 1) - p.time_of(o);
                for (std::size_t j = 0; j < xs.size(); ++j) x[1 + j] = xs[j](p, i, o);
                emit(std::span<const double>(x), (y(p, i, o + 1) - y(p, i, o)) / h);
            }
    });
    for (std::size_t i = 0; i < p.size(); ++i)
        r.increments += p.offset[i + 1] - p.offset[i] - (p.offset[i + 1] > p.offset[i] ? 1 : 0);
    r.increment = inc.estimate[1 + *target];
    r.increment_se = inc.se[1 + *target];

    const auto cross = detail::ols_fit(2, [&](auto &&emit) {
        double x[2] = {1.0, 0.0};
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (std::isfinite(p.death_time[i]) || p.offset[i + 1] == p.offset[i]) continue;
            const std::size_t last = p.offset[i + 1] - 1;
            if (std::abs(p.time_of(last) - p.horizon) > 1e-9) continue;
            x[1] = xr(p, i, last);
            emit(std::span<const double>(x, 2), y(p, i, last));
        }
    });
    for (std::size_t i = 0; i < p.size(); ++i) r.survivors += std::isfinite(p.death_time[i]) ? 0 : 1;
    r.cross = cross.estimate[1] / p.horizon;
    r.cross_se = cross.se[1] / p.horizon;
    r.bias_z = (r.truth - r.cross) / r.cross_se;
    return r;
}

} // namespace causlab
