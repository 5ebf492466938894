#pragma once

// Scenario runner: built-in registry, key=value config files, and artifact
// emission (estimates JSON/CSV, plot-ready CSV, reports, run manifest).

#include "causlab/dynamics.hpp"
#include "causlab/estimators.hpp"
#include "causlab/measures.hpp"
#include "causlab/sim.hpp"
#include "causlab/specio.hpp"
#include "causlab/util.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace causlab {

inline constexpr std::string_view kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Built-in systems

namespace builtin {

inline constexpr std::string_view kConfoundingS1 = R"(system "S1"
node C kind=covariate dist=bernoulli(0.5)
node A kind=exposure given=(C) dist=table{0: bernoulli(0.3); 1: bernoulli(0.7)}
node Y kind=outcome given=(A, C) dist=table{0,0: bernoulli(0.2); 0,1: bernoulli(0.5); 1,0: bernoulli(0.4); 1,1: bernoulli(0.8)}
)";

inline constexpr std::string_view kCollider = R"(system "collider-demo"
node V kind=exposure dist=bernoulli(0.5)
node G kind=covariate dist=bernoulli(0.5)
node Y kind=outcome given=(V, G) dist=table{0,0: bernoulli(0.1); 0,1: bernoulli(0.5); 1,0: bernoulli(0.5); 1,1: bernoulli(0.9)}
)";

inline constexpr std::string_view kObesityFeedback = R"(system "obesity-feedback"
node G kind=covariate dist=bernoulli(0.5)
node Y kind=process given=(G) dist=linear-gaussian-step(0, 0.5, 0.1, 0.3, 0.3)
node V kind=process given=(Y) dist=linear-gaussian-step(0, 1, 0, -1.5, 0.2)
node D kind=death given=(Y, V) dist=exponential-hazard(0.02, 2, 0.2)
)";

inline constexpr std::string_view kTruncationByDeath = R"(system "truncation-by-death"
node V kind=exposure dist=bernoulli(0.5)
node Y kind=process given=(V) dist=linear-gaussian-step(0, 0.5, 0, 1, 0.5)
node D kind=death given=(Y) dist=exponential-hazard(0.1, 1.5)
)";

inline FrailtyParams shared_frailty() { return {1.0, 2.0, 1.0, 1.0, 2.0, 0.5}; }
inline FrailtyParams exposed_only_frailty() { return {1.0, 2.0, 0.0, 2.0, 2.0, 0.5}; }

inline constexpr double kLateEntry = 0.5;

} // namespace builtin

struct ScenarioInfo {
    std::string id;
    std::string topic;
    std::string description;
    std::size_t default_n = 0;
};

inline const std::vector<ScenarioInfo> &scenario_registry() {
    static const std::vector<ScenarioInfo> registry{
        {"confounding-s1", "confounding",
         "binary confounder: naive, IPW, g-formula and WGEE means against exact enumeration", 200000},
        {"collider", "collider", "independent V and G become dependent given their common effect Y", 200000},
        {"frailty-decreasing", "frailty",
         "shared gamma frailty bends a constant conditional hazard ratio of 2 toward 1", 500000},
        {"frailty-crossing", "frailty", "frailty in the exposed only drives the marginal hazard ratio below 1",
         500000},
        {"late-entry-reversal", "frailty",
         "entry at t0=0.5 makes a harmful conditional effect look protective", 500000},
        {"obesity-feedback", "feedback",
         "severity lowers weight and raises mortality; survivors show a protective weight effect", 200000},
        {"truncation-by-death", "truncation",
         "increments among the living recover the drift; the survivor cross-section is biased", 200000},
    };
    return registry;
}

inline const ScenarioInfo *find_scenario(std::string_view id) {
    for (const auto &s : scenario_registry())
        if (s.id == id) return &s;
    return nullptr;
}

inline void list_scenarios(std::ostream &os, bool json) {
    if (json) {
        auto arr = nlohmann::ordered_json::array();
        for (const auto &s : scenario_registry())
            arr.push_back({{"id", s.id}, {"topic", s.topic}, {"description", s.description}, {"default_n", s.default_n}});
        os << arr.dump(2) << '\n';
        return;
    }
    for (const auto &s : scenario_registry()) {
        std::string id = s.id;
        id.resize(22, ' ');
        std::string topic = "[" + s.topic + "]";
        topic.resize(14, ' ');
        os << id << topic << s.description << '\n';
    }
}

// ---------------------------------------------------------------------------
// Configuration

struct ScenarioConfig {
    std::string scenario;  ///< built-in id, or empty for a spec-only run
    std::string spec_path; ///< replaces the built-in system where the scenario has one
    std::optional<std::size_t> n;
    std::uint64_t seed = 7;
    std::vector<std::string> estimators; ///< empty selects the defaults
    std::string out;
    std::optional<double> weight_cap;
    int workers = 1;
    std::optional<std::size_t> bootstrap;
    bool export_data = false;
    std::optional<double> horizon;
    std::optional<double> step;

    void check() const {
        if (scenario.empty() && spec_path.empty()) throw Error("config: either scenario or spec is required");
        if (!scenario.empty() && !find_scenario(scenario)) throw Error("config: unknown scenario '" + scenario + "'");
        if (n && *n < 1) throw Error("config: n must be >= 1");
        if (out.empty()) throw Error("config: output directory is required");
        if (weight_cap && !(*weight_cap > 0.0)) throw Error("config: weight_cap must be > 0");
        if (workers < 1) throw Error("config: workers must be >= 1");
        if (horizon && !(*horizon > 0.0)) throw Error("config: horizon must be > 0");
        if (step && !(*step > 0.0)) throw Error("config: step must be > 0");
    }
};

/// $CAUSLAB_OUT/<scenario>, or causlab-out/<scenario> when the variable is unset or empty.
inline std::string default_output_dir(const std::string &scenario) {
    const char *root = std::getenv("CAUSLAB_OUT");
    const std::string base = root && *root ? root : "causlab-out";
    return (std::filesystem::path(base) / (scenario.empty() ? "custom" : scenario)).string();
}

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(std::string_view s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        const auto comma = s.find(',', start);
        const auto item = trim(s.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
        if (!item.empty()) out.push_back(item);
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

template <class T>
T parse_number(const std::string &key, const std::string &value, std::size_t line) {
    T v{};
    const auto *end = value.data() + value.size();
    auto res = std::from_chars(value.data(), end, v);
    if (res.ec != std::errc() || res.ptr != end)
        throw Error("config line " + std::to_string(line) + ": bad value for " + key + ": '" + value + "'");
    return v;
}

inline bool parse_bool(const std::string &key, const std::string &value, std::size_t line) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw Error("config line " + std::to_string(line) + ": bad value for " + key + ": '" + value + "'");
}

} // namespace detail

/// key=value lines; '#' starts a comment. Keys not given keep `base` values.
inline ScenarioConfig parse_config(std::string_view text, ScenarioConfig base = {}) {
    std::size_t line_no = 0;
    std::set<std::string> seen;
    std::istringstream in{std::string(text)};
    for (std::string raw; std::getline(in, raw);) {
        ++line_no;
        if (const auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
        const std::string line = detail::trim(raw);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw Error("config line " + std::to_string(line_no) + ": expected key=value");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (!seen.insert(key).second) throw Error("config line " + std::to_string(line_no) + ": duplicate key " + key);
        if (value.empty()) throw Error("config line " + std::to_string(line_no) + ": empty value for " + key);
        if (key == "scenario") base.scenario = value;
        else if (key == "spec") base.spec_path = value;
        else if (key == "n") base.n = detail::parse_number<std::size_t>(key, value, line_no);
        else if (key == "seed") base.seed = detail::parse_number<std::uint64_t>(key, value, line_no);
        else if (key == "estimators") base.estimators = detail::split_list(value);
        else if (key == "out") base.out = value;
        else if (key == "weight_cap") base.weight_cap = detail::parse_number<double>(key, value, line_no);
        else if (key == "workers") base.workers = detail::parse_number<int>(key, value, line_no);
        else if (key == "bootstrap") base.bootstrap = detail::parse_number<std::size_t>(key, value, line_no);
        else if (key == "export") base.export_data = detail::parse_bool(key, value, line_no);
        else if (key == "horizon") base.horizon = detail::parse_number<double>(key, value, line_no);
        else if (key == "step") base.step = detail::parse_number<double>(key, value, line_no);
        else throw Error("config line " + std::to_string(line_no) + ": unknown key " + key);
    }
    return base;
}

inline ScenarioConfig load_config_file(const std::string &path, ScenarioConfig base = {}) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), std::move(base));
}

// ---------------------------------------------------------------------------
// Results

struct EstimateRow {
    std::string method;
    std::optional<double> level;
    double estimate = 0.0;
    std::optional<double> se;
    std::optional<double> ci_low;
    std::optional<double> ci_high;
};

struct RunSummary {
    std::string scenario;
    std::filesystem::path out;
    std::vector<std::string> files;
    std::vector<std::string> warnings;
};

namespace detail {

inline constexpr double kZ975 = 1.959963984540054;

inline EstimateRow wald_row(std::string method, std::optional<double> level, double est, double se) {
    return {std::move(method), level, est, se, est - kZ975 * se, est + kZ975 * se};
}

inline std::string csv_cell(const std::optional<double> &v) { return v ? format_shortest(*v) : "NA"; }

inline nlohmann::ordered_json json_number(const std::optional<double> &v) {
    if (!v || !std::isfinite(*v)) return nullptr;
    return *v;
}

inline nlohmann::ordered_json json_number(double v) { return json_number(std::optional<double>(v)); }

class ArtifactWriter {
  public:
    explicit ArtifactWriter(std::filesystem::path dir) : dir_(std::move(dir)) {
        std::error_code ec;
        std::filesystem::create_directories(dir_, ec);
        if (ec || !std::filesystem::is_directory(dir_))
            throw Error("cannot create output directory " + dir_.string());
    }

    void write(const std::string &name, const std::string &content) {
        const auto path = dir_ / name;
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        if (!os) throw Error("cannot write " + path.string());
        os << content;
        if (!os) throw Error("write failed for " + path.string());
        files_.push_back({name, hex64(fnv1a(content))});
    }

    const std::vector<std::pair<std::string, std::string>> &files() const { return files_; }
    const std::filesystem::path &dir() const { return dir_; }

  private:
    std::filesystem::path dir_;
    std::vector<std::pair<std::string, std::string>> files_;
};

inline std::string estimates_csv(const std::vector<EstimateRow> &rows) {
    std::string s = "method,level,estimate,se,ci_low,ci_high\n";
    for (const auto &r : rows)
        s += r.method + ',' + csv_cell(r.level) + ',' + format_shortest(r.estimate) + ',' + csv_cell(r.se) + ',' +
             csv_cell(r.ci_low) + ',' + csv_cell(r.ci_high) + '\n';
    return s;
}

inline std::string estimates_json(const std::string &scenario, const std::vector<EstimateRow> &rows) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto &r : rows)
        arr.push_back({{"method", r.method},
                       {"level", json_number(r.level)},
                       {"estimate", json_number(r.estimate)},
                       {"se", json_number(r.se)},
                       {"ci_low", json_number(r.ci_low)},
                       {"ci_high", json_number(r.ci_high)}});
    nlohmann::ordered_json j{{"scenario", scenario}, {"estimates", arr}};
    return j.dump(2) + '\n';
}

inline std::string dataset_csv(const Dataset &d) {
    std::string s;
    for (std::size_t c = 0; c < d.names.size(); ++c) s += (c ? "," : "") + d.names[c];
    s += '\n';
    for (std::size_t i = 0; i < d.n; ++i) {
        for (std::size_t c = 0; c < d.columns.size(); ++c) s += (c ? "," : "") + format_shortest(d.columns[c][i]);
        s += '\n';
    }
    return s;
}

inline std::string cohort_csv(const SurvivalData &d) {
    std::string s = "subject,group,entry,time,event\n";
    for (std::size_t i = 0; i < d.size(); ++i)
        s += std::to_string(i) + ',' + std::to_string(d.group[i]) + ',' + format_shortest(d.entry[i]) + ',' +
             format_shortest(d.time[i]) + ',' + std::to_string(static_cast<int>(d.event[i])) + '\n';
    return s;
}

inline bool all_discrete(const SystemSpec &spec) {
    for (const auto &n : spec.nodes)
        if (!is_variable_kind(n.kind) || !is_discrete_family(n.dist.family)) return false;
    return true;
}

inline bool has_process(const SystemSpec &spec) {
    for (const auto &n : spec.nodes)
        if (!is_variable_kind(n.kind)) return true;
    return false;
}

inline const NodeSpec &unique_of_kind(const SystemSpec &spec, NodeKind kind) {
    const NodeSpec *found = nullptr;
    for (const auto &n : spec.nodes)
        if (n.kind == kind) {
            if (found) throw Error("system has more than one " + std::string(to_string(kind)) + " node");
            found = &n;
        }
    if (!found) throw Error("system has no " + std::string(to_string(kind)) + " node");
    return *found;
}

inline std::string hazard_csv_text(const HazardCurve &c) {
    std::ostringstream os;
    write_hazard_csv(c, os);
    return os.str();
}

/// Working state shared by the scenario handlers.
struct RunContext {
    const ScenarioConfig &cfg;
    std::string scenario;
    std::optional<SystemSpec> spec;
    std::size_t n = 0;
    ArtifactWriter writer;
    std::vector<EstimateRow> rows;
    nlohmann::ordered_json parameters = nlohmann::ordered_json::object();
    std::vector<std::string> warnings;
};

inline void reject_estimator_options(const RunContext &ctx) {
    if (!ctx.cfg.estimators.empty() || ctx.cfg.weight_cap || ctx.cfg.bootstrap)
        throw Error("estimators, weight cap and bootstrap apply only to exposure/outcome systems");
}

inline void reject_process_options(const RunContext &ctx) {
    if (ctx.cfg.horizon || ctx.cfg.step) throw Error("horizon and step apply only to survival and process scenarios");
}

// Exposure/outcome systems: naive, IPW, g-formula and WGEE marginal means.
inline void run_effects(RunContext &ctx) {
    reject_process_options(ctx);
    const SystemSpec &spec = *ctx.spec;
    const std::string exposure = exposure_node(spec).name;
    const std::string outcome = unique_of_kind(spec, NodeKind::outcome).name;
    std::vector<std::string> covariates;
    bool discrete_covariates = true;
    for (const auto &node : spec.nodes)
        if (node.kind == NodeKind::covariate) {
            covariates.push_back(node.name);
            discrete_covariates = discrete_covariates && is_discrete_family(node.dist.family);
        }

    std::vector<std::string> methods = ctx.cfg.estimators;
    if (methods.empty()) {
        methods = {"naive", "ipw"};
        if (discrete_covariates) methods.push_back("g-formula");
        methods.push_back("wgee");
    }
    for (const auto &m : methods)
        if (m != "naive" && m != "ipw" && m != "g-formula" && m != "wgee")
            throw Error("unknown estimator '" + m + "' (expected naive, ipw, g-formula, wgee)");

    const Dataset data = sample(spec, ctx.n, ctx.cfg.seed, ctx.cfg.workers);
    std::vector<double> levels = data.column(exposure);
    std::sort(levels.begin(), levels.end());
    levels.erase(std::unique(levels.begin(), levels.end()), levels.end());

    WeightPlan plan;
    plan.exposure = exposure;
    plan.covariates = covariates;
    plan.form = discrete_covariates ? PropensityForm::frequency_table : PropensityForm::logistic_linear;
    plan.cap = ctx.cfg.weight_cap;

    const std::size_t replicates = ctx.cfg.bootstrap.value_or(200);
    const std::uint64_t boot_seed = derive(ctx.cfg.seed, 0xB0075742ULL);
    nlohmann::ordered_json contrasts = nlohmann::ordered_json::object();
    for (const auto &m : methods) {
        Estimator est = m == "naive"       ? naive_estimator(exposure, outcome, levels)
                        : m == "ipw"       ? ipw_estimator(plan, outcome, levels)
                        : m == "g-formula" ? g_formula_estimator(exposure, outcome, covariates, levels)
                                           : wgee_estimator(plan, outcome, levels);
        std::vector<double> point;
        if (replicates > 0) {
            const auto b = bootstrap_ci(est, data, replicates, boot_seed, ctx.cfg.workers);
            if (b.failures > 0)
                ctx.warnings.push_back(m + ": " + std::to_string(b.failures) + " bootstrap replicates failed");
            for (std::size_t k = 0; k < levels.size(); ++k)
                ctx.rows.push_back({m, levels[k], b.estimate[k], b.se[k], b.ci_low[k], b.ci_high[k]});
            point = b.estimate;
        } else {
            point = est(data);
            for (std::size_t k = 0; k < levels.size(); ++k) ctx.rows.push_back({m, levels[k], point[k], {}, {}, {}});
        }
        if (levels.size() >= 2) {
            EffectEstimate e{m, levels, point, {}};
            const double hi = levels.back(), lo = levels.front();
            nlohmann::ordered_json c{{"level1", hi}, {"level0", lo}, {"difference", json_number(e.mean_at(hi) - e.mean_at(lo))}};
            c["ratio"] = e.mean_at(lo) == 0.0 ? nlohmann::ordered_json(nullptr) : json_number(contrast(e, hi, lo).ratio);
            contrasts[m] = c;
        }
    }

    nlohmann::ordered_json report{{"exposure", exposure}, {"outcome", outcome}, {"covariates", covariates}};
    if (all_discrete(spec)) {
        const auto joint = exact_joint(spec);
        const auto law = exact_covariate_law(spec, covariates);
        const auto reg = exact_outcome_regression(joint, outcome, exposure, covariates);
        nlohmann::ordered_json oracle = nlohmann::ordered_json::array();
        for (double a : levels) {
            const double v = g_formula(reg, law, a);
            ctx.rows.push_back({"exact", a, v, {}, {}, {}});
            oracle.push_back({{"level", a}, {"mean", v}});
        }
        report["exact"] = oracle;
        report["exact_weight_mean"] = exact_weight_mean(spec, exposure);
    }
    if (std::find(methods.begin(), methods.end(), "ipw") != methods.end() ||
        std::find(methods.begin(), methods.end(), "wgee") != methods.end()) {
        const auto d = weight_diagnostics(plan.make(data));
        report["weights"] = {{"form", discrete_covariates ? "frequency-table" : "logistic"},
                             {"cap", json_number(ctx.cfg.weight_cap)},
                             {"mean_ws", d.mean_ws},
                             {"min_ws", d.min_ws},
                             {"max_ws", d.max_ws},
                             {"ess", d.ess}};
    }
    report["contrasts"] = contrasts;
    ctx.parameters["bootstrap"] = replicates;
    ctx.parameters["estimators"] = methods;
    ctx.parameters["weight_cap"] = json_number(ctx.cfg.weight_cap);
    ctx.writer.write("report.json", report.dump(2) + '\n');
    if (ctx.cfg.export_data) ctx.writer.write("data.csv", dataset_csv(data));
}

inline void run_collider(RunContext &ctx) {
    reject_estimator_options(ctx);
    reject_process_options(ctx);
    const SystemSpec &spec = *ctx.spec;
    const std::string v = exposure_node(spec).name;
    const std::string y = unique_of_kind(spec, NodeKind::outcome).name;
    std::string g;
    for (const auto &node : spec.nodes)
        if (node.kind == NodeKind::covariate) {
            if (!g.empty()) throw Error("collider scenario needs exactly one covariate node");
            g = node.name;
        }
    if (g.empty()) throw Error("collider scenario needs exactly one covariate node");
    const auto r = collider_report(spec, y, 1, v, g);

    const Dataset data = sample(spec, ctx.n, ctx.cfg.seed, ctx.cfg.workers);
    const auto &cv = data.column(v), &cg = data.column(g), &cy = data.column(y);
    for (int gl : {0, 1}) {
        ctx.rows.push_back({"exact_marginal", gl, gl ? r.p_v_given_g1 : r.p_v_given_g0, {}, {}, {}});
        ctx.rows.push_back({"exact_given_collider", gl, gl ? r.p_v_given_g1_c : r.p_v_given_g0_c, {}, {}, {}});
    }
    for (bool conditioned : {false, true})
        for (int gl : {0, 1}) {
            double hits = 0.0, k = 0.0;
            for (std::size_t i = 0; i < data.n; ++i)
                if (cg[i] == gl && (!conditioned || cy[i] == 1.0)) {
                    hits += cv[i];
                    k += 1.0;
                }
            if (k == 0.0) {
                ctx.warnings.push_back("no sampled records with " + g + "=" + std::to_string(gl) +
                                       (conditioned ? " and " + y + "=1" : ""));
                continue;
            }
            const double p = hits / k;
            ctx.rows.push_back(wald_row(conditioned ? "sampled_given_collider" : "sampled_marginal", gl, p,
                                        std::sqrt(p * (1.0 - p) / k)));
        }
    nlohmann::ordered_json report{{"v", r.v},
                                  {"g", r.g},
                                  {"collider", r.collider},
                                  {"level", r.level},
                                  {"p_v_given_g1", r.p_v_given_g1},
                                  {"p_v_given_g0", r.p_v_given_g0},
                                  {"p_v_given_g1_collider", r.p_v_given_g1_c},
                                  {"p_v_given_g0_collider", r.p_v_given_g0_c},
                                  {"odds_ratio", r.odds_ratio},
                                  {"odds_ratio_collider", r.odds_ratio_c},
                                  {"marginally_independent", r.marginally_independent},
                                  {"conditionally_independent", r.conditionally_independent}};
    ctx.writer.write("report.json", report.dump(2) + '\n');
    if (ctx.cfg.export_data) ctx.writer.write("data.csv", dataset_csv(data));
}

inline nlohmann::ordered_json frailty_json(const FrailtyParams &p) {
    return {{"lambda0", p.lambda0}, {"r", p.r},       {"delta0", p.delta0},
            {"delta1", p.delta1},   {"horizon", p.horizon}, {"p_exposed", p.p_exposed}};
}

inline void add_curve_rows(RunContext &ctx, const HazardCurve &c, const std::string &prefix) {
    for (const auto &w : c.windows) {
        const double mid = 0.5 * (w.t_low + w.t_high);
        if (w.flag.empty())
            ctx.rows.push_back({prefix + "hr", mid, w.hr, w.se, std::exp(std::log(w.hr) - kZ975 * w.se_log),
                                std::exp(std::log(w.hr) + kZ975 * w.se_log)});
        else
            ctx.warnings.push_back("window (" + format_shortest(w.t_low) + "," + format_shortest(w.t_high) + "]: " + w.flag);
        if (std::isfinite(w.closed_form)) ctx.rows.push_back({prefix + "hr_closed_form", mid, w.closed_form, {}, {}, {}});
    }
}

inline void run_frailty(RunContext &ctx, FrailtyParams p, bool late) {
    reject_estimator_options(ctx);
    if (ctx.cfg.step) throw Error("step applies only to process scenarios");
    if (ctx.cfg.horizon) p.horizon = *ctx.cfg.horizon;
    p.check();
    const auto cohort = simulate_frailty_cohort(p, ctx.n, ctx.cfg.seed, ctx.cfg.workers);
    ctx.parameters["frailty"] = frailty_json(p);
    nlohmann::ordered_json report{{"frailty", frailty_json(p)}};
    if (!late) {
        const auto grid = uniform_grid(0.0, p.horizon, 8);
        const auto curve = hr_curve(cohort, grid, p);
        add_curve_rows(ctx, curve, "");
        std::vector<double> y, w;
        for (const auto &win : curve.windows)
            if (win.flag.empty()) {
                y.push_back(win.hr);
                w.push_back(1.0 / (win.se * win.se));
            }
        if (!y.empty()) report["isotonic_decreasing_fit"] = isotonic_decreasing(y, w);
        ctx.writer.write("hr_curve.csv", hazard_csv_text(curve));
    } else {
        const double t0 = builtin::kLateEntry;
        if (!(t0 < p.horizon)) throw Error("late entry time must precede the horizon");
        const auto entered = late_entry(cohort, t0);
        const auto full = hr_curve(cohort, {0.0, p.horizon});
        const auto overall = hr_curve(entered, {t0, p.horizon});
        const auto curve = hr_curve(entered, uniform_grid(t0, p.horizon, 6), p);
        ctx.rows.push_back({"conditional_hr", std::nullopt, p.r, {}, {}, {}});
        add_curve_rows(ctx, full, "full_followup_");
        add_curve_rows(ctx, overall, "late_entry_");
        add_curve_rows(ctx, curve, "late_entry_window_");
        const auto sel = survivor_frailty(entered, 1, t0);
        report["entry_time"] = t0;
        report["entered"] = entered.size();
        report["exposed_survivor_mean_frailty"] = {{"mean", sel.mean}, {"se", sel.se}, {"count", sel.count}};
        report["late_entry_hr"] = json_number(overall.windows[0].hr);
        report["late_entry_hr_se"] = json_number(overall.windows[0].se);
        ctx.parameters["entry_time"] = t0;
        ctx.writer.write("hr_curve.csv", hazard_csv_text(curve));
    }
    ctx.writer.write("report.json", report.dump(2) + '\n');
    if (ctx.cfg.export_data) ctx.writer.write("cohort.csv", cohort_csv(late ? late_entry(cohort, builtin::kLateEntry) : cohort));
}

inline PanelData run_panel(RunContext &ctx, double horizon, double step, int observe_every) {
    reject_estimator_options(ctx);
    ProcessConfig pc;
    pc.n = ctx.n;
    pc.horizon = ctx.cfg.horizon.value_or(horizon);
    pc.step = ctx.cfg.step.value_or(step);
    pc.seed = ctx.cfg.seed;
    pc.observe_every = observe_every;
    pc.workers = ctx.cfg.workers;
    ctx.parameters["horizon"] = pc.horizon;
    ctx.parameters["step"] = pc.step;
    ctx.parameters["observe_every"] = pc.observe_every;
    auto panel = simulate_process_system(*ctx.spec, pc);
    if (ctx.cfg.export_data) {
        std::ostringstream a, b;
        write_panel_csv(panel, a);
        write_events_csv(panel, b);
        ctx.writer.write("panel.csv", a.str());
        ctx.writer.write("events.csv", b.str());
    }
    return panel;
}

inline void run_obesity(RunContext &ctx) {
    const auto panel = run_panel(ctx, 4.0, 0.05, 2);
    const SurvivorAnalysis analysis{"V", {"Y"}, 2.0, std::nullopt};
    const auto r = survivor_bias_report(panel, analysis);
    ctx.parameters["landmark"] = analysis.landmark;
    ctx.rows.push_back(wald_row("naive_log_hazard_per_unit", std::nullopt, r.naive, r.naive_se));
    ctx.rows.push_back(wald_row("naive_log_hr_high_vs_low", std::nullopt, r.naive_log_hr, r.naive_log_hr_se));
    ctx.rows.push_back(wald_row("adjusted_log_hazard_per_unit", std::nullopt, r.adjusted, r.adjusted_se));
    ctx.rows.push_back({"generating_coefficient", std::nullopt, r.truth, {}, {}, {}});
    nlohmann::ordered_json report{{"exposure", analysis.exposure},
                                  {"adjust", analysis.adjust},
                                  {"landmark", analysis.landmark},
                                  {"at_risk", r.at_risk},
                                  {"events", r.events},
                                  {"threshold", r.threshold},
                                  {"naive", r.naive},
                                  {"naive_se", r.naive_se},
                                  {"naive_hr_high_vs_low", std::exp(r.naive_log_hr)},
                                  {"adjusted", r.adjusted},
                                  {"adjusted_se", r.adjusted_se},
                                  {"truth", r.truth},
                                  {"sign_reversal", r.sign_reversal}};
    ctx.writer.write("report.json", report.dump(2) + '\n');
}

inline void run_truncation(RunContext &ctx) {
    const auto panel = run_panel(ctx, 2.0, 0.05, 1);
    const auto r = truncation_report(panel, "Y", "V");
    ctx.rows.push_back(wald_row("increment_slope", std::nullopt, r.increment, r.increment_se));
    ctx.rows.push_back(wald_row("cross_section_slope", std::nullopt, r.cross, r.cross_se));
    ctx.rows.push_back({"generating_drift", std::nullopt, r.truth, {}, {}, {}});
    nlohmann::ordered_json report{{"process", "Y"},         {"regressor", "V"},         {"truth", r.truth},
                                  {"increment", r.increment}, {"increment_se", r.increment_se},
                                  {"cross", r.cross},       {"cross_se", r.cross_se},   {"bias_z", r.bias_z},
                                  {"survivors", r.survivors}, {"increments", r.increments}};
    ctx.writer.write("report.json", report.dump(2) + '\n');
}

inline void run_custom_process(RunContext &ctx) {
    const bool exported = ctx.cfg.export_data;
    const auto panel = run_panel(ctx, 1.0, 0.01, 1);
    if (!exported) {
        std::ostringstream a, b;
        write_panel_csv(panel, a);
        write_events_csv(panel, b);
        ctx.writer.write("panel.csv", a.str());
        ctx.writer.write("events.csv", b.str());
    }
    std::size_t dead = 0;
    for (double t : panel.death_time) dead += std::isfinite(t) ? 1 : 0;
    nlohmann::ordered_json report{{"subjects", panel.size()}, {"deaths", dead}, {"observations", panel.step_index.size()}};
    ctx.writer.write("report.json", report.dump(2) + '\n');
}

} // namespace detail

/// Runs one scenario and writes its artifacts into cfg.out. Module errors are
/// rethrown with the scenario name prefixed.
inline RunSummary run_scenario(const ScenarioConfig &cfg) {
    cfg.check();
    const std::string name = cfg.scenario.empty() ? "custom" : cfg.scenario;
    try {
        const ScenarioInfo *info = cfg.scenario.empty() ? nullptr : find_scenario(cfg.scenario);
        detail::RunContext ctx{cfg, name, std::nullopt, 0, detail::ArtifactWriter(cfg.out), {}, {}, {}};
        ctx.n = cfg.n.value_or(info ? info->default_n : 10000);

        const bool parametric = name == "frailty-decreasing" || name == "frailty-crossing" || name == "late-entry-reversal";
        if (parametric && !cfg.spec_path.empty()) throw Error("scenario uses a parametric cohort and takes no spec");
        if (!cfg.spec_path.empty()) ctx.spec = load_system_file(cfg.spec_path);
        else if (name == "confounding-s1") ctx.spec = load_system(builtin::kConfoundingS1);
        else if (name == "collider") ctx.spec = load_system(builtin::kCollider);
        else if (name == "obesity-feedback") ctx.spec = load_system(builtin::kObesityFeedback);
        else if (name == "truncation-by-death") ctx.spec = load_system(builtin::kTruncationByDeath);

        if (name == "confounding-s1") detail::run_effects(ctx);
        else if (name == "collider") detail::run_collider(ctx);
        else if (name == "frailty-decreasing") detail::run_frailty(ctx, builtin::shared_frailty(), false);
        else if (name == "frailty-crossing") detail::run_frailty(ctx, builtin::exposed_only_frailty(), false);
        else if (name == "late-entry-reversal") detail::run_frailty(ctx, builtin::exposed_only_frailty(), true);
        else if (name == "obesity-feedback") detail::run_obesity(ctx);
        else if (name == "truncation-by-death") detail::run_truncation(ctx);
        else if (detail::has_process(*ctx.spec)) detail::run_custom_process(ctx);
        else detail::run_effects(ctx);

        ctx.writer.write("estimates.csv", detail::estimates_csv(ctx.rows));
        ctx.writer.write("estimates.json", detail::estimates_json(name, ctx.rows));

        nlohmann::ordered_json files = nlohmann::ordered_json::array();
        for (const auto &[file, hash] : ctx.writer.files()) files.push_back({{"name", file}, {"fnv1a", hash}});
        nlohmann::ordered_json manifest{{"tool", "causlab"},
                                        {"version", kVersion},
                                        {"scenario", name},
                                        {"seed", cfg.seed},
                                        {"n", ctx.n},
                                        {"export", cfg.export_data}};
        if (ctx.spec) {
            manifest["spec_name"] = ctx.spec->name;
            manifest["spec_hash"] = spec_hash(*ctx.spec);
            manifest["spec"] = serialize(*ctx.spec);
        }
        manifest["parameters"] = ctx.parameters;
        manifest["versions"] = {{"causlab", kVersion},
                                {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                                              "." + std::to_string(EIGEN_MINOR_VERSION)},
                                {"compiler", __VERSION__}};
        manifest["files"] = files;
        ctx.writer.write("manifest.json", manifest.dump(2) + '\n');

        RunSummary out{name, ctx.writer.dir(), {}, ctx.warnings};
        for (const auto &f : ctx.writer.files()) out.files.push_back(f.first);
        return out;
    } catch (const Error &e) {
        throw Error("scenario " + name + ": " + e.what());
    }
}

} // namespace causlab
