#include "causlab/dynamics.hpp"
#include "fixtures.hpp"

#include <boost/math/quadrature/exp_sinh.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

using namespace causlab;

namespace {

// Population hazard ratio by integrating over the gamma frailty density:
// h_g(t) = E[Z lambda_g e^{-Z Lambda_g}] / E[e^{-Z Lambda_g}].
double integrated_hr(const FrailtyParams &p, double t) {
    auto hazard = [&](double rate, double delta) {
        if (delta == 0.0) return rate;
        const double k = 1.0 / delta;
        const double lg = boost::math::lgamma(k);
        auto dens = [&](double z) { return std::exp((k - 1.0) * std::log(z) - z / delta - lg - k * std::log(delta)); };
        boost::math::quadrature::exp_sinh<double> integrator;
        const double num = integrator.integrate([&](double z) { return z * rate * std::exp(-z * rate * t) * dens(z); });
        const double den = integrator.integrate([&](double z) { return std::exp(-z * rate * t) * dens(z); });
        return num / den;
    };
    return hazard(p.lambda0 * p.r, p.delta1) / hazard(p.lambda0, p.delta0);
}

FrailtyParams shared() { return {1.0, 2.0, 1.0, 1.0, 2.0, 0.5}; }
FrailtyParams crossing() { return {1.0, 2.0, 0.0, 2.0, 2.0, 0.5}; }

constexpr std::string_view kObesity = R"(system "obesity-feedback"
node G kind=covariate dist=bernoulli(0.5)
node Y kind=process given=(G) dist=linear-gaussian-step(0, 0.5, 0.1, 0.3, 0.3)
node V kind=process given=(Y) dist=linear-gaussian-step(0, 1, 0, -1.5, 0.2)
node D kind=death given=(Y, V) dist=exponential-hazard(0.02, 2, 0.2)
)";

constexpr std::string_view kNoFeedback = R"(system "no-feedback"
node G kind=covariate dist=bernoulli(0.5)
node Y kind=process given=(G) dist=linear-gaussian-step(0, 0.5, 0.1, 0.3, 0.3)
node V kind=process dist=linear-gaussian-step(0, 1, 0, 0.2)
node D kind=death given=(Y, V) dist=exponential-hazard(0.02, 2, 0.2)
)";

constexpr std::string_view kTruncation = R"(system "truncation-by-death"
node V kind=exposure dist=bernoulli(0.5)
node Y kind=process given=(V) dist=linear-gaussian-step(0, 0.5, 0, 1, 0.5)
node D kind=death given=(Y) dist=exponential-hazard(0.1, 1.5)
)";

constexpr std::string_view kSelection = R"(system "selection"
node V kind=exposure dist=bernoulli(0.5)
node G kind=frailty dist=bernoulli(0.5)
node H kind=covariate given=(V, G) dist=table{0,0: categorical(0, 1, 0); 0,1: categorical(0, 1, 0); 1,0: categorical(1, 0, 0); 1,1: categorical(0, 0, 1)}
node D kind=death given=(V, H) dist=exponential-hazard(0.1, 0.5, 1.6)
)";

} // namespace

TEST(FrailtyClosedForm, SharedFrailtyExamples) {
    const auto p = shared();
    EXPECT_NEAR(gamma_frailty_marginal_hr(p, 1.0), 4.0 / 3.0, 1e-15);
    EXPECT_DOUBLE_EQ(gamma_frailty_marginal_hr(p, 0.0), 2.0);
    EXPECT_NEAR(gamma_frailty_marginal_hr(p, 1e12), 1.0, 1e-9);
    double prev = 2.0;
    for (double t = 0.05; t < 50.0; t *= 1.5) {
        const double h = gamma_frailty_marginal_hr(p, t);
        EXPECT_LT(h, prev);
        EXPECT_GT(h, 1.0);
        prev = h;
    }
    EXPECT_THROW(gamma_frailty_marginal_hr(p, -1.0), Error);
}

TEST(FrailtyClosedForm, NoFrailtyKeepsProportionalHazards) {
    FrailtyParams p{0.7, 3.0, 0.0, 0.0, 1.0, 0.5};
    for (double t : {0.0, 0.3, 2.0, 100.0}) EXPECT_DOUBLE_EQ(gamma_frailty_marginal_hr(p, t), 3.0);
}

TEST(FrailtyClosedForm, ExposedOnlyFrailtyCrossesOne) {
    const auto p = crossing();
    for (double t : {0.0, 0.1, 0.25, 0.75, 1.0, 3.0}) EXPECT_NEAR(gamma_frailty_marginal_hr(p, t), 2.0 / (1.0 + 4.0 * t), 1e-15);
    EXPECT_NEAR(gamma_frailty_marginal_hr(p, 0.25), 1.0, 1e-15);
    EXPECT_NEAR(gamma_frailty_marginal_hr(p, 1.0), 0.4, 1e-15);
    EXPECT_NEAR(gamma_frailty_marginal_hr(p, 0.75), 0.5, 1e-15);
}

TEST(FrailtyClosedForm, AgreesWithNumericalIntegration) {
    const std::vector<FrailtyParams> cases{shared(), crossing(), {0.5, 1.5, 0.4, 2.5, 1.0, 0.5}, {2.0, 0.6, 1.2, 0.3, 1.0, 0.5}};
    for (const auto &p : cases)
        for (double t : {0.0, 0.1, 0.5, 1.0, 2.5, 7.0})
            EXPECT_NEAR(gamma_frailty_marginal_hr(p, t), integrated_hr(p, t), 1e-8) << "t=" << t;
}

TEST(FrailtyCohort, ExponentialMeanWithoutFrailty) {
    FrailtyParams p{1.5, 2.0, 0.0, 0.0, 1e6, 0.5};
    const auto d = simulate_frailty_cohort(p, 100000, 7);
    double s = 0, s2 = 0, k = 0;
    for (std::size_t i = 0; i < d.size(); ++i)
        if (d.group[i] == 0) {
            EXPECT_EQ(d.event[i], 1);
            s += d.time[i];
            s2 += d.time[i] * d.time[i];
            k += 1;
        }
    const double mean = s / k;
    const double se = std::sqrt((s2 / k - mean * mean) / k);
    EXPECT_NEAR(mean, 1.0 / 1.5, 3 * se);
}

TEST(FrailtyCohort, ReproducibleAndWorkerIndependent) {
    const auto a = simulate_frailty_cohort(shared(), 20001, 99);
    EXPECT_EQ(a, simulate_frailty_cohort(shared(), 20001, 99));
    EXPECT_EQ(a, simulate_frailty_cohort(shared(), 20001, 99, 4));
    EXPECT_NE(a, simulate_frailty_cohort(shared(), 20001, 100));
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_GT(a.time[i], a.entry[i]);
        if (!a.event[i]) {
            EXPECT_EQ(a.time[i], a.horizon);
        }
    }
    EXPECT_THROW(simulate_frailty_cohort(shared(), 0, 1), Error);
    EXPECT_THROW(simulate_frailty_cohort({0.0, 2.0, 1.0, 1.0, 1.0, 0.5}, 10, 1), Error);
}

TEST(FrailtyCohort, CrossingWindowBelowOne) {
    const auto d = simulate_frailty_cohort(crossing(), 500000, 7);
    const auto c = hr_curve(d, {0.5, 1.0}, crossing());
    EXPECT_LT(c.windows[0].hr + 2 * c.windows[0].se, 1.0);
    EXPECT_NEAR(c.windows[0].closed_form, 0.5, 1e-15);
}

TEST(HazardCurve, SharedFrailtyMatchesClosedFormAndDecreases) {
    const auto p = shared();
    const auto d = simulate_frailty_cohort(p, 500000, 7);
    const auto c = hr_curve(d, uniform_grid(0.0, 2.0, 20), p);
    std::vector<double> y, w;
    for (const auto &win : c.windows) {
        ASSERT_TRUE(win.flag.empty());
        y.push_back(win.hr);
        w.push_back(1.0 / (win.se * win.se));
    }
    const auto iso = isotonic_decreasing(y, w);
    for (std::size_t k = 0; k < y.size(); ++k) EXPECT_LE(std::abs(y[k] - iso[k]), 2 * c.windows[k].se) << k;
    EXPECT_GT(c.windows.front().hr - c.windows.back().hr, 3 * (c.windows.front().se + c.windows.back().se));
    EXPECT_GT(c.windows.back().hr, 1.0);

    // Windows centred on t = 0.5, 1, 1.5.
    const auto mid = hr_curve(d, {0.45, 0.55, 0.95, 1.05, 1.45, 1.55}, p);
    for (std::size_t k : {0u, 2u, 4u})
        EXPECT_NEAR(mid.windows[k].hr, mid.windows[k].closed_form, 2 * mid.windows[k].se) << mid.windows[k].t_low;
}

TEST(HazardCurve, NoFrailtyWindowsStayAtR) {
    FrailtyParams p{1.0, 2.0, 0.0, 0.0, 2.0, 0.5};
    const auto d = simulate_frailty_cohort(p, 200000, 8);
    const auto c = hr_curve(d, uniform_grid(0.0, 2.0, 8));
    for (const auto &win : c.windows) EXPECT_NEAR(win.hr, 2.0, 3 * win.se) << win.t_low;
}

TEST(HazardCurve, DegenerateInputs) {
    FrailtyParams p = shared();
    p.horizon = 1e-9;
    const auto d = simulate_frailty_cohort(p, 1000, 1);
    const auto c = hr_curve(d, {0.0, 0.5, 1.0});
    for (const auto &win : c.windows) {
        EXPECT_FALSE(win.flag.empty());
        EXPECT_TRUE(std::isnan(win.hr));
        EXPECT_TRUE(std::isfinite(win.hazard0));
        EXPECT_TRUE(std::isfinite(win.hazard1));
    }
    EXPECT_THROW(hr_curve(SurvivalData{}, {0.0, 1.0}), Error);
    EXPECT_THROW(hr_curve(d, {0.0}), Error);
    EXPECT_THROW(hr_curve(d, {0.5, 0.5}), Error);

    std::ostringstream os;
    write_hazard_csv(c, os);
    EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "t_low,t_high,hazard0,hazard1,hr,se");
    EXPECT_NE(os.str().find("NA"), std::string::npos);
}

TEST(HazardCurve, IsotonicPooling) {
    const auto fit = isotonic_decreasing({3, 1, 2, 0}, {1, 1, 1, 1});
    EXPECT_EQ(fit, (std::vector<double>{3, 1.5, 1.5, 0}));
}

TEST(LateEntry, Cases) {
    const auto p = crossing();
    const auto d = simulate_frailty_cohort(p, 500000, 7);
    EXPECT_EQ(late_entry(d, 0.0), d);
    EXPECT_THROW(late_entry(d, 2.0), Error);
    EXPECT_THROW(late_entry(d, 5.0), Error);

    const auto late = late_entry(d, 0.5);
    for (std::size_t i = 0; i < late.size(); ++i) {
        EXPECT_GT(late.time[i], 0.5);
        EXPECT_EQ(late.entry[i], 0.5);
    }
    const auto c = hr_curve(late, {0.5, p.horizon});
    EXPECT_LT(c.windows[0].hr + 3 * c.windows[0].se, 1.0);
    EXPECT_GT(p.r, 1.0);

    // Selection of the frailty among exposed survivors.
    const auto sel = survivor_frailty(late, 1, 0.5);
    const auto all = survivor_frailty(d, 1, 0.0);
    EXPECT_LT(sel.mean + 3 * sel.se, all.mean - 3 * all.se);
    EXPECT_NEAR(sel.mean, 1.0 / 3.0, 3 * sel.se);
}

TEST(FrailtyProperty, SurvivorMeanFrailtyFollowsGammaPosterior) {
    const auto p = shared();
    const auto d = simulate_frailty_cohort(p, 300000, 11);
    for (int g : {0, 1}) {
        double prev = 2.0;
        for (double t : {0.0, 0.25, 0.5, 1.0, 1.5}) {
            const auto s = survivor_frailty(d, g, t);
            const double cum = p.lambda0 * (g ? p.r : 1.0) * t;
            const double expected = 1.0 / (1.0 + (g ? p.delta1 : p.delta0) * cum);
            EXPECT_NEAR(s.mean, expected, 3 * s.se) << "g=" << g << " t=" << t;
            EXPECT_LT(s.mean, prev);
            prev = s.mean;
        }
    }
}

TEST(Collider, DemoSystem) {
    const auto spec = load_system(causlab::testing::kColliderDemo);
    const auto r = collider_report(spec, "Y", 1, "V", "G");
    EXPECT_NEAR(r.p_v_given_g1, 0.5, 1e-15);
    EXPECT_NEAR(r.p_v_given_g0, 0.5, 1e-15);
    EXPECT_NEAR(r.p_v_given_g1_c, 9.0 / 14.0, 1e-15);
    EXPECT_NEAR(r.p_v_given_g0_c, 5.0 / 6.0, 1e-15);
    EXPECT_TRUE(r.marginally_independent);
    EXPECT_FALSE(r.conditionally_independent);
    EXPECT_NEAR(r.odds_ratio, 1.0, 1e-12);
    EXPECT_LT(r.odds_ratio_c, 1.0);
    const auto again = collider_report(spec, "Y", 1, "V", "G");
    EXPECT_EQ(again.p_v_given_g1_c, r.p_v_given_g1_c);
}

TEST(Collider, NoEdgesAndRootConditioning) {
    const auto none = load_system(R"(system "none"
node V kind=exposure dist=bernoulli(0.3)
node G kind=covariate dist=bernoulli(0.6)
node Y kind=outcome dist=bernoulli(0.2)
)");
    const auto r = collider_report(none, "Y", 1, "V", "G");
    EXPECT_TRUE(r.conditionally_independent);
    EXPECT_NEAR(r.p_v_given_g1_c, 0.3, 1e-15);

    const auto root = load_system(R"(system "root"
node W kind=covariate dist=bernoulli(0.4)
node V kind=exposure dist=bernoulli(0.5)
node G kind=covariate dist=bernoulli(0.5)
node Y kind=outcome given=(V, G) dist=table{0,0: bernoulli(0.1); 0,1: bernoulli(0.5); 1,0: bernoulli(0.5); 1,1: bernoulli(0.9)}
)");
    const auto rr = collider_report(root, "W", 1, "V", "G");
    EXPECT_TRUE(rr.conditionally_independent);
    EXPECT_THROW(collider_report(root, "Z", 1, "V", "G"), Error);
    const auto cont = load_system(R"(system "c"
node V kind=exposure dist=bernoulli(0.5)
node G kind=covariate dist=bernoulli(0.5)
node Y kind=outcome given=(V, G) dist=gaussian(0, 1, 1, 1)
)");
    EXPECT_THROW(collider_report(cont, "Y", 1, "V", "G"), Error);
}

TEST(ProcessSystem, RandomWalkWithoutFeedbackOrDeath) {
    const auto spec = load_system(R"(system "rw"
node Y kind=process dist=linear-gaussian-step(1, 0, 0, 0.5)
node D kind=death given=(Y) dist=exponential-hazard(0, 0)
)");
    ProcessConfig cfg;
    cfg.n = 20000;
    cfg.horizon = 2.0;
    cfg.step = 0.05;
    cfg.seed = 3;
    const auto p = simulate_process_system(spec, cfg);
    double s = 0, s2 = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        ASSERT_EQ(p.offset[i + 1] - p.offset[i], 41u);
        EXPECT_FALSE(std::isfinite(p.death_time[i]));
        EXPECT_EQ(p.values[0][p.offset[i]], 1.0);
        const double inc = p.values[0][p.offset[i + 1] - 1] - 1.0;
        s += inc;
        s2 += inc * inc;
    }
    const double n = static_cast<double>(p.size());
    const double var = s2 / n - (s / n) * (s / n);
    EXPECT_NEAR(s / n, 0.0, 4 * std::sqrt(0.5 / n));
    EXPECT_NEAR(var, 0.25 * 2.0, 4 * 0.5 * std::sqrt(2.0 / n));
}

TEST(ProcessSystem, TruncationIsStructural) {
    ProcessConfig cfg;
    cfg.n = 20000;
    cfg.horizon = 4.0;
    cfg.step = 0.05;
    cfg.seed = 5;
    const auto p = simulate_process_system(load_system(kObesity), cfg);
    std::size_t dead = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (std::isfinite(p.death_time[i])) {
            ++dead;
            EXPECT_LE(p.death_time[i], p.horizon);
        }
        for (std::size_t o = p.offset[i]; o < p.offset[i + 1]; ++o) ASSERT_LE(p.time_of(o), p.death_time[i]);
    }
    EXPECT_GT(dead, 1000u);
}

TEST(ProcessSystem, DeterministicAcrossWorkers) {
    ProcessConfig cfg;
    cfg.n = 3001;
    cfg.horizon = 2.0;
    cfg.step = 0.05;
    cfg.seed = 17;
    const auto spec = load_system(kObesity);
    const auto a = simulate_process_system(spec, cfg);
    cfg.workers = 3;
    EXPECT_EQ(a, simulate_process_system(spec, cfg));
    cfg.workers = 1;
    cfg.seed = 18;
    EXPECT_NE(a, simulate_process_system(spec, cfg));
}

TEST(ProcessSystem, ProcessCyclesSimulateVariableCyclesAreRejected) {
    const auto spec = load_system(R"(system "cycle"
node Y kind=process given=(V) dist=linear-gaussian-step(0, 1, 0, -0.5, 0.3)
node V kind=process given=(Y, V) dist=linear-gaussian-step(0, 1, 0, 0.4, -0.2, 0.3)
node D kind=death given=(Y) dist=exponential-hazard(0.1, 0.5)
)");
    ProcessConfig cfg;
    cfg.n = 500;
    cfg.horizon = 1.0;
    cfg.step = 0.1;
    EXPECT_NO_THROW(simulate_process_system(spec, cfg));
    EXPECT_THROW(load_system(R"(system "cycle"
node Y kind=covariate given=(V) dist=gaussian(0, 1, 1)
node V kind=covariate given=(Y) dist=gaussian(0, 1, 1)
)"),
                 Error);
}

TEST(ProcessSystem, Errors) {
    const auto spec = load_system(kObesity);
    ProcessConfig cfg;
    cfg.n = 10;
    cfg.step = 0.0;
    EXPECT_THROW(simulate_process_system(spec, cfg), Error);
    cfg.step = 0.3;
    cfg.horizon = 1.0;
    EXPECT_THROW(simulate_process_system(spec, cfg), Error);
    const auto nodeath = load_system("system \"nd\"\nnode Y kind=process dist=linear-gaussian-step(0, 1, 0, 1)\n");
    cfg.step = 0.1;
    EXPECT_THROW(simulate_process_system(nodeath, cfg), Error);
    cfg.truncate = false;
    EXPECT_NO_THROW(simulate_process_system(nodeath, cfg));
}

TEST(ProcessSystem, StepHalvingConverges) {
    const auto spec = load_system(kTruncation);
    auto survival = [&](double step) {
        ProcessConfig cfg;
        cfg.n = 100000;
        cfg.horizon = 2.0;
        cfg.step = step;
        cfg.seed = 21;
        cfg.observe_every = 1000;
        const auto p = simulate_process_system(spec, cfg);
        double alive = 0;
        for (double d : p.death_time) alive += std::isfinite(d) ? 0.0 : 1.0;
        return alive / static_cast<double>(p.size());
    };
    const double s1 = survival(0.02);
    const double s2 = survival(0.01);
    const double se = std::sqrt(2 * s1 * (1 - s1) / 100000.0);
    EXPECT_NEAR(s1, s2, 4 * se);
}

TEST(ProcessSystem, ExportFormats) {
    ProcessConfig cfg;
    cfg.n = 3;
    cfg.horizon = 0.2;
    cfg.step = 0.1;
    const auto p = simulate_process_system(load_system(kTruncation), cfg);
    std::ostringstream panel, events;
    write_panel_csv(p, panel);
    write_events_csv(p, events);
    EXPECT_EQ(panel.str().substr(0, panel.str().find('\n')), "subject,time,node,value");
    EXPECT_NE(panel.str().find("\n0,0,V,"), std::string::npos);
    EXPECT_NE(panel.str().find("\n0,0.1,Y,"), std::string::npos);
    EXPECT_EQ(events.str().substr(0, events.str().find('\n')), "subject,death_time,censored");
    const std::string ev = events.str();
    EXPECT_EQ(std::count(ev.begin(), ev.end(), '\n'), 4);
}

TEST(SurvivorBias, ObesityFeedbackReversesSign) {
    ProcessConfig cfg;
    cfg.n = 200000;
    cfg.horizon = 4.0;
    cfg.step = 0.05;
    cfg.seed = 7;
    cfg.observe_every = 2;
    const auto p = simulate_process_system(load_system(kObesity), cfg);
    const auto r = survivor_bias_report(p, {"V", {"Y"}, 2.0, std::nullopt});
    EXPECT_GT(r.truth, 0.0);
    EXPECT_LT(r.naive + 3 * r.naive_se, 0.0);
    EXPECT_LT(r.naive_log_hr + 3 * r.naive_log_hr_se, 0.0);
    EXPECT_GT(r.adjusted - 3 * r.adjusted_se, 0.0);
    EXPECT_TRUE(r.sign_reversal);
    EXPECT_THROW(survivor_bias_report(p, {"W", {}, 2.0, std::nullopt}), Error);
    EXPECT_THROW(survivor_bias_report(p, {"V", {"Q"}, 2.0, std::nullopt}), Error);
}

TEST(SurvivorBias, NoFeedbackNoParadox) {
    ProcessConfig cfg;
    cfg.n = 100000;
    cfg.horizon = 4.0;
    cfg.step = 0.05;
    cfg.seed = 7;
    cfg.observe_every = 2;
    const auto p = simulate_process_system(load_system(kNoFeedback), cfg);
    const auto r = survivor_bias_report(p, {"V", {"Y"}, 2.0, std::nullopt});
    EXPECT_FALSE(r.sign_reversal);
    EXPECT_GT(r.naive, 0.0);
    EXPECT_GT(r.adjusted, 0.0);
    EXPECT_NEAR(r.adjusted, r.truth, 3 * r.adjusted_se);
}

TEST(SurvivorBias, ReversalStrengthensWithFollowUp) {
    const auto spec = load_system(kSelection);
    auto run = [&](double horizon) {
        ProcessConfig cfg;
        cfg.n = 200000;
        cfg.horizon = horizon;
        cfg.step = 0.05;
        cfg.seed = 7;
        cfg.observe_every = 1000000;
        return survivor_bias_report(simulate_process_system(spec, cfg), {"V", {"H"}, 0.0, 0.5});
    };
    const auto short_run = run(1.0);
    const auto long_run = run(6.0);
    EXPECT_LT(long_run.naive + 3 * long_run.naive_se, short_run.naive - 3 * short_run.naive_se);
    EXPECT_FALSE(short_run.sign_reversal);
    EXPECT_TRUE(long_run.sign_reversal);
    EXPECT_NEAR(long_run.adjusted, long_run.truth, 3 * long_run.adjusted_se);
}

TEST(Truncation, IncrementsRecoverDriftCrossSectionIsBiased) {
    ProcessConfig cfg;
    cfg.n = 200000;
    cfg.horizon = 2.0;
    cfg.step = 0.05;
    cfg.seed = 7;
    const auto p = simulate_process_system(load_system(kTruncation), cfg);
    const auto r = truncation_report(p, "Y", "V");
    EXPECT_DOUBLE_EQ(r.truth, 1.0);
    EXPECT_NEAR(r.increment, r.truth, 3 * r.increment_se);
    EXPECT_GT(r.bias_z, 3.0);
    EXPECT_GT(r.cross, 0.0);
    EXPECT_LT(r.cross, r.truth);
    EXPECT_THROW(truncation_report(p, "V", "Y"), Error);
}
