#include "causlab/measures.hpp"
#include "fixtures.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace causlab;
using causlab::testing::experimental_conditional;
using causlab::testing::kS1;

namespace {

Dataset make_dataset(std::vector<std::pair<std::string, std::vector<double>>> cols) {
    Dataset d;
    for (auto &[name, values] : cols) d.add_column(name, std::move(values));
    return d;
}

} // namespace

TEST(TrueWeights, S1RecordValues) {
    const auto s1 = load_system(kS1);
    const auto data = sample(s1, 500, 11);
    const auto wv = true_weights(s1, data);
    ASSERT_EQ(wv.size(), data.n);
    EXPECT_EQ(wv.source, WeightSource::true_model);
    const auto &a = data.column("A");
    const auto &c = data.column("C");
    int seen = 0;
    for (std::size_t i = 0; i < data.n; ++i) {
        const double fac = c[i] == 1 ? (a[i] == 1 ? 0.7 : 0.3) : (a[i] == 1 ? 0.3 : 0.7);
        EXPECT_NEAR(wv.w[i], 1.0 / fac, 1e-14);
        EXPECT_NEAR(wv.ws[i], 0.5 / fac, 1e-14);
        if (a[i] == 1 && c[i] == 1) {
            EXPECT_NEAR(wv.ws[i], 5.0 / 7.0, 1e-15);
            EXPECT_NEAR(wv.w[i], 1.0 / 0.7, 1e-14);
            ++seen;
        }
    }
    EXPECT_GT(seen, 0);
}

TEST(TrueWeights, IndependentExposureGivesUnitStabilizedWeights) {
    const auto spec = load_system("system \"ind\"\nnode C kind=covariate dist=bernoulli(0.4)\n"
                                  "node A kind=exposure given=(C) dist=table{0: bernoulli(0.3); 1: bernoulli(0.3)}\n"
                                  "node Y kind=outcome given=(A, C) dist=table{0,0: bernoulli(0.2); 0,1: bernoulli(0.5); "
                                  "1,0: bernoulli(0.4); 1,1: bernoulli(0.8)}\n");
    const auto data = sample(spec, 1000, 2);
    const auto wv = true_weights(spec, data);
    for (double v : wv.ws) EXPECT_NEAR(v, 1.0, 1e-15);
}

TEST(TrueWeights, PositivityViolationIsAnError) {
    const auto spec = load_system("system \"pos\"\nnode C kind=covariate dist=bernoulli(0.5)\n"
                                  "node A kind=exposure given=(C) dist=table{0: bernoulli(0.5); 1: bernoulli(1)}\n"
                                  "node Y kind=outcome given=(A) dist=table{0: bernoulli(0.2); 1: bernoulli(0.6)}\n");
    const auto data = make_dataset({{"C", {0, 1, 1}}, {"A", {0, 1, 0}}, {"Y", {0, 1, 1}}});
    try {
        true_weights(spec, data);
        FAIL() << "expected positivity error";
    } catch (const PositivityError &e) {
        EXPECT_NE(std::string(e.what()).find("record 2"), std::string::npos) << e.what();
    }
}

TEST(TrueWeights, ContinuousExposureUsesMixtureMarginal) {
    const auto spec = load_system("system \"cont\"\nnode C kind=covariate dist=bernoulli(0.5)\n"
                                  "node A kind=exposure given=(C) dist=gaussian(0, 1, 1.5)\n"
                                  "node Y kind=outcome given=(A, C) dist=gaussian(0, 1, 0.5, 1)\n");
    const std::size_t n = 200000;
    const auto data = sample(spec, n, 9);
    const auto wv = true_weights(spec, data);
    double s = 0.0, s2 = 0.0;
    for (double v : wv.ws) {
        s += v;
        s2 += v * v;
    }
    const double mean = s / n;
    const double se = std::sqrt((s2 / n - mean * mean) / n);
    EXPECT_NEAR(mean, 1.0, 3 * se);
}

TEST(ExactWeights, MeanOneUnderEnumeration) {
    EXPECT_NEAR(exact_weight_mean(load_system(kS1)), 1.0, 1e-12);
    Rng gen(21);
    for (int i = 0; i < 25; ++i)
        EXPECT_NEAR(exact_weight_mean(causlab::testing::random_discrete_system(gen)), 1.0, 1e-12);
}

TEST(ExactWeights, ChangeOfMeasureIdentity) {
    const auto s1 = load_system(kS1);
    const std::vector<std::function<double(std::span<const int>)>> qs{
        [](auto x) { return static_cast<double>(x[2]); },
        [](auto x) { return static_cast<double>(x[0]); },
        [](auto x) { return static_cast<double>(x[0] * x[2]) + 0.25; },
        [](auto) { return 1.0; },
    };
    for (const auto &q : qs)
        for (int a = 0; a < 2; ++a)
            EXPECT_NEAR(exact_reweighted_expectation(s1, q, a), experimental_conditional(s1, q, a), 1e-12);
    EXPECT_NEAR(exact_reweighted_expectation(s1, qs[0], 1), 0.60, 1e-12);
    EXPECT_NEAR(exact_reweighted_expectation(s1, qs[0], 0), 0.35, 1e-12);
}

TEST(ExactWeightsProperty, ChangeOfMeasureOnRandomSystems) {
    Rng gen(99);
    for (int i = 0; i < 25; ++i) {
        const auto spec = causlab::testing::random_discrete_system(gen);
        const auto y = spec.index_of("Y").value();
        const auto c1 = spec.index_of("C1").value();
        const int levels = static_cast<int>(support_size(spec.find("A")->dist));
        auto q = [&](std::span<const int> x) { return x[y] * (1.0 + x[c1]); };
        for (int a = 0; a < levels; ++a)
            EXPECT_NEAR(exact_reweighted_expectation(spec, q, a), experimental_conditional(spec, q, a), 1e-12);
    }
}

TEST(FitPropensity, FrequencyTableRecoversS1) {
    const auto data = sample(load_system(kS1), 200000, 3);
    const auto m = fit_propensity(data, "A", {"C"}, PropensityForm::frequency_table);
    const std::vector<double> c1{1.0};
    EXPECT_NEAR(m.conditional(1.0, c1), 0.7, 3 * std::sqrt(0.21 / 100000.0));
    const std::vector<double> c0{0.0};
    EXPECT_NEAR(m.conditional(1.0, c0), 0.3, 3 * std::sqrt(0.21 / 100000.0));
    EXPECT_FALSE(m.fitted_on.empty());
}

TEST(FitPropensity, SingleLevelExposureIsRejected) {
    const auto data = make_dataset({{"C", {0, 1, 0, 1}}, {"A", {1, 1, 1, 1}}});
    EXPECT_THROW(fit_propensity(data, "A", {"C"}, PropensityForm::frequency_table), PositivityError);
    EXPECT_THROW(fit_propensity(data, "A", {"C"}, PropensityForm::logistic_linear), PositivityError);
}

TEST(FitPropensity, EmptyCellNamesTheCell) {
    const auto data = make_dataset({{"C", {0, 0, 1, 1}}, {"A", {0, 1, 1, 1}}});
    try {
        fit_propensity(data, "A", {"C"}, PropensityForm::frequency_table);
        FAIL() << "expected positivity error";
    } catch (const PositivityError &e) {
        EXPECT_NE(std::string(e.what()).find("A=0 | C=1"), std::string::npos) << e.what();
    }
}

TEST(FitPropensity, OneCellReducesToMarginal) {
    const auto data = make_dataset({{"C", {0, 0, 0, 0, 0}}, {"A", {0, 1, 1, 0, 1}}});
    const auto m = fit_propensity(data, "A", {"C"}, PropensityForm::frequency_table);
    const std::vector<double> c{0.0};
    EXPECT_DOUBLE_EQ(m.conditional(1.0, c), 0.6);
    EXPECT_DOUBLE_EQ(m.marginal_prob(1.0), 0.6);
    const auto none = fit_propensity(data, "A", {}, PropensityForm::frequency_table);
    EXPECT_DOUBLE_EQ(none.conditional(1.0, {}), 0.6);
}

TEST(FitPropensity, LogisticMatchesSaturatedTableOnBinaryCovariate) {
    const auto data = sample(load_system(kS1), 20000, 4);
    const auto table = fit_propensity(data, "A", {"C"}, PropensityForm::frequency_table);
    const auto logit = fit_propensity(data, "A", {"C"}, PropensityForm::logistic_linear);
    ASSERT_EQ(logit.coefficients.size(), 2u);
    EXPECT_LE(logit.iterations, 100);
    for (double c : {0.0, 1.0}) {
        const std::vector<double> cv{c};
        EXPECT_NEAR(logit.conditional(1.0, cv), table.conditional(1.0, cv), 1e-9);
        EXPECT_NEAR(logit.conditional(0.0, cv), table.conditional(0.0, cv), 1e-9);
    }
}

TEST(FitPropensity, LogisticOnContinuousCovariate) {
    const auto spec = load_system("system \"lc\"\nnode C kind=covariate dist=gaussian(0, 1)\n"
                                  "node L kind=covariate given=(C) dist=gaussian(0, 0.5, 1)\n"
                                  "node Y kind=outcome given=(C) dist=gaussian(0, 1, 1)\n");
    auto data = sample(spec, 50000, 8);
    // Attach a binary exposure drawn from a known logistic law.
    Rng rng(77);
    std::vector<double> a(data.n);
    const auto &c = data.column("C");
    for (std::size_t i = 0; i < data.n; ++i) a[i] = rng.bernoulli(detail::logistic(-0.5 + 1.2 * c[i]));
    data.add_column("A", a);
    const auto m = fit_propensity(data, "A", {"C"}, PropensityForm::logistic_linear);
    EXPECT_NEAR(m.coefficients[0], -0.5, 0.05);
    EXPECT_NEAR(m.coefficients[1], 1.2, 0.06);
}

TEST(FitPropensity, SeparatedDataNeverYieldsInfiniteWeights) {
    std::vector<double> c, a;
    for (int i = 0; i < 200; ++i) {
        c.push_back(i < 100 ? -1.0 - i * 0.01 : 1.0 + i * 0.01);
        a.push_back(i < 100 ? 0.0 : 1.0);
    }
    const auto data = make_dataset({{"C", c}, {"A", a}});
    try {
        const auto m = fit_propensity(data, "A", {"C"}, PropensityForm::logistic_linear);
        const auto wv = estimated_weights(m, data);
        for (double v : wv.w) EXPECT_TRUE(std::isfinite(v));
    } catch (const Error &) {
        SUCCEED();
    }
}

TEST(EstimatedWeights, ConvergeToTrueWeights) {
    const auto s1 = load_system(kS1);
    auto max_gap = [&](std::size_t n) {
        const auto data = sample(s1, n, 31);
        const auto tw = true_weights(s1, data);
        const auto ew = estimated_weights(fit_propensity(data, "A", {"C"}, PropensityForm::frequency_table), data);
        EXPECT_EQ(ew.source, WeightSource::estimated);
        double gap = 0.0;
        for (std::size_t i = 0; i < n; ++i) gap = std::max(gap, std::abs(tw.ws[i] - ew.ws[i]));
        return gap;
    };
    const double g4 = max_gap(10000);
    const double g5 = max_gap(100000);
    EXPECT_LT(g5, g4);
}

TEST(EstimatedWeights, FrequencyTableWeightsSumToGroupSizes) {
    Rng gen(3);
    for (int rep = 0; rep < 5; ++rep) {
        const auto spec = causlab::testing::random_discrete_system(gen);
        const auto data = sample(spec, 3000, 50 + static_cast<std::uint64_t>(rep));
        std::vector<std::string> covs;
        for (const auto &n : spec.nodes)
            if (n.kind == NodeKind::covariate) covs.push_back(n.name);
        const auto wv = estimated_weights(fit_propensity(data, "A", covs, PropensityForm::frequency_table), data);
        std::map<double, std::pair<double, double>> sums;
        const auto &a = data.column("A");
        for (std::size_t i = 0; i < data.n; ++i) {
            sums[a[i]].first += wv.ws[i];
            sums[a[i]].second += 1.0;
        }
        for (const auto &[level, s] : sums) EXPECT_NEAR(s.first, s.second, 1e-9 * s.second);
    }
}

TEST(ReweightedExpectation, RecoversExperimentalMeanOnS1) {
    const auto s1 = load_system(kS1);
    auto data = sample(s1, 200000, 17);
    const auto wv = true_weights(s1, data);
    const auto &a = data.column("A");
    const auto &y = data.column("Y");
    for (double level : {0.0, 1.0}) {
        const double m = reweighted_expectation(data, wv, "Y", "A", level);
        double s = 0.0, v = 0.0;
        for (std::size_t i = 0; i < data.n; ++i)
            if (a[i] == level) {
                s += wv.ws[i];
                v += wv.ws[i] * wv.ws[i] * (y[i] - m) * (y[i] - m);
            }
        const double se = std::sqrt(v) / s;
        EXPECT_NEAR(m, level == 1.0 ? 0.60 : 0.35, 3 * se);
    }
}

TEST(ReweightedExpectation, TrivialCases) {
    const auto data = make_dataset({{"A", {0, 1, 1, 1, 0}}, {"Y", {1, 0, 1, 1, 0}}, {"one", {1, 1, 1, 1, 1}}});
    WeightVector equal;
    equal.w.assign(5, 2.0);
    equal.ws.assign(5, 3.0);
    EXPECT_DOUBLE_EQ(reweighted_expectation(data, equal, "Y", "A", 1.0), 2.0 / 3.0);
    WeightVector uneven;
    uneven.w = {1, 2, 3, 4, 5};
    uneven.ws = {0.1, 7.0, 0.3, 2.5, 9.0};
    EXPECT_DOUBLE_EQ(reweighted_expectation(data, uneven, "one", "A", 1.0), 1.0);
    EXPECT_DOUBLE_EQ(reweighted_expectation(data, uneven, "one", "A", 0.0), 1.0);
    EXPECT_THROW(reweighted_expectation(data, uneven, "Y", "A", 2.0), Error);
}

TEST(WeightDiagnostics, Cases) {
    WeightVector ones;
    ones.ws.assign(40, 1.0);
    ones.w.assign(40, 2.0);
    const auto r = weight_diagnostics(ones);
    EXPECT_DOUBLE_EQ(r.ess, 40.0);
    EXPECT_DOUBLE_EQ(r.mean_ws, 1.0);
    EXPECT_DOUBLE_EQ(r.max_ws, 1.0);
    EXPECT_DOUBLE_EQ(r.mean_w, 2.0);

    WeightVector extreme;
    extreme.ws.assign(100, 1e-6);
    extreme.ws[17] = 1e6;
    EXPECT_NEAR(weight_diagnostics(extreme).ess, 1.0, 1e-6);
    EXPECT_DOUBLE_EQ(weight_diagnostics(extreme).max_ws, 1e6);

    EXPECT_THROW(weight_diagnostics(WeightVector{}), Error);
}

TEST(WeightDiagnostics, SampledMeanWithinThreeStandardErrors) {
    const auto s1 = load_system(kS1);
    const auto data = sample(s1, 200000, 23);
    const auto wv = true_weights(s1, data);
    const auto r = weight_diagnostics(wv);
    double v = 0.0;
    for (double x : wv.ws) v += (x - r.mean_ws) * (x - r.mean_ws);
    const double se = std::sqrt(v / (data.n - 1) / data.n);
    EXPECT_NEAR(r.mean_ws, 1.0, 3 * se);
}

TEST(WeightCap, CapsBothColumnsAndRecordsTheCap) {
    WeightVector wv;
    wv.w = {1.0, 5.0, 12.0};
    wv.ws = {0.5, 2.5, 6.0};
    const auto capped = apply_weight_cap(wv, 4.0);
    EXPECT_EQ(capped.w, (std::vector<double>{1.0, 4.0, 4.0}));
    EXPECT_EQ(capped.ws, (std::vector<double>{0.5, 2.5, 4.0}));
    ASSERT_TRUE(capped.cap.has_value());
    EXPECT_EQ(*capped.cap, 4.0);
    EXPECT_THROW(apply_weight_cap(wv, 0.0), Error);
}
