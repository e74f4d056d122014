#include "histotype/common.hpp"
#include "histotype/metrics.hpp"
#include "histotype/rng.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace histotype;
using namespace histotype::metrics;

namespace {

const std::vector<std::string> kClasses = {"LumA", "LumB", "HER2", "Basal"};

ConfusionMatrix from_counts(std::vector<std::vector<std::size_t>> counts) {
    ConfusionMatrix cm;
    cm.counts = std::move(counts);
    for (std::size_t i = 0; i < cm.counts.size(); ++i) cm.classes.push_back("c" + std::to_string(i));
    return cm;
}

}  // namespace

TEST(Metrics, TumorClassifierF1) { EXPECT_NEAR(f1_score(0.963, 0.945), 0.954, 0.001); }

TEST(Metrics, SubtypeF1FromPrecisionSensitivity) {
    const std::array<std::pair<double, double>, 4> ps = {{{0.913, 0.931}, {0.667, 0.837}, {0.652, 0.469}, {0.732, 0.667}}};
    const std::array<double, 4> f1 = {0.922, 0.742, 0.545, 0.698};
    std::vector<ClassMetrics> rows;
    for (std::size_t k = 0; k < 4; ++k) {
        const double f = f1_score(ps[k].first, ps[k].second);
        EXPECT_NEAR(f, f1[k], 0.001) << kClasses[k];
        rows.push_back({ps[k].first, ps[k].second, 0.925, f});
    }
    const auto macro = macro_average(rows);
    EXPECT_NEAR(macro.f1, 0.727, 0.001);
    EXPECT_NEAR(macro.accuracy, 0.726, 0.001);
    EXPECT_NEAR(macro.sensitivity, macro.accuracy, 1e-15);
}

TEST(Metrics, MacroFromPublishedRows) {
    std::vector<ClassMetrics> rows;
    for (double f : {0.922, 0.742, 0.545, 0.698}) rows.push_back({0, 0, 0, f});
    EXPECT_NEAR(macro_average(rows).f1, 0.727, 0.001);
    rows.clear();
    for (double s : {0.931, 0.837, 0.469, 0.667}) rows.push_back({0, s, 0, 0});
    EXPECT_NEAR(macro_average(rows).accuracy, 0.726, 0.001);
}

TEST(Metrics, F1ZeroConvention) {
    EXPECT_EQ(f1_score(0, 0), 0.0);
    const auto cm = from_counts({{3, 0, 0}, {0, 2, 0}, {0, 0, 0}});
    const auto m = class_metrics(cm, 2);
    EXPECT_EQ(m.precision, 0.0);
    EXPECT_EQ(m.sensitivity, 0.0);
    EXPECT_EQ(m.f1, 0.0);
    EXPECT_EQ(m.specificity, 1.0);
}

TEST(Confusion, PerfectIsDiagonalAndIdentityMacroIsOne) {
    const std::vector<int> y{0, 1, 2, 3, 0, 1, 2, 3, 3};
    const auto cm = confusion_matrix(y, y, kClasses);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j)
            EXPECT_EQ(cm.counts[i][j], i == j ? static_cast<std::size_t>(std::count(y.begin(), y.end(), i)) : 0u);
    const auto m = macro_metrics(cm);
    EXPECT_EQ(m.f1, 1.0);
    EXPECT_EQ(m.precision, 1.0);
    EXPECT_EQ(m.sensitivity, 1.0);
    EXPECT_EQ(m.specificity, 1.0);
    EXPECT_EQ(m.accuracy, 1.0);
}

TEST(Confusion, LumaRowFromConstructedPredictions) {
    std::vector<std::string> truth(101, "LumA"), pred;
    pred.insert(pred.end(), 94, "LumA");
    pred.insert(pred.end(), 3, "LumB");
    pred.insert(pred.end(), 4, "HER2");
    const auto cm = confusion_matrix(std::span<const std::string>(pred), std::span<const std::string>(truth), kClasses);
    EXPECT_EQ(cm.counts[0], (std::vector<std::size_t>{94, 3, 4, 0}));
    EXPECT_NEAR(class_metrics(cm, 0).sensitivity, 94.0 / 101.0, 1e-15);
}

TEST(Confusion, MatchesTallyAndConservation) {
    Xoshiro256 rng(3);
    std::vector<int> p(500), t(500);
    for (auto& v : p) v = static_cast<int>(rng.below(4));
    for (auto& v : t) v = static_cast<int>(rng.below(4));
    const auto cm = confusion_matrix(p, t, kClasses);
    std::vector<std::vector<std::size_t>> tally(4, std::vector<std::size_t>(4, 0));
    for (std::size_t i = 0; i < p.size(); ++i) ++tally[t[i]][p[i]];
    EXPECT_EQ(cm.counts, tally);
    EXPECT_EQ(cm.total(), 500u);
    for (std::size_t c = 0; c < 4; ++c) {
        std::size_t tp = cm.counts[c][c], fp = 0, fn = 0;
        for (std::size_t k = 0; k < 4; ++k)
            if (k != c) {
                fp += cm.counts[k][c];
                fn += cm.counts[c][k];
            }
        const std::size_t tn = 500 - tp - fp - fn;
        const auto m = class_metrics(cm, c);
        EXPECT_DOUBLE_EQ(m.precision, static_cast<double>(tp) / (tp + fp));
        EXPECT_DOUBLE_EQ(m.sensitivity, static_cast<double>(tp) / (tp + fn));
        EXPECT_DOUBLE_EQ(m.specificity, static_cast<double>(tn) / (tn + fp));
        EXPECT_LE(m.f1, (m.precision + m.sensitivity) / 2 + 1e-15);
        EXPECT_LE(m.f1, std::sqrt(m.precision * m.sensitivity) + 1e-15);
    }
}

TEST(Confusion, Errors) {
    const std::vector<int> a{0, 1}, b{0};
    EXPECT_THROW(confusion_matrix(a, b, kClasses), ValidationError);
    const std::vector<int> c{0, 7};
    EXPECT_THROW(confusion_matrix(c, a, kClasses), ValidationError);
    const std::vector<std::string> s{"LumA", "Normal"}, u{"LumA", "LumB"};
    EXPECT_THROW(confusion_matrix(std::span<const std::string>(s), std::span<const std::string>(u), kClasses),
                 ValidationError);
}

TEST(Metrics, SymmetricBalancedMatrix) {
    const auto cm = from_counts({{8, 1, 1}, {1, 8, 1}, {1, 1, 8}});
    const auto m = macro_metrics(cm);
    EXPECT_DOUBLE_EQ(m.precision, m.sensitivity);
}

TEST(Bootstrap, ConstantMetricHasZeroWidth) {
    const auto ci = bootstrap_ci([](std::span<const std::size_t>) { return std::optional<double>(0.42); }, 30, 200);
    EXPECT_EQ(ci.lower, 0.42);
    EXPECT_EQ(ci.upper, 0.42);
    EXPECT_EQ(ci.point, 0.42);
}

TEST(Bootstrap, TwoRecordsMatchEnumeration) {
    // values {0, 1}: resample means are 0 (prob 1/4), 0.5 (1/2), 1 (1/4),
    // so the 2.5 / 97.5 percentiles of 1000 draws are 0 and 1.
    const std::vector<double> v{0.0, 1.0};
    auto mean = [&](std::span<const std::size_t> idx) {
        double s = 0;
        for (auto i : idx) s += v[i];
        return std::optional<double>(s / static_cast<double>(idx.size()));
    };
    const auto ci = bootstrap_ci(mean, 2, 1000, 0.95, 17);
    EXPECT_EQ(ci.point, 0.5);
    EXPECT_EQ(ci.lower, 0.0);
    EXPECT_EQ(ci.upper, 1.0);
    // a 40% interval lies inside the middle mass
    const auto narrow = bootstrap_ci(mean, 2, 1000, 0.4, 17);
    EXPECT_EQ(narrow.lower, 0.5);
    EXPECT_EQ(narrow.upper, 0.5);
}

TEST(Bootstrap, DeterministicAndSeedSensitive) {
    Xoshiro256 rng(4);
    std::vector<double> v(50);
    for (auto& x : v) x = rng.uniform();
    auto mean = [&](std::span<const std::size_t> idx) {
        double s = 0;
        for (auto i : idx) s += v[i];
        return std::optional<double>(s / static_cast<double>(idx.size()));
    };
    const auto a = bootstrap_ci(mean, v.size(), 300, 0.95, 5), b = bootstrap_ci(mean, v.size(), 300, 0.95, 5);
    EXPECT_EQ(a.lower, b.lower);
    EXPECT_EQ(a.upper, b.upper);
    const auto c = bootstrap_ci(mean, v.size(), 300, 0.95, 6);
    EXPECT_NE(a.lower, c.lower);
    EXPECT_LE(a.lower, a.point);
    EXPECT_GE(a.upper, a.point);
}

TEST(Bootstrap, CoverageOfBernoulliMean) {
    int covered = 0;
    for (std::uint64_t trial = 0; trial < 100; ++trial) {
        Xoshiro256 rng(derive_seed(99, trial));
        std::vector<double> v(200);
        for (auto& x : v) x = rng.uniform() < 0.7 ? 1.0 : 0.0;
        auto mean = [&](std::span<const std::size_t> idx) {
            double s = 0;
            for (auto i : idx) s += v[i];
            return std::optional<double>(s / static_cast<double>(idx.size()));
        };
        const auto ci = bootstrap_ci(mean, v.size(), 500, 0.95, trial);
        covered += ci.lower <= 0.7 && 0.7 <= ci.upper;
    }
    EXPECT_GE(covered, 90);
}

TEST(Bootstrap, UndefinedResamplesAreRedrawnThenFail) {
    // defined only when record 0 is present: some resamples are redrawn
    auto needs_zero = [](std::span<const std::size_t> idx) -> std::optional<double> {
        if (std::find(idx.begin(), idx.end(), 0u) == idx.end()) return std::nullopt;
        return 1.0;
    };
    EXPECT_NO_THROW(bootstrap_ci(needs_zero, 3, 100, 0.95, 1));
    auto never = [](std::span<const std::size_t> idx) -> std::optional<double> {
        if (idx.size() == 2 && idx[0] == 0 && idx[1] == 1) return 1.0;  // only the full data
        return std::nullopt;
    };
    EXPECT_THROW(bootstrap_ci(never, 2, 50, 0.95, 1, 0), RuntimeError);
    EXPECT_THROW(bootstrap_ci(needs_zero, 1, 10), ValidationError);
}

TEST(Evaluate, ReportLayout) {
    std::vector<EvalRecord> records;
    Xoshiro256 rng(8);
    for (int i = 0; i < 40; ++i) {
        const int truth = i % 4;
        const int pred = rng.uniform() < 0.8 ? truth : static_cast<int>(rng.below(4));
        std::vector<double> proba(4, 0.1);
        proba[pred] = 0.7;
        records.push_back({"w" + std::to_string(i), truth, pred, proba});
    }
    const auto report = evaluate(records, kClasses, 200, 0.95, 3);
    ASSERT_EQ(report.rows.size(), 5u);
    EXPECT_EQ(report.rows.back().name, "macro");
    for (const auto& r : report.rows) {
        EXPECT_LE(r.f1.lower, r.f1.value);
        EXPECT_GE(r.f1.upper, r.f1.value);
    }
    EXPECT_EQ(report.rows[0].n, 10u);
    ASSERT_TRUE(report.rows[0].auprc);
    const auto csv = report_csv(report);
    EXPECT_EQ(csv.substr(0, csv.find('\n')),
              "class,n_wsis,f1,f1_lower,f1_upper,precision,precision_lower,precision_upper,sensitivity,"
              "sensitivity_lower,sensitivity_upper,specificity,specificity_lower,specificity_upper,auprc,auprc_lower,"
              "auprc_upper");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 6);
    const auto text = report_text(report);
    EXPECT_NE(text.find("Macro-average"), std::string::npos);
    EXPECT_NE(text.find("F1 score"), std::string::npos);
    const auto conf = confusion_csv(report.confusion);
    EXPECT_EQ(conf.substr(0, conf.find('\n')), "truth\\predicted,LumA,LumB,HER2,Basal");
    EXPECT_DOUBLE_EQ(report.macro_accuracy, macro_metrics(report.confusion).accuracy);
}
