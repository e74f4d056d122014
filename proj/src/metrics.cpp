#include "histotype/metrics.hpp"

#include "histotype/common.hpp"
#include "histotype/io.hpp"
#include "histotype/rng.hpp"
#include "histotype/stats.hpp"
#include "histotype/thresholding.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace histotype::metrics {

namespace {

double ratio(double num, double den) { return den > 0 ? num / den : 0.0; }

std::size_t class_index(const std::string& name, const std::vector<std::string>& classes) {
    auto it = std::find(classes.begin(), classes.end(), name);
    if (it == classes.end()) throw ValidationError(fmt::format("unknown class label '{}'", name));
    return static_cast<std::size_t>(it - classes.begin());
}

ConfusionMatrix empty_matrix(const std::vector<std::string>& classes) {
    if (classes.empty()) throw ValidationError("confusion matrix needs at least one class");
    ConfusionMatrix cm;
    cm.classes = classes;
    cm.counts.assign(classes.size(), std::vector<std::size_t>(classes.size(), 0));
    return cm;
}

ConfusionMatrix matrix_of(std::span<const EvalRecord> records, std::span<const std::size_t> idx,
                          const std::vector<std::string>& classes) {
    auto cm = empty_matrix(classes);
    for (auto i : idx) ++cm.counts[records[i].truth][records[i].predicted];
    return cm;
}

std::optional<double> auprc_of(std::span<const EvalRecord> records, std::span<const std::size_t> idx,
                               std::size_t c) {
    std::vector<double> scores;
    std::vector<int> labels;
    scores.reserve(idx.size());
    labels.reserve(idx.size());
    int positives = 0;
    for (auto i : idx) {
        scores.push_back(records[i].proba[c]);
        labels.push_back(records[i].truth == static_cast<int>(c) ? 1 : 0);
        positives += labels.back();
    }
    if (positives == 0) return std::nullopt;
    return average_precision(scores, labels);
}

}  // namespace

std::size_t ConfusionMatrix::total() const {
    std::size_t t = 0;
    for (const auto& row : counts) t = std::accumulate(row.begin(), row.end(), t);
    return t;
}

ConfusionMatrix confusion_matrix(std::span<const int> predictions, std::span<const int> truths,
                                 const std::vector<std::string>& classes) {
    if (predictions.size() != truths.size())
        throw ValidationError(fmt::format("{} predictions but {} truths", predictions.size(), truths.size()));
    auto cm = empty_matrix(classes);
    const int k = static_cast<int>(classes.size());
    for (std::size_t i = 0; i < truths.size(); ++i) {
        if (truths[i] < 0 || truths[i] >= k || predictions[i] < 0 || predictions[i] >= k)
            throw ValidationError(fmt::format("label index out of range at position {}", i));
        ++cm.counts[truths[i]][predictions[i]];
    }
    return cm;
}

ConfusionMatrix confusion_matrix(std::span<const std::string> predictions, std::span<const std::string> truths,
                                 const std::vector<std::string>& classes) {
    if (predictions.size() != truths.size())
        throw ValidationError(fmt::format("{} predictions but {} truths", predictions.size(), truths.size()));
    auto cm = empty_matrix(classes);
    for (std::size_t i = 0; i < truths.size(); ++i)
        ++cm.counts[class_index(truths[i], classes)][class_index(predictions[i], classes)];
    return cm;
}

double f1_score(double precision, double sensitivity) {
    const double s = precision + sensitivity;
    return s > 0 ? 2.0 * precision * sensitivity / s : 0.0;
}

ClassMetrics class_metrics(const ConfusionMatrix& cm, std::size_t c) {
    if (c >= cm.size()) throw ValidationError(fmt::format("class index {} out of range", c));
    const double n = static_cast<double>(cm.total());
    const double tp = static_cast<double>(cm.counts[c][c]);
    double row = 0, col = 0;
    for (std::size_t j = 0; j < cm.size(); ++j) {
        row += static_cast<double>(cm.counts[c][j]);
        col += static_cast<double>(cm.counts[j][c]);
    }
    const double fp = col - tp, fn = row - tp, tn = n - tp - fp - fn;
    ClassMetrics m;
    m.precision = ratio(tp, tp + fp);
    m.sensitivity = ratio(tp, tp + fn);
    m.specificity = ratio(tn, tn + fp);
    m.f1 = f1_score(m.precision, m.sensitivity);
    return m;
}

MacroMetrics macro_average(std::span<const ClassMetrics> per_class) {
    MacroMetrics m;
    if (per_class.empty()) return m;
    for (const auto& c : per_class) {
        m.f1 += c.f1;
        m.precision += c.precision;
        m.sensitivity += c.sensitivity;
        m.specificity += c.specificity;
    }
    const double k = static_cast<double>(per_class.size());
    m.f1 /= k;
    m.precision /= k;
    m.sensitivity /= k;
    m.specificity /= k;
    m.accuracy = m.sensitivity;
    return m;
}

MacroMetrics macro_metrics(const ConfusionMatrix& cm) {
    std::vector<ClassMetrics> per;
    for (std::size_t c = 0; c < cm.size(); ++c) per.push_back(class_metrics(cm, c));
    return macro_average(per);
}

BootstrapCi bootstrap_ci(const IndexMetric& metric, std::size_t n_records, int n_resamples, double level,
                         std::uint64_t seed, int max_retries) {
    if (n_records < 2) throw ValidationError("bootstrap needs at least two records");
    if (n_resamples < 1) throw ValidationError("bootstrap needs at least one resample");
    if (!(level > 0 && level < 1)) throw ValidationError("confidence level must be in (0, 1)");

    std::vector<std::size_t> all(n_records);
    std::iota(all.begin(), all.end(), 0);
    const auto point = metric(all);
    if (!point) throw RuntimeError("metric is undefined on the full data");

    std::vector<double> values;
    values.reserve(n_resamples);
    std::vector<std::size_t> idx(n_records);
    for (int r = 0; r < n_resamples; ++r) {
        Xoshiro256 rng(derive_seed(seed, static_cast<std::uint64_t>(r)));
        std::optional<double> v;
        for (int attempt = 0; attempt <= max_retries && !v; ++attempt) {
            for (auto& i : idx) i = static_cast<std::size_t>(rng.below(n_records));
            v = metric(idx);
        }
        if (!v)
            throw RuntimeError(
                fmt::format("metric undefined on resample {} after {} redraws", r, max_retries));
        values.push_back(*v);
    }

    BootstrapCi ci;
    ci.point = *point;
    ci.level = level;
    ci.n_resamples = n_resamples;
    ci.seed = seed;
    const double tail = 100.0 * (1.0 - level) / 2.0;
    auto copy = values;
    ci.lower = std::min(percentile(values, tail), ci.point);
    ci.upper = std::max(percentile(copy, 100.0 - tail), ci.point);
    return ci;
}

EvaluationReport evaluate(std::span<const EvalRecord> records, const std::vector<std::string>& classes,
                          int n_resamples, double level, std::uint64_t seed) {
    const std::size_t k = classes.size();
    for (const auto& r : records) {
        if (r.truth < 0 || r.truth >= static_cast<int>(k) || r.predicted < 0 || r.predicted >= static_cast<int>(k))
            throw ValidationError(fmt::format("record {} has a label outside the class set", r.wsi_id));
        if (r.proba.size() != k)
            throw ValidationError(fmt::format("record {} has {} probabilities, expected {}", r.wsi_id,
                                              r.proba.size(), k));
    }

    EvaluationReport report;
    report.level = level;
    report.n_resamples = n_resamples;
    std::vector<std::size_t> all(records.size());
    std::iota(all.begin(), all.end(), 0);
    report.confusion = matrix_of(records, all, classes);
    report.macro_accuracy = macro_metrics(report.confusion).accuracy;

    auto with_ci = [&](const IndexMetric& fn) {
        auto point = fn(all);
        MetricWithCi m{point.value_or(0.0), point.value_or(0.0), point.value_or(0.0)};
        if (!point || records.size() < 2) return m;
        try {
            auto ci = bootstrap_ci(fn, records.size(), n_resamples, level, seed);
            m.lower = ci.lower;
            m.upper = ci.upper;
        } catch (const RuntimeError& e) {
            spdlog::warn("confidence interval unavailable: {}", e.what());
        }
        return m;
    };
    auto class_fn = [&](std::size_t c, double ClassMetrics::*field) -> IndexMetric {
        return [&, c, field](std::span<const std::size_t> idx) -> std::optional<double> {
            return class_metrics(matrix_of(records, idx, classes), c).*field;
        };
    };
    auto macro_fn = [&](double MacroMetrics::*field) -> IndexMetric {
        return [&, field](std::span<const std::size_t> idx) -> std::optional<double> {
            return macro_metrics(matrix_of(records, idx, classes)).*field;
        };
    };

    for (std::size_t c = 0; c < k; ++c) {
        ClassReportRow row;
        row.name = classes[c];
        for (const auto& r : records) row.n += r.truth == static_cast<int>(c);
        row.f1 = with_ci(class_fn(c, &ClassMetrics::f1));
        row.precision = with_ci(class_fn(c, &ClassMetrics::precision));
        row.sensitivity = with_ci(class_fn(c, &ClassMetrics::sensitivity));
        row.specificity = with_ci(class_fn(c, &ClassMetrics::specificity));
        if (row.n > 0)
            row.auprc = with_ci([&, c](std::span<const std::size_t> idx) { return auprc_of(records, idx, c); });
        report.rows.push_back(std::move(row));
    }

    ClassReportRow macro;
    macro.name = "macro";
    macro.n = records.size();
    macro.f1 = with_ci(macro_fn(&MacroMetrics::f1));
    macro.precision = with_ci(macro_fn(&MacroMetrics::precision));
    macro.sensitivity = with_ci(macro_fn(&MacroMetrics::sensitivity));
    macro.specificity = with_ci(macro_fn(&MacroMetrics::specificity));
    report.rows.push_back(std::move(macro));
    return report;
}

std::string report_csv(const EvaluationReport& report) {
    std::string out =
        "class,n_wsis,f1,f1_lower,f1_upper,precision,precision_lower,precision_upper,sensitivity,"
        "sensitivity_lower,sensitivity_upper,specificity,specificity_lower,specificity_upper,auprc,auprc_lower,"
        "auprc_upper\n";
    auto cell = [](const MetricWithCi& m) {
        return fmt::format("{},{},{}", io::format_real(m.value), io::format_real(m.lower), io::format_real(m.upper));
    };
    for (const auto& r : report.rows) {
        out += fmt::format("{},{},{},{},{},{},{}\n", r.name, r.n, cell(r.f1), cell(r.precision), cell(r.sensitivity),
                           cell(r.specificity), r.auprc ? cell(*r.auprc) : std::string(",,"));
    }
    return out;
}

std::string report_text(const EvaluationReport& report) {
    auto cell = [](const MetricWithCi& m) { return fmt::format("{:.3f} ({:.3f}-{:.3f})", m.value, m.lower, m.upper); };
    std::string out = fmt::format("{:<16}{:<24}{:<24}{:<24}{:<24}\n", "Class", "F1 score", "Precision",
                                  "Sensitivity", "Specificity");
    for (const auto& r : report.rows) {
        const std::string name = r.name == "macro" ? "Macro-average" : r.name;
        out += fmt::format("{:<16}{:<24}{:<24}{:<24}{:<24}\n", name, cell(r.f1), cell(r.precision),
                           cell(r.sensitivity), cell(r.specificity));
    }
    out += fmt::format("\nMacro accuracy (mean per-class sensitivity): {:.3f}\n", report.macro_accuracy);
    out += fmt::format("Intervals: {:.0f}% percentile bootstrap over slides, {} resamples\n", report.level * 100,
                       report.n_resamples);
    out += "\nAUPRC\n";
    for (const auto& r : report.rows)
        if (r.auprc) out += fmt::format("{:<16}{}\n", r.name, cell(*r.auprc));
    return out;
}

std::string confusion_csv(const ConfusionMatrix& cm) {
    std::string out = "truth\\predicted";
    for (const auto& c : cm.classes) out += "," + c;
    out += "\n";
    for (std::size_t i = 0; i < cm.size(); ++i) {
        out += cm.classes[i];
        for (auto v : cm.counts[i]) out += fmt::format(",{}", v);
        out += "\n";
    }
    return out;
}

}  // namespace histotype::metrics
