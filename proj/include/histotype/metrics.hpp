#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace histotype::metrics {

/// Rows are true classes, columns predicted classes.
struct ConfusionMatrix {
    std::vector<std::string> classes;
    std::vector<std::vector<std::size_t>> counts;

    std::size_t size() const { return classes.size(); }
    std::size_t total() const;
};

ConfusionMatrix confusion_matrix(std::span<const int> predictions, std::span<const int> truths,
                                 const std::vector<std::string>& classes);

/// Same, with labels given by name; unknown names are an error.
ConfusionMatrix confusion_matrix(std::span<const std::string> predictions, std::span<const std::string> truths,
                                 const std::vector<std::string>& classes);

struct ClassMetrics {
    double precision = 0.0;
    double sensitivity = 0.0;
    double specificity = 0.0;
    double f1 = 0.0;
};

/// Harmonic mean of precision and sensitivity; 0 when both are 0.
double f1_score(double precision, double sensitivity);

/// One-vs-rest reduction of class c. Undefined ratios (0/0) are 0.
ClassMetrics class_metrics(const ConfusionMatrix& cm, std::size_t c);

struct MacroMetrics {
    double f1 = 0.0;
    double precision = 0.0;
    double sensitivity = 0.0;
    double specificity = 0.0;
    double accuracy = 0.0;  // mean per-class sensitivity
};

MacroMetrics macro_metrics(const ConfusionMatrix& cm);

/// Unweighted mean of per-class entries.
MacroMetrics macro_average(std::span<const ClassMetrics> per_class);

struct BootstrapCi {
    double point = 0.0;
    double lower = 0.0;
    double upper = 0.0;
    double level = 0.95;
    int n_resamples = 0;
    std::uint64_t seed = 0;
};

/// Metric over a multiset of record indices; nullopt when undefined.
using IndexMetric = std::function<std::optional<double>(std::span<const std::size_t>)>;

/// Percentile bootstrap over records resampled with replacement. Resample r
/// draws from its own stream derive_seed(seed, r); an undefined resample is
/// redrawn from the same stream up to `max_retries` times. The interval is
/// widened to contain the full-data point estimate if needed.
BootstrapCi bootstrap_ci(const IndexMetric& metric, std::size_t n_records, int n_resamples = 1000,
                         double level = 0.95, std::uint64_t seed = 0, int max_retries = 100);

/// Per-slide evaluation record: class indices plus class probabilities.
struct EvalRecord {
    std::string wsi_id;
    int truth = 0;
    int predicted = 0;
    std::vector<double> proba;
};

struct MetricWithCi {
    double value = 0.0;
    double lower = 0.0;
    double upper = 0.0;
};

struct ClassReportRow {
    std::string name;  // class name or "macro"
    std::size_t n = 0;
    MetricWithCi f1, precision, sensitivity, specificity;
    std::optional<MetricWithCi> auprc;  // absent when the class has no positives
};

struct EvaluationReport {
    ConfusionMatrix confusion;
    std::vector<ClassReportRow> rows;  // classes in order, then macro
    double macro_accuracy = 0.0;
    double level = 0.95;
    int n_resamples = 0;
};

EvaluationReport evaluate(std::span<const EvalRecord> records, const std::vector<std::string>& classes,
                          int n_resamples = 1000, double level = 0.95, std::uint64_t seed = 0);

/// `class,n_wsis,f1,f1_lower,f1_upper,precision,...,specificity_upper,auprc,auprc_lower,auprc_upper`
std::string report_csv(const EvaluationReport& report);

/// Fixed-width table: one row per class and a macro-average row.
std::string report_text(const EvaluationReport& report);

/// CSV with a `truth\predicted` header row.
std::string confusion_csv(const ConfusionMatrix& cm);

}  // namespace histotype::metrics
