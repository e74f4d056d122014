#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace histotype {

struct PrPoint {
    double threshold = 0.0;
    double precision = 1.0;
    double recall = 0.0;
};

/// Precision/recall at every candidate threshold, ascending. Candidates are
/// the midpoints between adjacent distinct scores plus one sentinel just
/// below the smallest score and one just above the largest. A sample is
/// predicted positive when score >= threshold; with nothing predicted the
/// precision is taken as 1.
struct PrCurve {
    std::vector<PrPoint> points;
    std::size_t positives = 0;
    std::size_t total = 0;
};

struct ThresholdChoice {
    std::string classifier_id;
    double threshold = 0.5;
    std::string criterion = "f1";
    double criterion_value = 0.0;
};

PrCurve pr_curve(std::span<const double> scores, std::span<const int> labels);

/// F-beta; beta = 1 is F1. Zero when precision + recall is zero.
double f_beta(double precision, double recall, double beta = 1.0);

/// Candidate threshold with the largest F-beta; the smallest threshold wins
/// ties.
ThresholdChoice optimal_threshold(std::span<const double> scores, std::span<const int> labels,
                                  const std::string& classifier_id = {}, double beta = 1.0);

/// Step-wise average precision, sum_k (R_k - R_{k-1}) P_k over distinct
/// scores taken as thresholds in descending order.
double average_precision(std::span<const double> scores, std::span<const int> labels);

/// CSV `classifier_id,threshold,criterion,criterion_value`.
void save_thresholds(const std::filesystem::path& path, const std::vector<ThresholdChoice>& choices);
std::vector<ThresholdChoice> load_thresholds(const std::filesystem::path& path);

}  // namespace histotype
