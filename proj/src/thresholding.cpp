#include "histotype/thresholding.hpp"

#include "histotype/common.hpp"
#include "histotype/io.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <numeric>
#include <set>

namespace histotype {

namespace {

constexpr double kSentinelGap = 1e-9;

void check_inputs(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size())
        throw ValidationError(fmt::format("{} scores but {} labels", scores.size(), labels.size()));
    if (std::none_of(labels.begin(), labels.end(), [](int l) { return l != 0; }))
        throw ValidationError("precision-recall analysis needs at least one positive label");
}

// Distinct scores descending, with the positive and total counts at each.
struct Level {
    double score;
    std::size_t pos;
    std::size_t all;
};

std::vector<Level> levels_descending(std::span<const double> scores, std::span<const int> labels) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
    std::vector<Level> levels;
    for (auto i : order) {
        if (levels.empty() || levels.back().score != scores[i]) levels.push_back({scores[i], 0, 0});
        levels.back().all += 1;
        levels.back().pos += labels[i] != 0 ? 1 : 0;
    }
    return levels;
}

}  // namespace

double f_beta(double precision, double recall, double beta) {
    const double b2 = beta * beta;
    const double denom = b2 * precision + recall;
    return denom > 0 ? (1 + b2) * precision * recall / denom : 0.0;
}

PrCurve pr_curve(std::span<const double> scores, std::span<const int> labels) {
    check_inputs(scores, labels);
    const auto levels = levels_descending(scores, labels);

    PrCurve curve;
    curve.total = scores.size();
    for (const auto& l : levels) curve.positives += l.pos;

    auto point = [&](double t, std::size_t tp, std::size_t predicted) {
        PrPoint p;
        p.threshold = t;
        p.precision = predicted == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(predicted);
        p.recall = static_cast<double>(tp) / static_cast<double>(curve.positives);
        return p;
    };

    // Walk from the top: above the max nothing is predicted; each midpoint
    // admits one more distinct level.
    std::vector<PrPoint> desc;
    desc.push_back(point(levels.front().score + kSentinelGap, 0, 0));
    std::size_t tp = 0, predicted = 0;
    for (std::size_t k = 0; k < levels.size(); ++k) {
        tp += levels[k].pos;
        predicted += levels[k].all;
        const double t = k + 1 < levels.size() ? 0.5 * (levels[k].score + levels[k + 1].score)
                                               : levels[k].score - kSentinelGap;
        // keep the bottom sentinel inside [0, 1] for probability scores; with
        // the inclusive rule a threshold of 0 still predicts every sample
        const double lower = levels[k].score >= 0.0 ? std::max(0.0, t) : t;
        desc.push_back(point(k + 1 < levels.size() ? t : lower, tp, predicted));
    }
    curve.points.assign(desc.rbegin(), desc.rend());
    return curve;
}

ThresholdChoice optimal_threshold(std::span<const double> scores, std::span<const int> labels,
                                  const std::string& classifier_id, double beta) {
    const auto curve = pr_curve(scores, labels);
    ThresholdChoice best;
    best.classifier_id = classifier_id;
    best.criterion = beta == 1.0 ? "f1" : fmt::format("f{}", beta);
    best.criterion_value = -1.0;
    for (const auto& p : curve.points) {
        const double f = f_beta(p.precision, p.recall, beta);
        // ascending thresholds: only a clear improvement moves the choice up
        if (f > best.criterion_value + 1e-12) {
            best.criterion_value = f;
            best.threshold = p.threshold;
        }
    }
    return best;
}

double average_precision(std::span<const double> scores, std::span<const int> labels) {
    check_inputs(scores, labels);
    const auto levels = levels_descending(scores, labels);
    std::size_t positives = 0;
    for (const auto& l : levels) positives += l.pos;

    double ap = 0.0, prev_recall = 0.0;
    std::size_t tp = 0, predicted = 0;
    for (const auto& l : levels) {
        tp += l.pos;
        predicted += l.all;
        const double recall = static_cast<double>(tp) / static_cast<double>(positives);
        const double precision = static_cast<double>(tp) / static_cast<double>(predicted);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    return ap;
}

void save_thresholds(const std::filesystem::path& path, const std::vector<ThresholdChoice>& choices) {
    std::string out = "classifier_id,threshold,criterion,criterion_value\n";
    for (const auto& c : choices)
        out += fmt::format("{},{},{},{}\n", c.classifier_id, io::format_real(c.threshold), c.criterion,
                           io::format_real(c.criterion_value));
    io::write_file(path, out);
}

std::vector<ThresholdChoice> load_thresholds(const std::filesystem::path& path) {
    auto table = io::read_csv(path, {"classifier_id", "threshold", "criterion", "criterion_value"});
    std::vector<ThresholdChoice> out;
    std::set<std::string> seen;
    for (const auto& row : table.rows) {
        auto where = fmt::format("{}: line {}", path.string(), row.line);
        ThresholdChoice c;
        c.classifier_id = row.fields[0];
        c.threshold = io::parse_real(row.fields[1], where);
        c.criterion = row.fields[2];
        c.criterion_value = io::parse_real(row.fields[3], where);
        if (!seen.insert(c.classifier_id).second) throw ValidationError(where + ": duplicate classifier");
        out.push_back(std::move(c));
    }
    return out;
}

}  // namespace histotype
