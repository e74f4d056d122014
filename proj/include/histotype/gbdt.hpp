#pragma once

// Multiclass gradient-boosted regression trees with a softmax readout.
//
// Each round fits one tree per class to the Newton statistics of the softmax
// cross-entropy at the current raw scores:
//   g_i = p_ik - [y_i == k],   h_i = p_ik (1 - p_ik)
// Splits are found by exact greedy search over midpoints of adjacent distinct
// feature values, maximising
//   gain = 1/2 [G_L^2/(H_L+lambda) + G_R^2/(H_R+lambda) - G^2/(H+lambda)] - gamma
// and leaves take the weight -G / (H + lambda). Tree outputs are added to the
// raw scores scaled by the learning rate.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace histotype::gbdt {

struct TreeNode {
    int feature = -1;  // -1 marks a leaf
    double split = 0.0;
    int left = -1;
    int right = -1;
    double weight = 0.0;

    bool is_leaf() const { return feature < 0; }
    bool operator==(const TreeNode&) const = default;
};

/// Rows with value < split go left.
struct Tree {
    std::vector<TreeNode> nodes;  // nodes[0] is the root

    double predict(std::span<const double> row) const;
    int depth() const;
    bool operator==(const Tree&) const = default;
};

struct TrainConfig {
    int n_rounds = 50;
    double learning_rate = 0.1;
    double lambda = 1.0;
    double gamma = 0.0;
    int max_depth = 3;
    double min_child_weight = 1.0;
    std::uint64_t seed = 0;  // training is deterministic; kept for provenance

    void validate() const;
};

struct GbdtModel {
    int n_classes = 4;
    int n_features = 8;
    double learning_rate = 0.1;
    double lambda = 1.0;
    double gamma = 0.0;
    int max_depth = 3;
    double min_child_weight = 1.0;
    double base_score = 0.0;
    std::vector<std::vector<Tree>> rounds;  // rounds[r][k]

    bool operator==(const GbdtModel&) const = default;
};

using Matrix = std::vector<std::vector<double>>;

GbdtModel train(const Matrix& features, std::span<const int> labels, const TrainConfig& config,
                int n_classes = 4);

/// Accumulated per-class raw scores.
std::vector<double> raw_scores(const GbdtModel& model, std::span<const double> row);

/// Softmax of the raw scores.
std::vector<double> predict_proba(const GbdtModel& model, std::span<const double> row);

/// Argmax of predict_proba; the lowest class index wins ties.
int predict(const GbdtModel& model, std::span<const double> row);

/// Mean softmax cross-entropy over a dataset.
double log_loss(const GbdtModel& model, const Matrix& features, std::span<const int> labels);

/// Best split for a single node over all features, exposed for testing.
struct SplitCandidate {
    int feature = -1;
    double split = 0.0;
    double gain = 0.0;
};
SplitCandidate find_best_split(const Matrix& features, std::span<const std::size_t> rows,
                               std::span<const double> grad, std::span<const double> hess, double lambda,
                               double gamma, double min_child_weight);

std::string serialize(const GbdtModel& model);
GbdtModel deserialize(const std::string& text);
void save_model(const std::filesystem::path& path, const GbdtModel& model);
GbdtModel load_model(const std::filesystem::path& path);

}  // namespace histotype::gbdt
