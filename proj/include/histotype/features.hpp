#pragma once

#include "histotype/common.hpp"
#include "histotype/scorer.hpp"
#include "histotype/thresholding.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace histotype {

inline constexpr std::size_t kNumFeatures = 8;

/// Column names in feature order: (target, not-target) for LumA, LumB, HER2,
/// Basal.
extern const std::array<std::string_view, kNumFeatures> kFeatureColumns;

enum class CountRule { Inclusive, Strict };  // score >= t  vs  score > t

/// True when the tile counts toward the classifier's target class.
bool classify_tile(const ScorePair& scores, double threshold, CountRule rule = CountRule::Inclusive);

struct WsiFeatureVector {
    std::string wsi_id;
    std::array<std::size_t, kNumFeatures> counts{};
    std::size_t n_tiles = 0;

    bool degenerate() const { return n_tiles == 0; }
};

/// Per-subtype thresholds in declared class order, looked up by classifier
/// id ("LumA", "LumB", "HER2", "Basal").
std::array<double, kNumSubtypes> thresholds_by_class(const std::vector<ThresholdChoice>& choices);

/// Counts, for each subtype classifier, the tiles at/above and below its
/// threshold. Every tile must carry all four subtype records.
WsiFeatureVector aggregate_counts(const std::string& wsi_id, const ScoreTable& table,
                                  std::span<const std::string> tile_ids,
                                  const std::array<double, kNumSubtypes>& thresholds,
                                  CountRule rule = CountRule::Inclusive);

struct FeatureOptions {
    CountRule rule = CountRule::Inclusive;
    bool normalize = false;     // counts / n_tiles instead of raw counts
    std::size_t max_tiles = 0;  // random per-slide tile cap; 0 keeps all
    std::uint64_t seed = 0;
};

struct FeatureMatrix {
    std::vector<std::string> wsi_ids;  // ascending
    std::vector<std::size_t> n_tiles;
    std::vector<std::array<double, kNumFeatures>> rows;
    std::vector<std::optional<Subtype>> labels;
    bool normalized = false;

    std::size_t size() const { return rows.size(); }
};

FeatureMatrix build_feature_matrix(const ScoreTable& table,
                                   const std::map<std::string, std::vector<std::string>>& tiles_by_wsi,
                                   const std::array<double, kNumSubtypes>& thresholds,
                                   const std::map<std::string, Subtype>& labels = {},
                                   const FeatureOptions& options = {});

/// CSV `wsi_id,n_tiles,c_lumA,...,c_not_basal[,label]`.
void save_features(const std::filesystem::path& path, const FeatureMatrix& m);
FeatureMatrix load_features(const std::filesystem::path& path);

}  // namespace histotype
