#pragma once

// Tile scoring through external scorer processes.
//
// Wire protocol (UTF-8, one message per line, scorer stdin/stdout):
//   scorer -> READY
//   gateway -> {"tile_id": "...", "path": "..."}          one per tile
//   scorer -> {"tile_id": "...", "target": x, "rest": y}  one per request, any order
//             {"tile_id": "...", "error": "..."}          tile could not be scored
//   gateway closes stdin when every request is written
//   scorer -> DONE

#include "histotype/common.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace histotype {

inline constexpr std::string_view kTumorClassifier = "tumor";

struct ScorePair {
    double target = 0.0;
    double rest = 0.0;
    bool operator==(const ScorePair&) const = default;
};

struct ScoreRecord {
    std::string tile_id;
    std::string classifier_id;
    double target = 0.0;
    double rest = 0.0;
};

struct ScoreValidation {
    double pair_sum_tolerance = 1e-4;
    bool pair_sum_warn_only = false;
};

/// Throws ProtocolError naming the tile if a score is outside [0, 1] or (in
/// strict mode) the pair does not sum to one.
void validate_score(const ScoreRecord& r, const ScoreValidation& v = {});

class ScoreTable {
public:
    using Key = std::pair<std::string, std::string>;  // tile_id, classifier_id

    /// Throws ValidationError on a duplicate key.
    void insert(const ScoreRecord& r);
    std::optional<ScorePair> find(const std::string& tile_id, std::string_view classifier_id) const;
    bool contains(const std::string& tile_id, std::string_view classifier_id) const;

    /// Adds every record of `other`; duplicates are an error.
    void merge(const ScoreTable& other);

    std::size_t size() const { return records_.size(); }
    bool empty() const { return records_.empty(); }
    const std::map<Key, ScorePair>& records() const { return records_; }
    std::set<std::string> tile_ids() const;

    bool operator==(const ScoreTable&) const = default;

private:
    std::map<Key, ScorePair> records_;
};

/// CSV `tile_id,classifier_id,target,rest`, sorted by key.
void save_scores(const std::filesystem::path& path, const ScoreTable& table);
ScoreTable load_scores(const std::filesystem::path& path, const ScoreValidation& v = {});

struct TileRequest {
    std::string tile_id;
    std::filesystem::path path;
};

/// Raised when a session ends without scores for every requested tile. The
/// records that did arrive are kept.
class ScorerIncompleteError : public ProtocolError {
public:
    ScorerIncompleteError(const std::string& what, std::vector<std::string> unscored, ScoreTable partial)
        : ProtocolError(what), unscored_(std::move(unscored)), partial_(std::move(partial)) {}
    const std::vector<std::string>& unscored() const { return unscored_; }
    const ScoreTable& partial() const { return partial_; }

private:
    std::vector<std::string> unscored_;
    ScoreTable partial_;
};

class Scorer {
public:
    virtual ~Scorer() = default;
    virtual ScoreTable score(std::span<const TileRequest> tiles, const std::string& classifier_id) = 0;
};

/// Deterministic stand-in for a trained tile classifier. For classifier c the
/// target score of a tile is s * [truth == c] + (1 - s) * u, where u is a
/// uniform draw keyed by (seed, tile_id, classifier_id); rest = 1 - target.
struct SyntheticScorerSpec {
    std::map<std::string, std::string> truth;  // tile_id -> class name
    double signal = 1.0;
    std::uint64_t seed = 0;
};

class SyntheticScorer final : public Scorer {
public:
    explicit SyntheticScorer(SyntheticScorerSpec spec);
    ScoreTable score(std::span<const TileRequest> tiles, const std::string& classifier_id) override;

private:
    SyntheticScorerSpec spec_;
};

/// Runs `command` through /bin/sh once per batch. "{classifier}" in the
/// command is replaced by the classifier id. With workers > 1 the tiles are
/// cut into contiguous batches scored by concurrent processes.
class ProcessScorer final : public Scorer {
public:
    ProcessScorer(std::string command, int workers = 1, ScoreValidation validation = {});
    ScoreTable score(std::span<const TileRequest> tiles, const std::string& classifier_id) override;

private:
    ScoreTable run_session(std::span<const TileRequest> tiles, const std::string& classifier_id) const;

    std::string command_;
    int workers_;
    ScoreValidation validation_;
};

/// Order-independent scoring entry point; also checks totality.
ScoreTable score_tiles(Scorer& scorer, std::span<const TileRequest> tiles, const std::string& classifier_id);

/// Tiles whose tumor score is >= threshold. With an empty `tile_ids` every
/// tile carrying a tumor record is considered; a requested tile without a
/// tumor record is an error.
std::set<std::string> filter_tumor_tiles(const ScoreTable& table, double tumor_threshold,
                                         std::span<const std::string> tile_ids = {});

}  // namespace histotype
