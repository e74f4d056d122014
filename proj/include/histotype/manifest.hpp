#pragma once

#include "histotype/common.hpp"
#include "histotype/tiling.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace histotype {

enum class Task { TumorDetection, Subtyping };

struct SlideRecord {
    std::string wsi_id;
    std::string patient_id;
    std::string label;  // canonical name, e.g. "LumA" or "tumor"
    std::filesystem::path image_path;
    double source_mpp = 0.0;
};

struct CohortManifest {
    Task task = Task::Subtyping;
    std::vector<SlideRecord> records;

    const SlideRecord& find(const std::string& wsi_id) const;
};

/// Manifest CSV `wsi_id,patient_id,label,image_path,source_mpp`. Relative
/// image paths resolve against the manifest's directory.
CohortManifest load_manifest(const std::filesystem::path& path, Task task = Task::Subtyping);
void save_manifest(const std::filesystem::path& path, const CohortManifest& manifest);

/// Returns the canonical label or throws on anything outside the task's set.
std::string canonical_label(std::string_view label, Task task);

enum class SplitSet { CnnTrain = 0, CnnVal = 1, XgbSet = 2, Test = 3 };

std::string_view split_set_name(SplitSet s);
std::optional<SplitSet> parse_split_set(std::string_view name);

struct SplitAssignment {
    std::map<std::string, SplitSet> assignment;
    std::array<double, 4> fractions{};
    std::uint64_t seed = 0;

    std::vector<std::string> members(SplitSet set) const;
};

/// Patient-level stratified partition into as many groups as `fractions`.
/// Patients take their majority label (ties: lexicographically smallest);
/// each class's patients are sorted, shuffled and cut at the cumulative
/// fractions (boundary = round(n * cumulative)). Returns wsi_id -> group.
std::map<std::string, std::size_t> stratified_patient_partition(std::span<const SlideRecord> records,
                                                                std::span<const double> fractions,
                                                                std::uint64_t seed);

/// Split into cnn_train / cnn_val / xgb_set / test.
SplitAssignment stratified_patient_split(const CohortManifest& manifest,
                                         const std::array<double, 4>& fractions, std::uint64_t seed);

/// CSV `wsi_id,set`, sorted by wsi_id.
std::string serialize_split(const SplitAssignment& split);
void save_split(const std::filesystem::path& path, const SplitAssignment& split);
SplitAssignment load_split(const std::filesystem::path& path);

struct QuotaPolicy {
    /// nullopt means "all". Labels without an entry are also taken in full.
    std::map<std::string, std::optional<std::size_t>> quotas;

    std::optional<std::size_t> quota_for(const std::string& label) const;
};

/// min(quota, n) tiles drawn uniformly without replacement; output keeps the
/// input order.
std::vector<TileRecord> sample_tile_quota(std::span<const TileRecord> tiles, const std::string& label,
                                          const QuotaPolicy& policy, std::uint64_t seed);

struct OvrExample {
    TileRecord tile;
    Subtype source = Subtype::LumA;
    bool is_target = false;
};

/// All target tiles plus floor(n_c / 3) tiles from each other class.
std::vector<OvrExample> build_ovr_dataset(Subtype target,
                                          const std::map<Subtype, std::vector<TileRecord>>& tiles_by_class,
                                          std::uint64_t seed);

}  // namespace histotype
