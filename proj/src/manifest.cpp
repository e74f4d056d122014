#include "histotype/manifest.hpp"

#include "histotype/io.hpp"
#include "histotype/rng.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace histotype {

namespace fs = std::filesystem;

const SlideRecord& CohortManifest::find(const std::string& wsi_id) const {
    for (const auto& r : records)
        if (r.wsi_id == wsi_id) return r;
    throw ValidationError(fmt::format("unknown wsi_id '{}'", wsi_id));
}

std::string canonical_label(std::string_view label, Task task) {
    if (task == Task::Subtyping) {
        if (auto s = parse_subtype(label)) return std::string(subtype_name(*s));
    } else {
        if (label == "tumor" || label == "non-tumor") return std::string(label);
    }
    throw ValidationError(fmt::format("unknown label '{}' for {} task", label,
                                      task == Task::Subtyping ? "subtyping" : "tumor-detection"));
}

CohortManifest load_manifest(const fs::path& path, Task task) {
    if (!fs::exists(path)) throw ValidationError(fmt::format("manifest '{}' does not exist", path.string()));
    auto table = io::read_csv(path, {"wsi_id", "patient_id", "label", "image_path", "source_mpp"});

    CohortManifest m;
    m.task = task;
    std::set<std::string> seen;
    const auto base = path.parent_path();
    for (const auto& row : table.rows) {
        auto where = fmt::format("{}: line {}", path.string(), row.line);
        const auto& f = row.fields;
        SlideRecord r;
        r.wsi_id = f[0];
        r.patient_id = f[1];
        if (r.wsi_id.empty() || r.patient_id.empty())
            throw ValidationError(where + ": empty wsi_id or patient_id");
        try {
            r.label = canonical_label(f[2], task);
        } catch (const ValidationError& e) {
            throw ValidationError(where + ": " + e.what());
        }
        r.image_path = fs::path(f[3]);
        if (r.image_path.is_relative()) r.image_path = base / r.image_path;
        r.source_mpp = io::parse_real(f[4], where);
        if (!(r.source_mpp > 0)) throw ValidationError(where + ": source_mpp must be positive");
        if (!seen.insert(r.wsi_id).second)
            throw ValidationError(fmt::format("{}: duplicate wsi_id '{}'", where, r.wsi_id));
        m.records.push_back(std::move(r));
    }
    if (m.records.empty()) throw ValidationError(fmt::format("{}: manifest has no records", path.string()));
    return m;
}

void save_manifest(const fs::path& path, const CohortManifest& manifest) {
    std::string out = "wsi_id,patient_id,label,image_path,source_mpp\n";
    for (const auto& r : manifest.records)
        out += fmt::format("{},{},{},{},{}\n", r.wsi_id, r.patient_id, r.label, r.image_path.generic_string(),
                           io::format_real(r.source_mpp));
    io::write_file(path, out);
}

std::string_view split_set_name(SplitSet s) {
    switch (s) {
        case SplitSet::CnnTrain: return "cnn_train";
        case SplitSet::CnnVal: return "cnn_val";
        case SplitSet::XgbSet: return "xgb_set";
        case SplitSet::Test: return "test";
    }
    return "?";
}

std::optional<SplitSet> parse_split_set(std::string_view name) {
    for (auto s : {SplitSet::CnnTrain, SplitSet::CnnVal, SplitSet::XgbSet, SplitSet::Test})
        if (split_set_name(s) == name) return s;
    return std::nullopt;
}

std::vector<std::string> SplitAssignment::members(SplitSet set) const {
    std::vector<std::string> out;
    for (const auto& [id, s] : assignment)
        if (s == set) out.push_back(id);
    return out;
}

std::map<std::string, std::size_t> stratified_patient_partition(std::span<const SlideRecord> records,
                                                                std::span<const double> fractions,
                                                                std::uint64_t seed) {
    if (fractions.empty()) throw ValidationError("split needs at least one fraction");
    double total = 0.0;
    for (double f : fractions) {
        if (!(f >= 0.0)) throw ValidationError("split fractions must be non-negative");
        total += f;
    }
    if (std::abs(total - 1.0) > 1e-9)
        throw ValidationError(fmt::format("split fractions sum to {}, expected 1", total));

    // patient -> label histogram and member WSIs
    std::map<std::string, std::map<std::string, std::size_t>> label_counts;
    std::map<std::string, std::vector<std::string>> patient_wsis;
    for (const auto& r : records) {
        ++label_counts[r.patient_id][r.label];
        patient_wsis[r.patient_id].push_back(r.wsi_id);
    }

    std::map<std::string, std::vector<std::string>> patients_by_class;
    for (const auto& [patient, counts] : label_counts) {
        // std::map iterates names ascending, so a strict > keeps the
        // lexicographically smallest label on ties.
        const std::string* best = nullptr;
        std::size_t best_n = 0;
        for (const auto& [label, n] : counts) {
            if (n > best_n) {
                best = &label;
                best_n = n;
            }
        }
        if (counts.size() > 1)
            spdlog::debug("patient {} has mixed labels; stratifying as {}", patient, *best);
        patients_by_class[*best].push_back(patient);
    }

    const auto nonempty = static_cast<std::size_t>(
        std::count_if(fractions.begin(), fractions.end(), [](double f) { return f > 0.0; }));

    std::map<std::string, std::size_t> out;
    Xoshiro256 rng(seed);
    for (auto& [label, patients] : patients_by_class) {
        if (patients.size() < nonempty)
            throw ValidationError(fmt::format("class {} has {} patients, fewer than the {} non-empty split sets",
                                              label, patients.size(), nonempty));
        // patients are already sorted (map keys); shuffle is the only randomness
        rng.shuffle(patients);
        const auto n = patients.size();
        std::vector<std::size_t> sizes(fractions.size(), 0);
        double cumulative = 0.0;
        std::size_t start = 0;
        for (std::size_t g = 0; g < fractions.size(); ++g) {
            cumulative += fractions[g];
            std::size_t end = g + 1 == fractions.size()
                                  ? n
                                  : std::min(n, static_cast<std::size_t>(std::llround(cumulative * n)));
            end = std::max(end, start);
            sizes[g] = end - start;
            start = end;
        }
        // rounding can starve a small set; borrow from the largest one
        for (std::size_t g = 0; g < fractions.size(); ++g) {
            if (fractions[g] <= 0.0 || sizes[g] > 0) continue;
            auto donor = std::max_element(sizes.begin(), sizes.end());
            --*donor;
            ++sizes[g];
        }
        start = 0;
        for (std::size_t g = 0; g < fractions.size(); ++g) {
            for (std::size_t i = start; i < start + sizes[g]; ++i)
                for (const auto& wsi : patient_wsis[patients[i]]) out[wsi] = g;
            start += sizes[g];
        }
    }
    return out;
}

SplitAssignment stratified_patient_split(const CohortManifest& manifest, const std::array<double, 4>& fractions,
                                         std::uint64_t seed) {
    auto groups = stratified_patient_partition(manifest.records, fractions, seed);
    SplitAssignment split;
    split.fractions = fractions;
    split.seed = seed;
    for (const auto& [wsi, g] : groups) split.assignment[wsi] = static_cast<SplitSet>(g);
    return split;
}

std::string serialize_split(const SplitAssignment& split) {
    std::string out = "wsi_id,set\n";
    for (const auto& [wsi, set] : split.assignment) out += fmt::format("{},{}\n", wsi, split_set_name(set));
    return out;
}

void save_split(const fs::path& path, const SplitAssignment& split) { io::write_file(path, serialize_split(split)); }

SplitAssignment load_split(const fs::path& path) {
    auto table = io::read_csv(path, {"wsi_id", "set"});
    SplitAssignment split;
    for (const auto& row : table.rows) {
        auto set = parse_split_set(row.fields[1]);
        if (!set)
            throw ValidationError(fmt::format("{}: line {}: unknown set '{}'", path.string(), row.line, row.fields[1]));
        if (!split.assignment.emplace(row.fields[0], *set).second)
            throw ValidationError(fmt::format("{}: line {}: duplicate wsi_id", path.string(), row.line));
    }
    return split;
}

std::optional<std::size_t> QuotaPolicy::quota_for(const std::string& label) const {
    auto it = quotas.find(label);
    return it == quotas.end() ? std::nullopt : it->second;
}

std::vector<TileRecord> sample_tile_quota(std::span<const TileRecord> tiles, const std::string& label,
                                          const QuotaPolicy& policy, std::uint64_t seed) {
    auto quota = policy.quota_for(label);
    if (!quota) return {tiles.begin(), tiles.end()};
    if (*quota == 0) throw ValidationError(fmt::format("quota for {} must be positive", label));
    Xoshiro256 rng(seed);
    std::vector<TileRecord> out;
    for (auto i : sample_indices(tiles.size(), *quota, rng)) out.push_back(tiles[i]);
    return out;
}

std::vector<OvrExample> build_ovr_dataset(Subtype target,
                                          const std::map<Subtype, std::vector<TileRecord>>& tiles_by_class,
                                          std::uint64_t seed) {
    auto it = tiles_by_class.find(target);
    if (it == tiles_by_class.end() || it->second.empty())
        throw ValidationError(fmt::format("no tiles for target class {}", subtype_name(target)));

    std::vector<OvrExample> out;
    for (const auto& t : it->second) out.push_back({t, target, true});

    std::size_t negatives = 0;
    for (auto cls : kAllSubtypes) {
        if (cls == target) continue;
        auto rest = tiles_by_class.find(cls);
        if (rest == tiles_by_class.end()) continue;
        const auto& pool = rest->second;
        Xoshiro256 rng(derive_seed(seed, subtype_name(cls)));
        for (auto i : sample_indices(pool.size(), pool.size() / 3, rng)) {
            out.push_back({pool[i], cls, false});
            ++negatives;
        }
    }
    if (negatives == 0)
        spdlog::warn("one-vs-rest dataset for {} has no negative tiles", subtype_name(target));
    return out;
}

}  // namespace histotype
