#include "histotype/features.hpp"

#include "histotype/io.hpp"
#include "histotype/rng.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <set>

namespace histotype {

const std::array<std::string_view, kNumFeatures> kFeatureColumns = {
    "c_lumA", "c_not_lumA", "c_lumB", "c_not_lumB", "c_her2", "c_not_her2", "c_basal", "c_not_basal"};

bool classify_tile(const ScorePair& scores, double threshold, CountRule rule) {
    return rule == CountRule::Inclusive ? scores.target >= threshold : scores.target > threshold;
}

std::array<double, kNumSubtypes> thresholds_by_class(const std::vector<ThresholdChoice>& choices) {
    std::array<double, kNumSubtypes> out{};
    std::array<bool, kNumSubtypes> seen{};
    for (const auto& c : choices) {
        auto s = parse_subtype(c.classifier_id);
        if (!s) continue;
        out[index_of(*s)] = c.threshold;
        seen[index_of(*s)] = true;
    }
    for (auto s : kAllSubtypes)
        if (!seen[index_of(s)]) throw ValidationError(fmt::format("no threshold for classifier {}", subtype_name(s)));
    return out;
}

WsiFeatureVector aggregate_counts(const std::string& wsi_id, const ScoreTable& table,
                                  std::span<const std::string> tile_ids,
                                  const std::array<double, kNumSubtypes>& thresholds, CountRule rule) {
    WsiFeatureVector v;
    v.wsi_id = wsi_id;
    std::set<std::string_view> distinct(tile_ids.begin(), tile_ids.end());
    for (auto id : distinct) {
        const std::string tile(id);
        for (auto s : kAllSubtypes) {
            auto pair = table.find(tile, subtype_name(s));
            if (!pair)
                throw ValidationError(fmt::format("{}: tile {} has no {} score", wsi_id, tile, subtype_name(s)));
            const auto k = index_of(s);
            ++v.counts[2 * k + (classify_tile(*pair, thresholds[k], rule) ? 0 : 1)];
        }
    }
    v.n_tiles = distinct.size();
    if (v.degenerate()) spdlog::warn("{}: no tumor tiles; feature vector is all zero", wsi_id);
    return v;
}

FeatureMatrix build_feature_matrix(const ScoreTable& table,
                                   const std::map<std::string, std::vector<std::string>>& tiles_by_wsi,
                                   const std::array<double, kNumSubtypes>& thresholds,
                                   const std::map<std::string, Subtype>& labels, const FeatureOptions& options) {
    FeatureMatrix m;
    m.normalized = options.normalize;
    for (const auto& [wsi, tiles] : tiles_by_wsi) {
        std::vector<std::string> chosen = tiles;
        std::sort(chosen.begin(), chosen.end());
        chosen.erase(std::unique(chosen.begin(), chosen.end()), chosen.end());
        if (options.max_tiles > 0 && chosen.size() > options.max_tiles) {
            Xoshiro256 rng(derive_seed(options.seed, wsi));
            std::vector<std::string> capped;
            for (auto i : sample_indices(chosen.size(), options.max_tiles, rng)) capped.push_back(chosen[i]);
            chosen = std::move(capped);
        }
        auto v = aggregate_counts(wsi, table, chosen, thresholds, options.rule);
        std::array<double, kNumFeatures> row{};
        for (std::size_t j = 0; j < kNumFeatures; ++j) {
            row[j] = static_cast<double>(v.counts[j]);
            if (options.normalize && v.n_tiles > 0) row[j] /= static_cast<double>(v.n_tiles);
        }
        m.wsi_ids.push_back(wsi);
        m.n_tiles.push_back(v.n_tiles);
        m.rows.push_back(row);
        auto it = labels.find(wsi);
        m.labels.push_back(it == labels.end() ? std::nullopt : std::optional<Subtype>(it->second));
    }
    return m;
}

void save_features(const std::filesystem::path& path, const FeatureMatrix& m) {
    const bool with_labels = std::any_of(m.labels.begin(), m.labels.end(), [](const auto& l) { return l.has_value(); });
    std::string out = "wsi_id,n_tiles";
    for (auto c : kFeatureColumns) out += fmt::format(",{}", c);
    out += with_labels ? ",label\n" : "\n";
    for (std::size_t i = 0; i < m.size(); ++i) {
        out += fmt::format("{},{}", m.wsi_ids[i], m.n_tiles[i]);
        for (double v : m.rows[i])
            out += m.normalized ? "," + io::format_real(v) : fmt::format(",{}", static_cast<long long>(v));
        if (with_labels) out += fmt::format(",{}", m.labels[i] ? subtype_name(*m.labels[i]) : "");
        out += "\n";
    }
    io::write_file(path, out);
}

FeatureMatrix load_features(const std::filesystem::path& path) {
    std::vector<std::string> header = {"wsi_id", "n_tiles"};
    for (auto c : kFeatureColumns) header.emplace_back(c);
    auto csv = io::read_csv(path, header, {"label"});
    const bool with_labels = csv.header.size() == header.size() + 1;
    FeatureMatrix m;
    for (const auto& row : csv.rows) {
        auto where = fmt::format("{}: line {}", path.string(), row.line);
        m.wsi_ids.push_back(row.fields[0]);
        m.n_tiles.push_back(static_cast<std::size_t>(io::parse_int(row.fields[1], where)));
        std::array<double, kNumFeatures> r{};
        for (std::size_t j = 0; j < kNumFeatures; ++j) {
            r[j] = io::parse_real(row.fields[2 + j], where);
            if (r[j] != static_cast<double>(static_cast<long long>(r[j]))) m.normalized = true;
        }
        m.rows.push_back(r);
        std::optional<Subtype> label;
        if (with_labels && !row.fields.back().empty()) {
            label = parse_subtype(row.fields.back());
            if (!label) throw ValidationError(fmt::format("{}: unknown label '{}'", where, row.fields.back()));
        }
        m.labels.push_back(label);
    }
    return m;
}

}  // namespace histotype
