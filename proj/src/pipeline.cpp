#include "histotype/pipeline.hpp"

#include "histotype/features.hpp"
#include "histotype/gbdt.hpp"
#include "histotype/heatmap.hpp"
#include "histotype/io.hpp"
#include "histotype/manifest.hpp"
#include "histotype/metrics.hpp"
#include "histotype/raster.hpp"
#include "histotype/rng.hpp"
#include "histotype/scorer.hpp"
#include "histotype/stain.hpp"
#include "histotype/synthetic.hpp"
#include "histotype/thresholding.hpp"
#include "histotype/tiling.hpp"

#include <fmt/chrono.h>
#include <fmt/format.h>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <functional>
#include <memory>
#include <set>
#include <sstream>

namespace histotype::pipeline {

namespace {

const std::string kDefaultConfig = R"(# histotype pipeline configuration
#
# One `key = value` per line. Relative paths resolve against the directory of
# this file. Any key may be overridden on the command line with
# --override key=value.

paths.manifest = manifest.csv
paths.work_dir = work

# Master seed; every stage derives its own seed from it and the stage name.
seed = 0

# Tiling: square tiles at the working resolution, non-overlapping except for
# HER2 slides, whose tumor regions are small biopsies.
tiling.tile_size = 512
tiling.target_mpp = 0.5
tiling.overlap.LumA = 0
tiling.overlap.LumB = 0
tiling.overlap.HER2 = 64
tiling.overlap.Basal = 0
tiling.min_tissue_fraction = 0.5
tiling.mask_downsample = 16
tiling.use_otsu = true
tiling.saturation_threshold = 20

# Tumor tile selection. The tumor score cut-off is a reconstruction.
tumor.threshold = 0.5

# Tumor tiles drawn per training slide ("all" keeps every tile).
quota.LumA = 441
quota.LumB = 1180
quota.HER2 = all
quota.Basal = 1410

# Macenko stain normalization. The reference profile is fitted on a mosaic of
# one tumor tile from each of `reference_wsis` random slides. Source profiles
# are fitted per tile, or per slide with profile_scope = wsi.
macenko.I0 = 255
macenko.alpha = 1
macenko.beta = 0.15
macenko.reference_wsis = 256
macenko.profile_scope = tile

# Patient-level splits: tile-classifier share, meta-classifier share and test
# share; each of the first two is divided again into train/validation.
split.cnn = 0.70
split.xgb = 0.15
split.test = 0.15
split.cnn_train_fraction = 0.80
split.xgb_train_fraction = 0.80

# Tile scorer: synthetic (ground-truth driven test double) or process (an
# external command speaking the line protocol; {classifier} is substituted).
scorer.kind = synthetic
scorer.command =
scorer.workers = 1
scorer.truth = ground_truth.csv
scorer.signal = 1
scorer.pair_sum_tolerance = 0.0001
scorer.pair_sum_warn_only = false

# Subtype decision thresholds. fixed uses the values below; recompute picks
# the F-beta optimum on the tile-classifier validation slides and falls back
# to these values for a classifier without validation positives.
thresholds.mode = fixed
thresholds.beta = 1
thresholds.LumA = 0.434
thresholds.LumB = 0.415
thresholds.HER2 = 0.481
thresholds.Basal = 0.424

# Slide features: per-classifier tile counts. rule = inclusive counts
# score >= threshold, strict counts score > threshold. max_tiles = 0 uses all
# tumor tiles of a slide.
features.rule = inclusive
features.normalize = false
features.max_tiles = 0

# Gradient-boosted trees.
gbdt.n_rounds = 50
gbdt.learning_rate = 0.1
gbdt.lambda = 1
gbdt.gamma = 0
gbdt.max_depth = 3
gbdt.min_child_weight = 1

# Percentile bootstrap over slides.
bootstrap.resamples = 1000
bootstrap.level = 0.95

# Tumor heatmaps for the listed split sets.
heatmap.downsample = 32
heatmap.opacity = 0.4
heatmap.sets = test
)";

std::string trim_comment(const std::string& line) {
    auto pos = line.find('#');
    return io::trim(pos == std::string::npos ? line : line.substr(0, pos));
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    for (auto& f : io::split_csv(s)) {
        auto t = io::trim(f);
        if (!t.empty()) out.push_back(t);
    }
    return out;
}

std::string now_utc() {
    return fmt::format("{:%Y-%m-%dT%H:%M:%SZ}",
                       std::chrono::floor<std::chrono::seconds>(std::chrono::system_clock::now()));
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

const std::string& Config::default_text() { return kDefaultConfig; }

Config Config::defaults() {
    static const Config d = [] {
        Config c;
        std::istringstream in(kDefaultConfig);
        std::string line;
        while (std::getline(in, line)) {
            auto t = trim_comment(line);
            if (t.empty()) continue;
            auto eq = t.find('=');
            c.values_[io::trim(t.substr(0, eq))] = io::trim(t.substr(eq + 1));
        }
        c.base_dir_ = fs::current_path();
        return c;
    }();
    return d;
}

Config Config::parse(const std::string& text, const fs::path& base_dir, const std::string& origin) {
    Config c = defaults();
    c.base_dir_ = base_dir;
    std::istringstream in(text);
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
        auto t = trim_comment(line);
        if (t.empty()) continue;
        auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ValidationError(fmt::format("{}:{}: expected 'key = value'", origin, n));
        try {
            c.set(io::trim(t.substr(0, eq)), io::trim(t.substr(eq + 1)));
        } catch (const ValidationError& e) {
            throw ValidationError(fmt::format("{}:{}: {}", origin, n, e.what()));
        }
    }
    return c;
}

Config Config::load(const fs::path& path) {
    if (!fs::exists(path)) throw ValidationError(fmt::format("config '{}' does not exist", path.string()));
    return parse(io::read_file(path), fs::absolute(path).parent_path(), path.string());
}

void Config::set(const std::string& key, const std::string& value) {
    if (!defaults().values_.contains(key)) throw ValidationError(fmt::format("unknown config key '{}'", key));
    values_[key] = value;
}

void Config::apply_override(const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos)
        throw ValidationError(fmt::format("override '{}' is not of the form key=value", assignment));
    set(io::trim(assignment.substr(0, eq)), io::trim(assignment.substr(eq + 1)));
}

const std::string& Config::get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ValidationError(fmt::format("unknown config key '{}'", key));
    return it->second;
}

double Config::real(const std::string& key) const { return io::parse_real(get(key), key); }

long long Config::integer(const std::string& key) const { return io::parse_int(get(key), key); }

bool Config::boolean(const std::string& key) const {
    const auto& v = get(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ValidationError(fmt::format("{}: expected true or false, got '{}'", key, v));
}

fs::path Config::path(const std::string& key) const {
    fs::path p = get(key);
    return p.is_absolute() ? p : base_dir_ / p;
}

std::uint64_t Config::seed() const {
    const auto v = integer("seed");
    if (v < 0) throw ValidationError("seed must be non-negative");
    return static_cast<std::uint64_t>(v);
}

void Config::validate() const {
    auto require = [](bool ok, const std::string& msg) {
        if (!ok) throw ValidationError(msg);
    };
    auto in_unit = [&](const std::string& key) {
        const double v = real(key);
        require(v >= 0 && v <= 1, fmt::format("{} = {} must be in [0, 1]", key, v));
    };
    seed();
    const auto tile = integer("tiling.tile_size");
    require(tile >= 1, "tiling.tile_size must be >= 1");
    require(real("tiling.target_mpp") > 0, "tiling.target_mpp must be positive");
    for (auto s : kAllSubtypes) {
        const auto key = fmt::format("tiling.overlap.{}", subtype_name(s));
        const auto ov = integer(key);
        require(ov >= 0 && ov < tile, fmt::format("{} = {} must be in [0, tiling.tile_size = {})", key, ov, tile));
    }
    in_unit("tiling.min_tissue_fraction");
    require(integer("tiling.mask_downsample") >= 1, "tiling.mask_downsample must be >= 1");
    boolean("tiling.use_otsu");
    const double sat = real("tiling.saturation_threshold");
    require(sat >= 0 && sat <= 255, "tiling.saturation_threshold must be in [0, 255]");
    in_unit("tumor.threshold");
    for (auto s : kAllSubtypes) {
        const auto key = fmt::format("quota.{}", subtype_name(s));
        if (get(key) != "all") require(integer(key) >= 1, fmt::format("{} must be a positive integer or 'all'", key));
    }
    require(real("macenko.I0") > 0, "macenko.I0 must be positive");
    const double alpha = real("macenko.alpha");
    require(alpha >= 0 && alpha < 50, "macenko.alpha must be in [0, 50)");
    require(real("macenko.beta") >= 0, "macenko.beta must be >= 0");
    require(integer("macenko.reference_wsis") >= 1, "macenko.reference_wsis must be >= 1");
    const auto& scope = get("macenko.profile_scope");
    require(scope == "tile" || scope == "wsi", "macenko.profile_scope must be tile or wsi");
    for (const auto* k : {"split.cnn", "split.xgb", "split.test", "split.cnn_train_fraction", "split.xgb_train_fraction"})
        in_unit(k);
    const double total = real("split.cnn") + real("split.xgb") + real("split.test");
    require(std::abs(total - 1.0) <= 1e-9, fmt::format("split.cnn + split.xgb + split.test = {}, expected 1", total));
    const auto& kind = get("scorer.kind");
    require(kind == "synthetic" || kind == "process", "scorer.kind must be synthetic or process");
    if (kind == "process") require(!get("scorer.command").empty(), "scorer.kind = process needs scorer.command");
    require(integer("scorer.workers") >= 1, "scorer.workers must be >= 1");
    in_unit("scorer.signal");
    require(real("scorer.pair_sum_tolerance") >= 0, "scorer.pair_sum_tolerance must be >= 0");
    boolean("scorer.pair_sum_warn_only");
    const auto& mode = get("thresholds.mode");
    require(mode == "fixed" || mode == "recompute", "thresholds.mode must be fixed or recompute");
    require(real("thresholds.beta") > 0, "thresholds.beta must be positive");
    for (auto s : kAllSubtypes) in_unit(fmt::format("thresholds.{}", subtype_name(s)));
    const auto& rule = get("features.rule");
    require(rule == "inclusive" || rule == "strict", "features.rule must be inclusive or strict");
    boolean("features.normalize");
    require(integer("features.max_tiles") >= 0, "features.max_tiles must be >= 0");
    gbdt::TrainConfig tc;
    tc.n_rounds = static_cast<int>(integer("gbdt.n_rounds"));
    tc.learning_rate = real("gbdt.learning_rate");
    tc.lambda = real("gbdt.lambda");
    tc.gamma = real("gbdt.gamma");
    tc.max_depth = static_cast<int>(integer("gbdt.max_depth"));
    tc.min_child_weight = real("gbdt.min_child_weight");
    tc.validate();
    require(integer("bootstrap.resamples") >= 1, "bootstrap.resamples must be >= 1");
    const double level = real("bootstrap.level");
    require(level > 0 && level < 1, "bootstrap.level must be in (0, 1)");
    require(integer("heatmap.downsample") >= 1, "heatmap.downsample must be >= 1");
    in_unit("heatmap.opacity");
    for (const auto& s : split_list(get("heatmap.sets")))
        require(parse_split_set(s).has_value(), fmt::format("heatmap.sets: unknown set '{}'", s));
}

std::string Config::canonical(const std::vector<std::string>& prefixes) const {
    std::string out;
    for (const auto& [k, v] : values_)
        for (const auto& p : prefixes)
            if (k.starts_with(p)) {
                out += k + "=" + v + "\n";
                break;
            }
    return out;
}

// ---------------------------------------------------------------------------
// Stage context

namespace {

using nlohmann::ordered_json;

struct Context {
    const Config& cfg;
    fs::path work;
    std::uint64_t seed = 0;

    fs::path at(const std::string& rel) const { return work / rel; }
    int tile_size() const { return static_cast<int>(cfg.integer("tiling.tile_size")); }

    CohortManifest manifest() const { return load_manifest(cfg.path("paths.manifest")); }
    SplitAssignment split() const { return load_split(at("split.csv")); }
    std::vector<TileRecord> tiles() const { return load_tile_manifest(at("tiles.csv")); }
    std::vector<TileRecord> selected() const { return load_tile_manifest(at("selected.csv")); }

    fs::path raw_tile(const TileRecord& t) const { return at("tiles") / t.wsi_id / (t.tile_id + ".png"); }
    fs::path normalized_tile(const TileRecord& t) const {
        return at("normalized") / t.wsi_id / (t.tile_id + ".png");
    }

    ScoreValidation score_validation() const {
        return {cfg.real("scorer.pair_sum_tolerance"), cfg.boolean("scorer.pair_sum_warn_only")};
    }
};

struct StageSpec {
    std::string name;
    std::vector<std::string> config_keys;  // key prefixes
    std::function<std::vector<fs::path>(const Context&)> inputs;
    std::function<std::vector<std::string>(const Context&)> outputs;  // relative to work dir
    std::function<void(const Context&)> body;
};

void reset_dir(const fs::path& dir) {
    fs::remove_all(dir);
    fs::create_directories(dir);
}

std::string digest_of(const std::vector<std::pair<std::string, fs::path>>& files, const std::string& extra_header = {},
                      const std::vector<std::string>& extra = {}) {
    std::string out = "id,sha256" + extra_header + "\n";
    for (std::size_t i = 0; i < files.size(); ++i)
        out += files[i].first + "," + io::sha256_file(files[i].second) + (extra.empty() ? "" : "," + extra[i]) + "\n";
    return out;
}

std::map<std::string, std::vector<TileRecord>> by_wsi(const std::vector<TileRecord>& tiles) {
    std::map<std::string, std::vector<TileRecord>> out;
    for (const auto& t : tiles) out[t.wsi_id].push_back(t);
    return out;
}

std::map<std::string, std::string> labels_of(const CohortManifest& m) {
    std::map<std::string, std::string> out;
    for (const auto& r : m.records) out[r.wsi_id] = r.label;
    return out;
}

std::vector<fs::path> manifest_and_images(const Context& ctx) {
    std::vector<fs::path> in{ctx.cfg.path("paths.manifest")};
    for (const auto& r : ctx.manifest().records) in.push_back(r.image_path);
    return in;
}

std::vector<fs::path> truth_inputs(const Context& ctx) {
    if (ctx.cfg.get("scorer.kind") == "synthetic") return {ctx.cfg.path("scorer.truth")};
    return {};
}

// ---- scorers ----

std::unique_ptr<Scorer> make_scorer(const Context& ctx, std::map<std::string, std::string> truth) {
    if (ctx.cfg.get("scorer.kind") == "process")
        return std::make_unique<ProcessScorer>(ctx.cfg.get("scorer.command"),
                                               static_cast<int>(ctx.cfg.integer("scorer.workers")),
                                               ctx.score_validation());
    return std::make_unique<SyntheticScorer>(
        SyntheticScorerSpec{std::move(truth), ctx.cfg.real("scorer.signal"), ctx.seed});
}

/// tile_id -> "tumor" / subtype / "non-tumor" from the synthetic ground truth.
std::map<std::string, std::string> synthetic_truth(const Context& ctx, const std::vector<TileRecord>& tiles,
                                                   bool subtype) {
    std::map<std::string, std::string> out;
    if (ctx.cfg.get("scorer.kind") != "synthetic") return out;
    std::map<std::string, SlideTruth> gt;
    for (auto& t : load_ground_truth(ctx.cfg.path("scorer.truth"))) gt[t.wsi_id] = t;
    const double mpp = ctx.cfg.real("tiling.target_mpp");
    for (const auto& t : tiles) {
        auto it = gt.find(t.wsi_id);
        if (it == gt.end()) throw ValidationError(fmt::format("no ground truth for slide {}", t.wsi_id));
        const bool tumor = tile_is_tumor(it->second, t, ctx.tile_size(), mpp);
        out[t.tile_id] = !tumor ? "non-tumor" : subtype ? it->second.label : std::string(kTumorClassifier);
    }
    return out;
}

// ---- stages ----

void stage_split(const Context& ctx) {
    const double cnn = ctx.cfg.real("split.cnn"), f = ctx.cfg.real("split.cnn_train_fraction");
    const std::array<double, 4> fractions = {cnn * f, cnn * (1 - f), ctx.cfg.real("split.xgb"),
                                             ctx.cfg.real("split.test")};
    auto split = stratified_patient_split(ctx.manifest(), fractions, ctx.seed);
    save_split(ctx.at("split.csv"), split);
    for (int s = 0; s < 4; ++s)
        spdlog::info("split: {} slides in {}", split.members(static_cast<SplitSet>(s)).size(),
                     split_set_name(static_cast<SplitSet>(s)));
}

void stage_tile(const Context& ctx) {
    const auto manifest = ctx.manifest();
    const int tile = ctx.tile_size();
    const double mpp = ctx.cfg.real("tiling.target_mpp");
    TissueParams tp{ctx.cfg.real("tiling.saturation_threshold"), ctx.cfg.boolean("tiling.use_otsu")};
    reset_dir(ctx.at("tiles"));

    auto records = manifest.records;
    std::sort(records.begin(), records.end(), [](auto& a, auto& b) { return a.wsi_id < b.wsi_id; });
    std::vector<TileRecord> all;
    std::vector<std::pair<std::string, fs::path>> files;
    for (const auto& r : records) {
        const auto image = resample_to_target_mpp(read_image(r.image_path, r.source_mpp), mpp);
        const auto mask = detect_tissue(image, static_cast<int>(ctx.cfg.integer("tiling.mask_downsample")), tp);
        const int overlap = static_cast<int>(ctx.cfg.integer(fmt::format("tiling.overlap.{}", r.label)));
        const auto grid = plan_tiles(r.wsi_id, image.width, image.height, tile, overlap, mask,
                                     ctx.cfg.real("tiling.min_tissue_fraction"));
        fs::create_directories(ctx.at("tiles") / r.wsi_id);
        for (const auto& t : grid.tiles) {
            const auto path = ctx.raw_tile(t);
            write_png(path, extract_tile(image, t, tile));
            files.emplace_back(t.tile_id, path);
            all.push_back(t);
        }
        spdlog::info("tile: {} -> {} tiles", r.wsi_id, grid.tiles.size());
    }
    save_tile_manifest(ctx.at("tiles.csv"), all);
    io::write_file(ctx.at("tiles_digest.csv"), digest_of(files));
}

std::vector<TileRequest> requests(const std::vector<TileRecord>& tiles, const std::function<fs::path(const TileRecord&)>& path) {
    std::vector<TileRequest> out;
    out.reserve(tiles.size());
    for (const auto& t : tiles) out.push_back({t.tile_id, fs::absolute(path(t))});
    return out;
}

void stage_score_tumor(const Context& ctx) {
    const auto tiles = ctx.tiles();
    auto scorer = make_scorer(ctx, synthetic_truth(ctx, tiles, false));
    const auto reqs = requests(tiles, [&](const TileRecord& t) { return ctx.raw_tile(t); });
    fs::create_directories(ctx.at("scores"));
    save_scores(ctx.at("scores/tumor.csv"), score_tiles(*scorer, reqs, std::string(kTumorClassifier)));
}

void stage_select(const Context& ctx) {
    const auto manifest = ctx.manifest();
    const auto split = ctx.split();
    const auto table = load_scores(ctx.at("scores/tumor.csv"), ctx.score_validation());
    const double threshold = ctx.cfg.real("tumor.threshold");

    QuotaPolicy policy;
    for (auto s : kAllSubtypes) {
        const auto& v = ctx.cfg.get(fmt::format("quota.{}", subtype_name(s)));
        policy.quotas[std::string(subtype_name(s))] =
            v == "all" ? std::nullopt : std::optional<std::size_t>(io::parse_int(v, "quota"));
    }

    std::vector<TileRecord> selected;
    const auto labels = labels_of(manifest);
    for (const auto& [wsi, tiles] : by_wsi(ctx.tiles())) {
        std::vector<std::string> ids;
        for (const auto& t : tiles) ids.push_back(t.tile_id);
        const auto kept = filter_tumor_tiles(table, threshold, ids);
        std::vector<TileRecord> tumor;
        for (const auto& t : tiles)
            if (kept.contains(t.tile_id)) tumor.push_back(t);
        const auto set = split.assignment.at(wsi);
        if (set == SplitSet::CnnTrain || set == SplitSet::CnnVal)
            tumor = sample_tile_quota(tumor, labels.at(wsi), policy, derive_seed(ctx.seed, wsi));
        if (tumor.empty()) spdlog::warn("select: slide {} has no tumor tiles", wsi);
        selected.insert(selected.end(), tumor.begin(), tumor.end());
    }
    save_tile_manifest(ctx.at("selected.csv"), selected);
    spdlog::info("select: {} tumor tiles kept", selected.size());
}

MacenkoParams macenko_params(const Config& cfg) {
    return {cfg.real("macenko.I0"), cfg.real("macenko.beta"), cfg.real("macenko.alpha")};
}

void stage_build_ref(const Context& ctx) {
    std::map<std::string, std::vector<std::string>> tumor_tiles;
    std::map<std::string, TileRecord> by_id;
    for (const auto& t : ctx.selected()) {
        tumor_tiles[t.wsi_id].push_back(t.tile_id);
        by_id[t.tile_id] = t;
    }
    const double mpp = ctx.cfg.real("tiling.target_mpp");
    auto mosaic = build_reference_mosaic(
        tumor_tiles, [&](const MosaicEntry& e) { return read_image(ctx.raw_tile(by_id.at(e.tile_id)), mpp); },
        static_cast<int>(ctx.cfg.integer("macenko.reference_wsis")), ctx.seed, macenko_params(ctx.cfg));
    fs::create_directories(ctx.at("reference"));
    write_png(ctx.at("reference/mosaic.png"), mosaic.image);
    save_profile(ctx.at("reference/profile.txt"), mosaic.profile);
    std::string prov = "wsi_id,tile_id\n";
    for (const auto& e : mosaic.provenance) prov += e.wsi_id + "," + e.tile_id + "\n";
    io::write_file(ctx.at("reference/provenance.csv"), prov);
    spdlog::info("build-ref: mosaic of {} tiles", mosaic.provenance.size());
}

void stage_normalize(const Context& ctx) {
    const auto reference = load_profile(ctx.at("reference/profile.txt"));
    const auto params = macenko_params(ctx.cfg);
    const bool per_tile = ctx.cfg.get("macenko.profile_scope") == "tile";
    const double mpp = ctx.cfg.real("tiling.target_mpp");
    reset_dir(ctx.at("normalized"));

    std::vector<std::pair<std::string, fs::path>> files;
    std::vector<std::string> scopes;
    std::size_t fallbacks = 0;
    for (const auto& [wsi, tiles] : by_wsi(ctx.selected())) {
        fs::create_directories(ctx.at("normalized") / wsi);
        std::vector<RasterImage> images;
        for (const auto& t : tiles) images.push_back(read_image(ctx.raw_tile(t), mpp));

        std::optional<StainProfile> wsi_profile;
        bool wsi_tried = false;
        auto slide_profile = [&]() -> const std::optional<StainProfile>& {
            if (!wsi_tried) {
                wsi_tried = true;
                OpticalDensityField all;
                for (const auto& im : images) {
                    auto od = rgb_to_od(im, params.I0);
                    all.values.insert(all.values.end(), od.values.begin(), od.values.end());
                }
                all.width = static_cast<int>(all.values.size() / 3);
                all.height = 1;
                try {
                    wsi_profile = estimate_stain_profile(all, params);
                } catch (const DegenerateStainError& e) {
                    spdlog::warn("normalize: slide {} has no usable stain profile: {}", wsi, e.what());
                }
            }
            return wsi_profile;
        };

        for (std::size_t i = 0; i < tiles.size(); ++i) {
            std::optional<StainProfile> source;
            std::string scope = "wsi";
            if (per_tile) {
                try {
                    source = estimate_stain_profile(rgb_to_od(images[i], params.I0), params);
                    scope = "tile";
                } catch (const DegenerateStainError&) {
                    ++fallbacks;
                }
            }
            if (!source) source = slide_profile();
            const auto path = ctx.normalized_tile(tiles[i]);
            if (source) {
                write_png(path, normalize_tile(images[i], *source, reference, params.I0));
            } else {
                scope = "none";
                write_png(path, images[i]);
            }
            files.emplace_back(tiles[i].tile_id, path);
            scopes.push_back(scope);
        }
    }
    if (fallbacks > 0) spdlog::info("normalize: {} tiles fell back to their slide profile", fallbacks);
    io::write_file(ctx.at("normalized_digest.csv"), digest_of(files, ",profile", scopes));
}

void stage_score(const Context& ctx) {
    const auto tiles = ctx.selected();
    auto scorer = make_scorer(ctx, synthetic_truth(ctx, tiles, true));
    const auto reqs = requests(tiles, [&](const TileRecord& t) { return ctx.normalized_tile(t); });
    ScoreTable all;
    for (auto s : kAllSubtypes) all.merge(score_tiles(*scorer, reqs, std::string(subtype_name(s))));
    fs::create_directories(ctx.at("scores"));
    save_scores(ctx.at("scores/subtype.csv"), all);
}

void stage_threshold(const Context& ctx) {
    const auto table = load_scores(ctx.at("scores/subtype.csv"), ctx.score_validation());
    const auto split = ctx.split();
    const auto labels = labels_of(ctx.manifest());
    const bool recompute = ctx.cfg.get("thresholds.mode") == "recompute";
    const double beta = ctx.cfg.real("thresholds.beta");

    std::vector<const TileRecord*> val;
    const auto selected = ctx.selected();
    for (const auto& t : selected)
        if (split.assignment.at(t.wsi_id) == SplitSet::CnnVal) val.push_back(&t);

    std::vector<ThresholdChoice> choices;
    for (auto s : kAllSubtypes) {
        const std::string clf(subtype_name(s));
        std::vector<double> scores;
        std::vector<int> y;
        for (const auto* t : val) {
            auto p = table.find(t->tile_id, clf);
            if (!p) throw ValidationError(fmt::format("tile {} has no {} score", t->tile_id, clf));
            scores.push_back(p->target);
            y.push_back(labels.at(t->wsi_id) == clf ? 1 : 0);
        }
        const bool has_pos = std::find(y.begin(), y.end(), 1) != y.end();
        const double configured = ctx.cfg.real("thresholds." + clf);
        ThresholdChoice c{clf, configured, "configured", 0.0};
        if (recompute && has_pos) {
            c = optimal_threshold(scores, y, clf, beta);
            if (beta != 1.0) c.criterion = fmt::format("f{}", io::format_real(beta));
        } else {
            if (recompute)
                spdlog::warn("threshold: no validation positives for {}; using configured {}", clf, configured);
            if (has_pos) {
                std::size_t tp = 0, fp = 0, fn = 0;
                for (std::size_t i = 0; i < y.size(); ++i) {
                    const bool pred = scores[i] >= configured;
                    tp += pred && y[i];
                    fp += pred && !y[i];
                    fn += !pred && y[i];
                }
                const double prec = tp + fp > 0 ? double(tp) / double(tp + fp) : 1.0;
                c.criterion_value = f_beta(prec, double(tp) / double(tp + fn), beta);
            }
        }
        spdlog::info("threshold: {} = {} ({} {})", clf, c.threshold, c.criterion, c.criterion_value);
        choices.push_back(c);
    }
    save_thresholds(ctx.at("thresholds.csv"), choices);
}

void stage_features(const Context& ctx) {
    const auto table = load_scores(ctx.at("scores/subtype.csv"), ctx.score_validation());
    const auto thresholds = thresholds_by_class(load_thresholds(ctx.at("thresholds.csv")));
    const auto split = ctx.split();
    const auto manifest = ctx.manifest();
    const auto selected = ctx.selected();

    FeatureOptions opt;
    opt.rule = ctx.cfg.get("features.rule") == "strict" ? CountRule::Strict : CountRule::Inclusive;
    opt.normalize = ctx.cfg.boolean("features.normalize");
    opt.max_tiles = static_cast<std::size_t>(ctx.cfg.integer("features.max_tiles"));
    opt.seed = ctx.seed;

    std::map<std::string, Subtype> labels;
    for (const auto& r : manifest.records) labels[r.wsi_id] = *parse_subtype(r.label);

    fs::create_directories(ctx.at("features"));
    for (auto [set, file] : {std::pair{SplitSet::XgbSet, "features/xgb.csv"}, std::pair{SplitSet::Test, "features/test.csv"}}) {
        std::map<std::string, std::vector<std::string>> tiles_by_wsi;
        for (const auto& wsi : split.members(set)) tiles_by_wsi[wsi];
        for (const auto& t : selected)
            if (split.assignment.at(t.wsi_id) == set) tiles_by_wsi[t.wsi_id].push_back(t.tile_id);
        auto m = build_feature_matrix(table, tiles_by_wsi, thresholds, labels, opt);
        for (std::size_t i = 0; i < m.size(); ++i)
            if (m.n_tiles[i] == 0) spdlog::warn("features: slide {} has no tumor tiles (all-zero row)", m.wsi_ids[i]);
        save_features(ctx.at(file), m);
        spdlog::info("features: {} rows in {}", m.size(), file);
    }
}

gbdt::TrainConfig train_config(const Config& cfg, std::uint64_t seed) {
    gbdt::TrainConfig tc;
    tc.n_rounds = static_cast<int>(cfg.integer("gbdt.n_rounds"));
    tc.learning_rate = cfg.real("gbdt.learning_rate");
    tc.lambda = cfg.real("gbdt.lambda");
    tc.gamma = cfg.real("gbdt.gamma");
    tc.max_depth = static_cast<int>(cfg.integer("gbdt.max_depth"));
    tc.min_child_weight = cfg.real("gbdt.min_child_weight");
    tc.seed = seed;
    return tc;
}

struct Dataset {
    gbdt::Matrix x;
    std::vector<int> y;
};

void stage_train(const Context& ctx) {
    const auto fm = load_features(ctx.at("features/xgb.csv"));
    if (fm.size() == 0) throw ValidationError("no slides in the meta-classifier set");
    const auto manifest = ctx.manifest();

    std::vector<SlideRecord> records;
    for (const auto& id : fm.wsi_ids) records.push_back(manifest.find(id));
    std::map<std::string, std::size_t> part;
    const double f = ctx.cfg.real("split.xgb_train_fraction");
    try {
        const std::vector<double> fractions = {f, 1 - f};
        part = stratified_patient_partition(records, fractions, derive_seed(ctx.seed, "internal"));
    } catch (const ValidationError& e) {
        spdlog::warn("train: internal validation split impossible ({}); training on every slide", e.what());
        for (const auto& id : fm.wsi_ids) part[id] = 0;
    }

    Dataset train, val;
    for (std::size_t i = 0; i < fm.size(); ++i) {
        if (!fm.labels[i]) throw ValidationError(fmt::format("slide {} has no label", fm.wsi_ids[i]));
        auto& d = part.at(fm.wsi_ids[i]) == 0 ? train : val;
        d.x.emplace_back(fm.rows[i].begin(), fm.rows[i].end());
        d.y.push_back(static_cast<int>(index_of(*fm.labels[i])));
    }
    if (train.x.empty()) throw ValidationError("meta-classifier training set is empty");

    const auto model = gbdt::train(train.x, train.y, train_config(ctx.cfg, ctx.seed));
    fs::create_directories(ctx.at("model"));
    gbdt::save_model(ctx.at("model/gbdt.txt"), model);

    // per-round losses, for choosing n_rounds by hand
    std::string log = "round,train_log_loss,val_log_loss,val_accuracy\n";
    auto truncated = model;
    for (std::size_t r = 0; r <= model.rounds.size(); ++r) {
        truncated.rounds.assign(model.rounds.begin(), model.rounds.begin() + static_cast<std::ptrdiff_t>(r));
        std::string v_loss, v_acc;
        if (!val.x.empty()) {
            std::size_t correct = 0;
            for (std::size_t i = 0; i < val.x.size(); ++i) correct += gbdt::predict(truncated, val.x[i]) == val.y[i];
            v_loss = io::format_real(gbdt::log_loss(truncated, val.x, val.y));
            v_acc = io::format_real(double(correct) / double(val.x.size()));
        }
        log += fmt::format("{},{},{},{}\n", r, io::format_real(gbdt::log_loss(truncated, train.x, train.y)), v_loss, v_acc);
    }
    io::write_file(ctx.at("model/train_log.csv"), log);
    spdlog::info("train: {} rounds on {} slides ({} held out)", model.rounds.size(), train.x.size(), val.x.size());
}

void stage_predict(const Context& ctx) {
    const auto model = gbdt::load_model(ctx.at("model/gbdt.txt"));
    const auto fm = load_features(ctx.at("features/test.csv"));
    std::string out = "wsi_id,label,predicted";
    for (auto s : kAllSubtypes) out += fmt::format(",p_{}", subtype_name(s));
    out += "\n";
    for (std::size_t i = 0; i < fm.size(); ++i) {
        const auto p = gbdt::predict_proba(model, fm.rows[i]);
        const auto k = gbdt::predict(model, fm.rows[i]);
        out += fmt::format("{},{},{}", fm.wsi_ids[i], fm.labels[i] ? subtype_name(*fm.labels[i]) : "",
                           subtype_name(kAllSubtypes[k]));
        for (double v : p) out += "," + io::format_real(v);
        out += "\n";
    }
    io::write_file(ctx.at("predictions.csv"), out);
    spdlog::info("predict: {} slides", fm.size());
}

void stage_evaluate(const Context& ctx) {
    std::vector<std::string> header = {"wsi_id", "label", "predicted"};
    for (auto s : kAllSubtypes) header.push_back(fmt::format("p_{}", subtype_name(s)));
    const auto table = io::read_csv(ctx.at("predictions.csv"), header);

    std::vector<metrics::EvalRecord> records;
    for (const auto& row : table.rows) {
        auto truth = parse_subtype(row.fields[1]);
        auto pred = parse_subtype(row.fields[2]);
        if (!truth || !pred)
            throw ValidationError(fmt::format("predictions.csv:{}: missing or unknown label", row.line));
        metrics::EvalRecord r{row.fields[0], static_cast<int>(index_of(*truth)), static_cast<int>(index_of(*pred)), {}};
        for (std::size_t k = 0; k < kNumSubtypes; ++k) r.proba.push_back(io::parse_real(row.fields[3 + k], "probability"));
        records.push_back(std::move(r));
    }
    if (records.empty()) throw ValidationError("no predictions to evaluate");

    std::vector<std::string> classes;
    for (auto s : kAllSubtypes) classes.emplace_back(subtype_name(s));
    const auto report = metrics::evaluate(records, classes, static_cast<int>(ctx.cfg.integer("bootstrap.resamples")),
                                          ctx.cfg.real("bootstrap.level"), ctx.seed);
    fs::create_directories(ctx.at("report"));
    io::write_file(ctx.at("report/report.csv"), metrics::report_csv(report));
    io::write_file(ctx.at("report/report.txt"), metrics::report_text(report));
    io::write_file(ctx.at("report/confusion.csv"), metrics::confusion_csv(report.confusion));
    const double accuracy = [&] {
        std::size_t diag = 0;
        for (std::size_t k = 0; k < classes.size(); ++k) diag += report.confusion.counts[k][k];
        return double(diag) / double(report.confusion.total());
    }();
    spdlog::info("evaluate: accuracy {:.3f}, macro F1 {:.3f} over {} slides", accuracy, report.rows.back().f1.value,
                 records.size());
}

std::vector<std::string> heatmap_slides(const Context& ctx) {
    std::set<SplitSet> sets;
    for (const auto& s : split_list(ctx.cfg.get("heatmap.sets"))) sets.insert(*parse_split_set(s));
    std::vector<std::string> out;
    for (const auto& [wsi, set] : ctx.split().assignment)
        if (sets.contains(set)) out.push_back(wsi);
    return out;
}

void stage_heatmap(const Context& ctx) {
    const auto manifest = ctx.manifest();
    const auto scores = load_scores(ctx.at("scores/tumor.csv"), ctx.score_validation());
    const auto tiles = by_wsi(ctx.tiles());
    const int d = static_cast<int>(ctx.cfg.integer("heatmap.downsample"));
    reset_dir(ctx.at("heatmaps"));

    std::vector<std::pair<std::string, fs::path>> files;
    for (const auto& wsi : heatmap_slides(ctx)) {
        const auto& r = manifest.find(wsi);
        const auto image = resample_to_target_mpp(read_image(r.image_path, r.source_mpp), ctx.cfg.real("tiling.target_mpp"));
        HeatmapSpec spec;
        spec.base = downsample_box(image, d);
        spec.tile_size = ctx.tile_size();
        spec.downsample = d;
        spec.opacity = ctx.cfg.real("heatmap.opacity");
        if (auto it = tiles.find(wsi); it != tiles.end())
            for (const auto& t : it->second) {
                auto s = scores.find(t.tile_id, kTumorClassifier);
                if (!s) throw ValidationError(fmt::format("tile {} has no tumor score", t.tile_id));
                spec.tiles.push_back({t.tile_id, t.x, t.y, s->target});
            }
        const auto png = ctx.at("heatmaps") / (wsi + ".png");
        const auto csv = ctx.at("heatmaps") / (wsi + ".csv");
        write_png(png, stitch_heatmap(spec));
        save_heatmap_scores(csv, spec.tiles);
        files.emplace_back(wsi + ".png", png);
        files.emplace_back(wsi + ".csv", csv);
    }
    io::write_file(ctx.at("heatmaps_digest.csv"), digest_of(files));
    spdlog::info("heatmap: {} slides", files.size() / 2);
}

std::vector<fs::path> work_files(const Context& ctx, std::initializer_list<const char*> rel) {
    std::vector<fs::path> out;
    for (const auto* r : rel) out.push_back(ctx.at(r));
    return out;
}

template <typename... T>
std::vector<fs::path> concat(std::vector<fs::path> a, const T&... rest) {
    (a.insert(a.end(), rest.begin(), rest.end()), ...);
    return a;
}

auto fixed(std::vector<std::string> outs) {
    return [outs = std::move(outs)](const Context&) { return outs; };
}

const std::vector<StageSpec>& stages() {
    static const std::vector<StageSpec> specs = {
        {"split", {"split.cnn", "split.xgb", "split.test"},
         [](const Context& c) { return std::vector<fs::path>{c.cfg.path("paths.manifest")}; }, fixed({"split.csv"}),
         stage_split},
        {"tile", {"tiling."}, manifest_and_images, fixed({"tiles.csv", "tiles_digest.csv"}), stage_tile},
        {"score-tumor", {"scorer.", "tiling.tile_size", "tiling.target_mpp"},
         [](const Context& c) { return concat(work_files(c, {"tiles.csv", "tiles_digest.csv"}), truth_inputs(c)); },
         fixed({"scores/tumor.csv"}), stage_score_tumor},
        {"select", {"tumor.", "quota.", "scorer.pair_sum"},
         [](const Context& c) {
             return concat(work_files(c, {"tiles.csv", "scores/tumor.csv", "split.csv"}),
                           std::vector<fs::path>{c.cfg.path("paths.manifest")});
         },
         fixed({"selected.csv"}), stage_select},
        {"build-ref", {"macenko.I0", "macenko.alpha", "macenko.beta", "macenko.reference_wsis", "tiling.target_mpp"},
         [](const Context& c) { return work_files(c, {"selected.csv", "tiles_digest.csv"}); },
         fixed({"reference/mosaic.png", "reference/profile.txt", "reference/provenance.csv"}), stage_build_ref},
        {"normalize", {"macenko.", "tiling.target_mpp"},
         [](const Context& c) { return work_files(c, {"selected.csv", "tiles_digest.csv", "reference/profile.txt"}); },
         fixed({"normalized_digest.csv"}), stage_normalize},
        {"score", {"scorer.", "tiling.tile_size", "tiling.target_mpp"},
         [](const Context& c) { return concat(work_files(c, {"selected.csv", "normalized_digest.csv"}), truth_inputs(c)); },
         fixed({"scores/subtype.csv"}), stage_score},
        {"threshold", {"thresholds.", "scorer.pair_sum"},
         [](const Context& c) {
             return concat(work_files(c, {"scores/subtype.csv", "selected.csv", "split.csv"}),
                           std::vector<fs::path>{c.cfg.path("paths.manifest")});
         },
         fixed({"thresholds.csv"}), stage_threshold},
        {"features", {"features.", "scorer.pair_sum"},
         [](const Context& c) {
             return concat(work_files(c, {"scores/subtype.csv", "thresholds.csv", "selected.csv", "split.csv"}),
                           std::vector<fs::path>{c.cfg.path("paths.manifest")});
         },
         fixed({"features/xgb.csv", "features/test.csv"}), stage_features},
        {"train", {"gbdt.", "split.xgb_train_fraction"},
         [](const Context& c) {
             return concat(work_files(c, {"features/xgb.csv"}), std::vector<fs::path>{c.cfg.path("paths.manifest")});
         },
         fixed({"model/gbdt.txt", "model/train_log.csv"}), stage_train},
        {"predict", {}, [](const Context& c) { return work_files(c, {"model/gbdt.txt", "features/test.csv"}); },
         fixed({"predictions.csv"}), stage_predict},
        {"evaluate", {"bootstrap."}, [](const Context& c) { return work_files(c, {"predictions.csv"}); },
         fixed({"report/report.csv", "report/report.txt", "report/confusion.csv"}), stage_evaluate},
        {"heatmap", {"heatmap.", "tiling.tile_size", "tiling.target_mpp", "scorer.pair_sum"},
         [](const Context& c) {
             return concat(manifest_and_images(c), work_files(c, {"tiles.csv", "scores/tumor.csv", "split.csv"}));
         },
         fixed({"heatmaps_digest.csv"}), stage_heatmap},
    };
    return specs;
}

const StageSpec& find_stage(const std::string& name) {
    for (const auto& s : stages())
        if (s.name == name) return s;
    throw ValidationError(fmt::format("unknown stage '{}'", name));
}

std::string rel_name(const fs::path& p, const Context& ctx) {
    auto rel = p.lexically_relative(ctx.work);
    if (!rel.empty() && *rel.begin() != "..") return rel.generic_string();
    return p.lexically_normal().generic_string();
}

}  // namespace

const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> n;
        for (const auto& s : stages()) n.push_back(s.name);
        return n;
    }();
    return names;
}

StageResult run_stage(const std::string& name, const Config& config, const RunOptions& options) {
    const auto& spec = find_stage(name);
    config.validate();
    Context ctx{config, fs::absolute(config.path("paths.work_dir")).lexically_normal(),
                derive_seed(config.seed(), name)};
    fs::create_directories(ctx.work / "provenance");
    const auto prov_path = ctx.work / "provenance" / (name + ".json");

    try {
        const std::string canon = "seed=" + config.get("seed") + "\n" + config.canonical(spec.config_keys);
        const std::string config_hash = io::sha256_hex(canon);

        ordered_json inputs = ordered_json::object();
        for (const auto& p : spec.inputs(ctx)) {
            if (!fs::exists(p))
                throw ValidationError(fmt::format("missing input '{}' (run the upstream stage first)", p.string()));
            inputs[rel_name(p, ctx)] = io::sha256_file(p);
        }
        const auto outputs = spec.outputs(ctx);

        StageResult result{name, false, {}};
        if (!options.force && fs::exists(prov_path)) {
            try {
                const auto prev = ordered_json::parse(io::read_file(prov_path));
                bool fresh = prev.at("config_hash") == config_hash && prev.at("inputs") == inputs;
                for (const auto& o : outputs) {
                    if (!fresh) break;
                    fresh = fs::exists(ctx.at(o)) && prev.at("outputs").contains(o) &&
                            prev.at("outputs").at(o) == io::sha256_file(ctx.at(o));
                    if (fresh) result.outputs[o] = prev.at("outputs").at(o);
                }
                if (fresh) {
                    spdlog::info("{}: skipped (up to date)", name);
                    result.skipped = true;
                    return result;
                }
            } catch (const nlohmann::json::exception&) {
                spdlog::warn("{}: unreadable provenance record, rerunning", name);
            }
            result.outputs.clear();
        }

        spdlog::info("{}: running", name);
        fs::remove(prov_path);
        spec.body(ctx);

        ordered_json out = ordered_json::object();
        for (const auto& o : outputs) {
            if (!fs::exists(ctx.at(o))) throw RuntimeError(fmt::format("stage did not produce '{}'", o));
            result.outputs[o] = io::sha256_file(ctx.at(o));
            out[o] = result.outputs[o];
        }
        ordered_json prov;
        prov["stage"] = name;
        prov["config_hash"] = config_hash;
        prov["config"] = canon;
        prov["seed"] = ctx.seed;
        prov["inputs"] = inputs;
        prov["outputs"] = out;
        prov["timestamp"] = now_utc();
        io::write_file(prov_path, prov.dump(2) + "\n");
        return result;
    } catch (const Error& e) {
        const auto what = fmt::format("stage {}: {}", name, e.what());
        switch (e.kind()) {
            case ErrorKind::Validation: throw ValidationError(what);
            case ErrorKind::Protocol: throw ProtocolError(what);
            default: throw RuntimeError(what);
        }
    } catch (const nlohmann::json::exception& e) {
        throw RuntimeError(fmt::format("stage {}: {}", name, e.what()));
    } catch (const fs::filesystem_error& e) {
        throw RuntimeError(fmt::format("stage {}: {}", name, e.what()));
    }
}

std::vector<StageResult> run_all(const Config& config, const RunOptions& options) {
    config.validate();
    std::vector<StageResult> results;
    for (const auto& name : stage_names()) results.push_back(run_stage(name, config, options));
    return results;
}

}  // namespace histotype::pipeline
