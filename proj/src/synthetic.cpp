#include "histotype/synthetic.hpp"

#include "histotype/io.hpp"
#include "histotype/rng.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace histotype {

namespace {

constexpr Vec3 kHematoxylin = {0.650, 0.704, 0.286};
constexpr Vec3 kEosin = {0.072, 0.990, 0.105};

// nuclei per 1000 target-resolution pixels
double tumor_nuclei_density(const std::string& label) {
    if (label == "LumA") return 4.0;
    if (label == "LumB") return 5.5;
    if (label == "HER2") return 7.0;
    if (label == "Basal") return 8.5;
    return 6.0;
}
constexpr double kNormalNucleiDensity = 1.5;
constexpr double kLn10 = std::numbers::ln10;

Vec3 perturb(const Vec3& v, Xoshiro256& rng) {
    Vec3 out;
    double n = 0;
    for (int k = 0; k < 3; ++k) {
        out[k] = std::max(0.02, v[k] + 0.03 * rng.normal());
        n += out[k] * out[k];
    }
    n = std::sqrt(n);
    for (auto& x : out) x /= n;
    return out;
}

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
    const double dx = bx - ax, dy = by - ay;
    const double len2 = dx * dx + dy * dy;
    const double t = len2 > 0 ? std::clamp(((px - ax) * dx + (py - ay) * dy) / len2, 0.0, 1.0) : 0.0;
    const double cx = ax + t * dx - px, cy = ay + t * dy - py;
    return std::sqrt(cx * cx + cy * cy);
}

std::string wsi_name(const std::string& label, int index) { return fmt::format("{}_{:03d}", label, index); }

}  // namespace

SyntheticSlide render_slide(const SyntheticCohortConfig& config, const std::string& label, int index) {
    const std::string wsi_id = wsi_name(label, index);
    Xoshiro256 rng(derive_seed(config.seed, wsi_id));

    const bool high_res = rng.uniform() < config.high_res_fraction;
    const double f = high_res ? 2.0 : 1.0;  // source pixels per target pixel
    const double mpp = config.target_mpp / f;
    const double S = config.slide_size;
    const int size = static_cast<int>(std::lround(S * f));

    SlideTruth truth;
    truth.wsi_id = wsi_id;
    truth.label = label;
    truth.source_mpp = mpp;
    truth.tissue = {f * S * (0.5 + rng.uniform(-0.03, 0.03)), f * S * (0.5 + rng.uniform(-0.03, 0.03)),
                    f * S * rng.uniform(0.36, 0.42)};
    const double tumor_r = f * S * rng.uniform(0.17, 0.21);
    const double reach = std::max(0.0, truth.tissue.r - tumor_r - f * S * 0.08);
    const double theta = rng.uniform(0.0, 2 * std::numbers::pi);
    const double dist = reach * std::sqrt(rng.uniform());
    truth.tumor = {truth.tissue.cx + dist * std::cos(theta), truth.tissue.cy + dist * std::sin(theta), tumor_r};
    truth.stain_matrix = {perturb(kHematoxylin, rng), perturb(kEosin, rng)};

    const std::size_t n = static_cast<std::size_t>(size) * size;
    std::vector<float> h(n, 0.0f), e(n, 0.0f);
    std::vector<std::uint8_t> ink(n, 0);
    auto idx = [size](int x, int y) { return static_cast<std::size_t>(y) * size + x; };

    // stroma
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            if (truth.tissue.contains(x + 0.5, y + 0.5)) {
                h[idx(x, y)] = static_cast<float>(0.15 + 0.1 * (rng.uniform() - 0.5));
                e[idx(x, y)] = static_cast<float>(0.55 + 0.2 * (rng.uniform() - 0.5));
            }

    // nuclei
    const double nucleus_r = 2.5 * f;
    auto stamp_nuclei = [&](const Disk& region, double density, bool outside_tumor) {
        const double area_target = std::numbers::pi * region.r * region.r / (f * f);
        const int count = static_cast<int>(std::lround(density * area_target / 1000.0));
        for (int i = 0; i < count; ++i) {
            const double a = rng.uniform(0.0, 2 * std::numbers::pi);
            const double d = region.r * std::sqrt(rng.uniform());
            const double cx = region.cx + d * std::cos(a), cy = region.cy + d * std::sin(a);
            if (outside_tumor && truth.tumor.contains(cx, cy)) continue;
            const double strength = 0.8 + 0.2 * rng.uniform();
            const int x0 = std::max(0, static_cast<int>(cx - nucleus_r)), x1 = std::min(size - 1, static_cast<int>(cx + nucleus_r));
            const int y0 = std::max(0, static_cast<int>(cy - nucleus_r)), y1 = std::min(size - 1, static_cast<int>(cy + nucleus_r));
            for (int y = y0; y <= y1; ++y)
                for (int x = x0; x <= x1; ++x)
                    if (Disk{cx, cy, nucleus_r}.contains(x + 0.5, y + 0.5) && truth.tissue.contains(x + 0.5, y + 0.5))
                        h[idx(x, y)] = static_cast<float>(std::max<double>(h[idx(x, y)], strength));
        }
    };
    stamp_nuclei(truth.tissue, kNormalNucleiDensity, true);
    stamp_nuclei(truth.tumor, tumor_nuclei_density(label), false);

    if (config.artifacts) {
        // everything placed on the side of the tissue away from the tumor
        const double away = std::atan2(truth.tumor.cy - truth.tissue.cy, truth.tumor.cx - truth.tissue.cx) +
                            std::numbers::pi;
        auto polar = [&](double angle, double radius) {
            return std::pair{truth.tissue.cx + radius * std::cos(angle), truth.tissue.cy + radius * std::sin(angle)};
        };

        // folded tissue: a band of doubled thickness
        const double fold_angle = away + rng.uniform(-0.6, 0.6);
        auto [fax, fay] = polar(fold_angle - 0.5, truth.tissue.r * 0.85);
        auto [fbx, fby] = polar(fold_angle + 0.5, truth.tissue.r * 0.85);
        const double fold_w = 3.0 * f;
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                if (!truth.tissue.contains(x + 0.5, y + 0.5) || truth.tumor.contains(x + 0.5, y + 0.5)) continue;
                if (segment_distance(x + 0.5, y + 0.5, fax, fay, fbx, fby) <= fold_w) {
                    h[idx(x, y)] *= 2.0f;
                    e[idx(x, y)] *= 2.0f;
                }
            }

        // white holes
        for (int k = 0; k < 2; ++k) {
            auto [hx, hy] = polar(away + rng.uniform(-1.2, 1.2), truth.tissue.r * rng.uniform(0.45, 0.7));
            const Disk hole{hx, hy, S * f * rng.uniform(0.03, 0.05)};
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x)
                    if (hole.contains(x + 0.5, y + 0.5) && !truth.tumor.contains(x + 0.5, y + 0.5))
                        h[idx(x, y)] = e[idx(x, y)] = 0.0f;
        }

        // marker ink crossing the tissue border
        const double ink_angle = away + rng.uniform(-0.8, 0.8);
        auto [iax, iay] = polar(ink_angle, truth.tissue.r * 0.75);
        auto [ibx, iby] = polar(ink_angle + 0.3, truth.tissue.r * 1.15);
        const double ink_w = 2.5 * f;
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x)
                if (!truth.tumor.contains(x + 0.5, y + 0.5) &&
                    segment_distance(x + 0.5, y + 0.5, iax, iay, ibx, iby) <= ink_w)
                    ink[idx(x, y)] = 1;
    }

    SyntheticSlide slide;
    slide.image = RasterImage(size, size, mpp);
    const auto& M = truth.stain_matrix;
    for (std::size_t i = 0; i < n; ++i) {
        auto* p = slide.image.pixels.data() + 3 * i;
        if (ink[i]) {
            p[0] = static_cast<std::uint8_t>(35 + rng.below(10));
            p[1] = static_cast<std::uint8_t>(65 + rng.below(10));
            p[2] = static_cast<std::uint8_t>(150 + rng.below(10));
            continue;
        }
        const std::uint64_t bits = rng.next();
        for (int c = 0; c < 3; ++c) {
            const double noise = 0.001 * static_cast<double>((bits >> (8 * c)) & 0x7);
            const double od = M[0][c] * h[i] + M[1][c] * e[i] + noise;
            p[c] = static_cast<std::uint8_t>(std::lround(std::clamp(255.0 * std::exp(-kLn10 * od), 0.0, 255.0)));
        }
    }

    slide.truth = truth;
    slide.record.wsi_id = wsi_id;
    slide.record.patient_id = fmt::format("{}_P{:03d}", label, index % 5 == 4 ? index - 1 : index);
    slide.record.label = label;
    slide.record.image_path = std::filesystem::path("images") / (wsi_id + ".png");
    slide.record.source_mpp = mpp;
    return slide;
}

SyntheticCohort generate_synthetic_cohort(const SyntheticCohortConfig& config, const std::filesystem::path& out_dir) {
    if (config.wsis_per_class < 1) throw ValidationError("wsis_per_class must be >= 1");
    if (config.classes.empty()) throw ValidationError("synthetic cohort needs at least one class");
    if (config.slide_size < 16) throw ValidationError("slide_size must be >= 16");
    if (!(config.signal >= 0 && config.signal <= 1)) throw ValidationError("signal must be in [0, 1]");
    for (const auto& c : config.classes) canonical_label(c, Task::Subtyping);

    std::filesystem::create_directories(out_dir / "images");
    SyntheticCohort cohort;
    for (const auto& label : config.classes)
        for (int i = 0; i < config.wsis_per_class; ++i) {
            auto slide = render_slide(config, label, i);
            write_png(out_dir / slide.record.image_path, slide.image);
            cohort.manifest.records.push_back(slide.record);
            cohort.truth.push_back(slide.truth);
        }
    save_manifest(out_dir / "manifest.csv", cohort.manifest);
    save_ground_truth(out_dir / "ground_truth.csv", cohort.truth);
    io::write_file(out_dir / "pipeline.conf", synthetic_pipeline_config(config));
    spdlog::info("generated {} synthetic slides in {}", cohort.manifest.records.size(), out_dir.string());
    return cohort;
}

void save_ground_truth(const std::filesystem::path& path, const std::vector<SlideTruth>& truth) {
    std::string out =
        "wsi_id,label,source_mpp,tissue_cx,tissue_cy,tissue_r,tumor_cx,tumor_cy,tumor_r,h_r,h_g,h_b,e_r,e_g,e_b\n";
    auto r = [](double v) { return io::format_real(v); };
    for (const auto& t : truth) {
        const auto& m = t.stain_matrix;
        out += fmt::format("{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n", t.wsi_id, t.label, r(t.source_mpp),
                           r(t.tissue.cx), r(t.tissue.cy), r(t.tissue.r), r(t.tumor.cx), r(t.tumor.cy), r(t.tumor.r),
                           r(m[0][0]), r(m[0][1]), r(m[0][2]), r(m[1][0]), r(m[1][1]), r(m[1][2]));
    }
    io::write_file(path, out);
}

std::vector<SlideTruth> load_ground_truth(const std::filesystem::path& path) {
    const auto table = io::read_csv(path, {"wsi_id", "label", "source_mpp", "tissue_cx", "tissue_cy", "tissue_r",
                                           "tumor_cx", "tumor_cy", "tumor_r", "h_r", "h_g", "h_b", "e_r", "e_g", "e_b"});
    std::vector<SlideTruth> out;
    for (const auto& row : table.rows) {
        const auto ctx = fmt::format("{}:{}", path.string(), row.line);
        auto num = [&](int i) { return io::parse_real(row.fields[i], ctx); };
        SlideTruth t;
        t.wsi_id = row.fields[0];
        t.label = row.fields[1];
        t.source_mpp = num(2);
        t.tissue = {num(3), num(4), num(5)};
        t.tumor = {num(6), num(7), num(8)};
        t.stain_matrix = {Vec3{num(9), num(10), num(11)}, Vec3{num(12), num(13), num(14)}};
        out.push_back(t);
    }
    return out;
}

bool tile_is_tumor(const SlideTruth& truth, const TileRecord& tile, int tile_size, double target_mpp) {
    const double scale = target_mpp / truth.source_mpp;
    const double cx = (tile.x + tile_size / 2.0) * scale, cy = (tile.y + tile_size / 2.0) * scale;
    return truth.tumor.contains(cx, cy);
}

std::string synthetic_pipeline_config(const SyntheticCohortConfig& config) {
    return fmt::format(
        "# Pipeline configuration for a generated synthetic cohort. Keys not listed\n"
        "# take their defaults (see `histotype default-config`).\n"
        "\n"
        "paths.manifest = manifest.csv\n"
        "paths.work_dir = work\n"
        "seed = {}\n"
        "\n"
        "# small slides: tiles and overlap scaled down by the same factor\n"
        "tiling.tile_size = 32\n"
        "tiling.overlap.HER2 = 4\n"
        "tiling.mask_downsample = 4\n"
        "tiling.target_mpp = {}\n"
        "\n"
        "macenko.reference_wsis = 16\n"
        "\n"
        "scorer.kind = synthetic\n"
        "scorer.truth = ground_truth.csv\n"
        "scorer.signal = {}\n"
        "\n"
        "thresholds.mode = recompute\n"
        "\n"
        "# equal tile budget per slide, so tumor size carries no label information\n"
        "features.max_tiles = 8\n"
        "\n"
        "# the meta-classifier sees only a handful of slides per class\n"
        "gbdt.min_child_weight = 0.1\n"
        "\n"
        "heatmap.downsample = 2\n",
        config.seed, io::format_real(config.target_mpp), io::format_real(config.signal));
}

}  // namespace histotype
