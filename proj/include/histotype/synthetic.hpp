#pragma once

// Synthetic H&E cohort with known ground truth.
//
// Each slide is a white field holding one tissue disk with a tumor disk
// inside it. Pixels follow the absorption model I = I0 * 10^(-M C) with a
// per-slide stain matrix M; nuclei (hematoxylin) are stamped at a density
// that depends on the subtype and on tumor vs. normal tissue. Optional
// artifacts mimic the non-tumor tile categories a tumor classifier must
// reject: a marker-ink stroke, a folded (double thickness) band and white
// holes.

#include "histotype/manifest.hpp"
#include "histotype/raster.hpp"
#include "histotype/stain.hpp"
#include "histotype/tiling.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace histotype {

struct Disk {
    double cx = 0, cy = 0, r = 0;  // source pixels
    bool contains(double x, double y) const { return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r; }
};

struct SlideTruth {
    std::string wsi_id;
    std::string label;
    double source_mpp = 0.5;
    Disk tissue;
    Disk tumor;
    std::array<Vec3, 2> stain_matrix{};
};

struct SyntheticCohortConfig {
    std::vector<std::string> classes = {"LumA", "LumB", "HER2", "Basal"};
    int wsis_per_class = 20;
    int slide_size = 384;             // side length at `target_mpp`
    double target_mpp = 0.5;
    double high_res_fraction = 0.25;  // share of slides scanned at target_mpp / 2
    bool artifacts = true;
    double signal = 1.0;              // written into the generated pipeline config
    std::uint64_t seed = 0;
};

struct SyntheticSlide {
    SlideRecord record;
    SlideTruth truth;
    RasterImage image;
};

/// Renders a single slide; pure given (config, index within class, label).
SyntheticSlide render_slide(const SyntheticCohortConfig& config, const std::string& label, int index);

struct SyntheticCohort {
    CohortManifest manifest;
    std::vector<SlideTruth> truth;
};

/// Writes images/<wsi_id>.png, manifest.csv, ground_truth.csv and
/// pipeline.conf (a run-ready configuration) under `out_dir`.
SyntheticCohort generate_synthetic_cohort(const SyntheticCohortConfig& config, const std::filesystem::path& out_dir);

/// CSV `wsi_id,label,source_mpp,tissue_cx,tissue_cy,tissue_r,tumor_cx,tumor_cy,tumor_r,h_r,h_g,h_b,e_r,e_g,e_b`.
void save_ground_truth(const std::filesystem::path& path, const std::vector<SlideTruth>& truth);
std::vector<SlideTruth> load_ground_truth(const std::filesystem::path& path);

/// A tile is tumor when its center, mapped back to source pixels, lies in the
/// tumor disk.
bool tile_is_tumor(const SlideTruth& truth, const TileRecord& tile, int tile_size, double target_mpp);

/// Pipeline configuration text matching a generated cohort.
std::string synthetic_pipeline_config(const SyntheticCohortConfig& config);

}  // namespace histotype
