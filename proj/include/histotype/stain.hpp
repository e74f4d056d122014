#pragma once

// Macenko stain separation and normalization.
//
// Stains mix linearly in optical density: OD = -log10(I / I0) = M * C, with
// M the 3x2 matrix of unit stain vectors (hematoxylin, eosin) and C the
// per-pixel concentrations. The stain plane is spanned by the top two
// eigenvectors of the OD covariance; the stain vectors are the robust
// extreme directions (alpha / 100 - alpha angle percentiles) in that plane.

#include "histotype/common.hpp"
#include "histotype/raster.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace histotype {

using Vec3 = std::array<double, 3>;

/// Thrown when a tile does not carry two distinguishable stains (blank
/// background, single stain, or a collapsed plane).
struct DegenerateStainError : RuntimeError {
    explicit DegenerateStainError(const std::string& what) : RuntimeError(what) {}
};

struct OpticalDensityField {
    int width = 0;
    int height = 0;
    std::vector<double> values;  // 3 per pixel

    std::size_t pixel_count() const { return values.size() / 3; }
    const double* at(std::size_t i) const { return values.data() + 3 * i; }
};

struct StainProfile {
    std::array<Vec3, 2> columns{};  // hematoxylin, eosin; unit norm
    std::array<double, 2> max_concentrations{};
};

struct MacenkoParams {
    double I0 = 255.0;
    double beta = 0.15;  // OD threshold; pixels with any channel below are dropped
    double alpha = 1.0;  // angular percentile
};

OpticalDensityField rgb_to_od(const RasterImage& tile, double I0 = 255.0);

StainProfile estimate_stain_profile(const OpticalDensityField& od, const MacenkoParams& params = {});

/// Least squares M * C ~= OD per pixel, negatives clamped to zero. Returns two
/// values per pixel.
std::vector<double> compute_concentrations(const OpticalDensityField& od, const std::array<Vec3, 2>& stain_matrix);

RasterImage normalize_tile(const RasterImage& tile, const StainProfile& source, const StainProfile& reference,
                           double I0 = 255.0);

/// Angle between two 3-vectors in degrees.
double angle_degrees(const Vec3& a, const Vec3& b);

struct MosaicEntry {
    std::string wsi_id;
    std::string tile_id;
};

struct ReferenceMosaic {
    RasterImage image;
    StainProfile profile;
    std::vector<MosaicEntry> provenance;  // row-major mosaic order
    int columns = 0;
};

using TileLoader = std::function<RasterImage(const MosaicEntry&)>;

/// Picks `n_wsis` slides (all of them, with a warning, if fewer qualify) and
/// one random tumor tile from each, assembles them row-major on a
/// ceil(sqrt(n)) wide grid and fits the reference profile on the tile pixels.
ReferenceMosaic build_reference_mosaic(const std::map<std::string, std::vector<std::string>>& tumor_tiles_by_wsi,
                                       const TileLoader& load, int n_wsis, std::uint64_t seed,
                                       const MacenkoParams& params = {});

std::string serialize_profile(const StainProfile& profile);
StainProfile parse_profile(const std::string& text);
void save_profile(const std::filesystem::path& path, const StainProfile& profile);
StainProfile load_profile(const std::filesystem::path& path);

}  // namespace histotype
