#pragma once

#include "histotype/raster.hpp"

#include <cstdint>
#include <optional>
#include <filesystem>
#include <string>
#include <vector>

namespace histotype {

/// Binary tissue mask on a grid `downsample` times coarser than its source.
struct TissueMask {
    int width = 0;
    int height = 0;
    int downsample = 1;
    int source_width = 0;
    int source_height = 0;
    std::vector<std::uint8_t> cells;  // 0 or 1, row-major

    bool at(int x, int y) const { return cells[static_cast<std::size_t>(y) * width + x] != 0; }

    /// A mask that marks every pixel of a w x h image as tissue.
    static TissueMask full(int w, int h, int downsample = 1);
};

struct TissueParams {
    /// Saturation threshold in [0, 255]; used directly when Otsu is off and as
    /// the fallback when the saturation histogram has a single value.
    double saturation_threshold = 20.0;
    bool use_otsu = true;
};

struct TileRecord {
    std::string wsi_id;
    std::string tile_id;
    int x = 0;
    int y = 0;
    double tissue_fraction = 0.0;

    bool operator==(const TileRecord&) const = default;
};

std::string make_tile_id(const std::string& wsi_id, int x, int y);

struct TileGrid {
    int tile_size = 512;
    int stride = 512;
    double min_tissue_fraction = 0.5;
    std::vector<TileRecord> tiles;  // row-major
};

/// Area-averaging downsample to `target_mpp`. Output size is
/// floor(dim * mpp / target_mpp). Same resolution returns an exact copy.
RasterImage resample_to_target_mpp(const RasterImage& image, double target_mpp);

/// Block-average by an integer factor; partial edge blocks average the pixels
/// they contain, so the result is ceil(dim / factor) on each axis.
RasterImage downsample_box(const RasterImage& image, int factor);

/// HSV saturation (max - min) / max scaled to [0, 255] per pixel.
std::vector<std::uint8_t> saturation_channel(const RasterImage& image);

/// Otsu threshold on a 256-bin histogram. Returns nullopt when every sample
/// falls in one bin.
std::optional<int> otsu_threshold(const std::vector<std::uint8_t>& values);

/// Tissue = saturation above threshold on the downsampled image, followed by
/// one 3x3 morphological closing.
TissueMask detect_tissue(const RasterImage& image, int downsample, const TissueParams& params = {});

/// Area-weighted fraction of tissue inside the given footprint.
double tissue_fraction(const TissueMask& mask, int x, int y, int size);

/// Number of grid origins along an axis of length `dim`.
int origins_per_axis(int dim, int tile_size, int stride);

TileGrid plan_tiles(const std::string& wsi_id, int width, int height, int tile_size, int overlap,
                    const TissueMask& mask, double min_tissue_fraction);

RasterImage extract_tile(const RasterImage& image, const TileRecord& record, int tile_size);

/// Tile manifest CSV: tile_id,wsi_id,x,y,tissue_fraction
void save_tile_manifest(const std::filesystem::path& path, const std::vector<TileRecord>& tiles);
std::vector<TileRecord> load_tile_manifest(const std::filesystem::path& path);

}  // namespace histotype
