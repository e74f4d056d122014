#pragma once

#include "histotype/raster.hpp"

#include <array>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace histotype {

using Rgb = std::array<double, 3>;

/// Green at 0, yellow at 0.5, red at 1, linear in between; clamps outside.
Rgb default_ramp(double score);

struct HeatmapTile {
    std::string tile_id;
    int x = 0;  // full-resolution origin
    int y = 0;
    double score = 0.0;
};

struct HeatmapSpec {
    RasterImage base;  // slide already downsampled by `downsample`
    std::vector<HeatmapTile> tiles;
    int tile_size = 512;
    int downsample = 1;
    double opacity = 0.4;
    std::function<Rgb(double)> ramp = default_ramp;
};

/// Tints each tile footprint [floor(x/d), floor((x+T)/d)) with its ramp color.
/// Where footprints overlap the tints are averaged first; the result is then
/// alpha-blended over the base. Pixels outside every footprint are untouched.
RasterImage stitch_heatmap(const HeatmapSpec& spec);

/// Sidecar CSV `tile_id,score`.
void save_heatmap_scores(const std::filesystem::path& path, const std::vector<HeatmapTile>& tiles);

}  // namespace histotype
