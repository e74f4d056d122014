#include "histotype/heatmap.hpp"

#include "histotype/common.hpp"
#include "histotype/io.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

namespace histotype {

Rgb default_ramp(double score) {
    const double s = std::clamp(score, 0.0, 1.0);
    if (s <= 0.5) return {255.0 * (s / 0.5), 255.0, 0.0};
    return {255.0, 255.0 * (1.0 - (s - 0.5) / 0.5), 0.0};
}

RasterImage stitch_heatmap(const HeatmapSpec& spec) {
    spec.base.validate();
    if (spec.downsample < 1) throw ValidationError("heatmap downsample must be >= 1");
    if (spec.tile_size < 1) throw ValidationError("heatmap tile size must be >= 1");
    if (!(spec.opacity >= 0 && spec.opacity <= 1)) throw ValidationError("heatmap opacity must be in [0, 1]");

    const int w = spec.base.width, h = spec.base.height, d = spec.downsample;
    std::vector<double> sum(static_cast<std::size_t>(w) * h * 3, 0.0);
    std::vector<int> hits(static_cast<std::size_t>(w) * h, 0);

    for (const auto& t : spec.tiles) {
        const int x0 = t.x / d, y0 = t.y / d;
        const int x1 = (t.x + spec.tile_size) / d, y1 = (t.y + spec.tile_size) / d;
        if (t.x < 0 || t.y < 0 || x1 > w || y1 > h)
            throw ValidationError(fmt::format("heatmap tile {} falls outside the {}x{} base image", t.tile_id, w, h));
        const Rgb c = spec.ramp(t.score);
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) {
                const std::size_t p = static_cast<std::size_t>(y) * w + x;
                ++hits[p];
                for (int k = 0; k < 3; ++k) sum[3 * p + k] += c[k];
            }
    }

    RasterImage out = spec.base;
    for (std::size_t p = 0; p < hits.size(); ++p) {
        if (hits[p] == 0) continue;
        for (int k = 0; k < 3; ++k) {
            const double tint = sum[3 * p + k] / hits[p];
            const double v = (1.0 - spec.opacity) * spec.base.pixels[3 * p + k] + spec.opacity * tint;
            out.pixels[3 * p + k] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
        }
    }
    return out;
}

void save_heatmap_scores(const std::filesystem::path& path, const std::vector<HeatmapTile>& tiles) {
    std::string out = "tile_id,score\n";
    for (const auto& t : tiles) out += fmt::format("{},{}\n", t.tile_id, io::format_real(t.score));
    io::write_file(path, out);
}

}  // namespace histotype
