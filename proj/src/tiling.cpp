#include "histotype/tiling.hpp"

#include "histotype/common.hpp"
#include "histotype/io.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <set>

namespace histotype {

TissueMask TissueMask::full(int w, int h, int downsample) {
    TissueMask m;
    m.downsample = downsample;
    m.source_width = w;
    m.source_height = h;
    m.width = (w + downsample - 1) / downsample;
    m.height = (h + downsample - 1) / downsample;
    m.cells.assign(static_cast<std::size_t>(m.width) * m.height, 1);
    return m;
}

std::string make_tile_id(const std::string& wsi_id, int x, int y) { return fmt::format("{}_{}_{}", wsi_id, x, y); }

namespace {

struct Contribution {
    int src;
    double weight;
};

// Box-filter weights for one axis: output cell i covers [i*scale, (i+1)*scale)
// in source coordinates.
std::vector<std::vector<Contribution>> axis_weights(int out_dim, int src_dim, double scale) {
    std::vector<std::vector<Contribution>> w(static_cast<std::size_t>(out_dim));
    for (int i = 0; i < out_dim; ++i) {
        const double lo = i * scale;
        const double hi = std::min((i + 1) * scale, static_cast<double>(src_dim));
        const double span = hi - lo;
        for (int s = static_cast<int>(std::floor(lo)); s < src_dim && s < hi; ++s) {
            const double overlap = std::min(hi, s + 1.0) - std::max(lo, static_cast<double>(s));
            if (overlap > 0) w[i].push_back({s, overlap / span});
        }
    }
    return w;
}

std::uint8_t to_u8(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

}  // namespace

RasterImage resample_to_target_mpp(const RasterImage& image, double target_mpp) {
    image.validate();
    if (!(target_mpp > 0)) throw ValidationError("target mpp must be positive");
    if (target_mpp < image.mpp * (1.0 - 1e-12))
        throw ValidationError(fmt::format("upsampling from {} to {} mpp is not supported", image.mpp, target_mpp));
    if (std::abs(target_mpp - image.mpp) <= 1e-12 * image.mpp) {
        RasterImage copy = image;
        copy.mpp = target_mpp;
        return copy;
    }
    const double scale = target_mpp / image.mpp;
    const int out_w = static_cast<int>(std::floor(image.width / scale + 1e-9));
    const int out_h = static_cast<int>(std::floor(image.height / scale + 1e-9));
    RasterImage out(out_w, out_h, target_mpp);
    if (out.empty()) return out;

    const auto wx = axis_weights(out_w, image.width, scale);
    const auto wy = axis_weights(out_h, image.height, scale);

    // horizontal pass over every source row, then vertical
    std::vector<double> rows(static_cast<std::size_t>(out_w) * image.height * 3, 0.0);
    for (int y = 0; y < image.height; ++y) {
        const auto* src = image.at(0, y);
        double* dst = rows.data() + static_cast<std::size_t>(y) * out_w * 3;
        for (int ox = 0; ox < out_w; ++ox)
            for (const auto& c : wx[ox])
                for (int ch = 0; ch < 3; ++ch) dst[ox * 3 + ch] += c.weight * src[c.src * 3 + ch];
    }
    std::vector<double> acc(static_cast<std::size_t>(out_w) * 3);
    for (int oy = 0; oy < out_h; ++oy) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (const auto& c : wy[oy]) {
            const double* row = rows.data() + static_cast<std::size_t>(c.src) * out_w * 3;
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += c.weight * row[i];
        }
        auto* dst = out.at(0, oy);
        for (std::size_t i = 0; i < acc.size(); ++i) dst[i] = to_u8(acc[i]);
    }
    return out;
}

RasterImage downsample_box(const RasterImage& image, int factor) {
    if (factor < 1) throw ValidationError("downsample factor must be >= 1");
    if (factor == 1) return image;
    const int w = (image.width + factor - 1) / factor;
    const int h = (image.height + factor - 1) / factor;
    RasterImage out(w, h, image.mpp * factor);
    for (int by = 0; by < h; ++by) {
        for (int bx = 0; bx < w; ++bx) {
            std::array<unsigned, 3> sum{};
            unsigned count = 0;
            for (int y = by * factor; y < std::min(image.height, (by + 1) * factor); ++y)
                for (int x = bx * factor; x < std::min(image.width, (bx + 1) * factor); ++x) {
                    const auto* p = image.at(x, y);
                    for (int c = 0; c < 3; ++c) sum[c] += p[c];
                    ++count;
                }
            auto* d = out.at(bx, by);
            for (int c = 0; c < 3; ++c) d[c] = static_cast<std::uint8_t>((sum[c] + count / 2) / count);
        }
    }
    return out;
}

std::vector<std::uint8_t> saturation_channel(const RasterImage& image) {
    std::vector<std::uint8_t> s(image.pixel_count());
    for (std::size_t i = 0; i < s.size(); ++i) {
        const auto* p = image.pixels.data() + i * 3;
        const unsigned mx = std::max({p[0], p[1], p[2]});
        const unsigned mn = std::min({p[0], p[1], p[2]});
        s[i] = mx == 0 ? 0 : static_cast<std::uint8_t>((255 * (mx - mn) + mx / 2) / mx);
    }
    return s;
}

std::optional<int> otsu_threshold(const std::vector<std::uint8_t>& values) {
    std::array<double, 256> hist{};
    for (auto v : values) hist[v] += 1.0;
    const auto occupied = std::count_if(hist.begin(), hist.end(), [](double c) { return c > 0; });
    if (occupied < 2) return std::nullopt;

    const double total = static_cast<double>(values.size());
    double sum_all = 0.0;
    for (int i = 0; i < 256; ++i) sum_all += i * hist[i];

    double w0 = 0.0, sum0 = 0.0, best = -1.0;
    int best_t = 0;
    for (int t = 0; t < 256; ++t) {
        w0 += hist[t];
        sum0 += t * hist[t];
        const double w1 = total - w0;
        if (w0 == 0.0 || w1 == 0.0) continue;
        const double m0 = sum0 / w0;
        const double m1 = (sum_all - sum0) / w1;
        const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if (between > best) {
            best = between;
            best_t = t;
        }
    }
    return best_t;
}

namespace {

std::vector<std::uint8_t> morph(const std::vector<std::uint8_t>& in, int w, int h, bool dilate) {
    std::vector<std::uint8_t> out(in.size());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            bool v = !dilate;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int nx = x + dx, ny = y + dy;
                    if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
                    const bool cell = in[static_cast<std::size_t>(ny) * w + nx] != 0;
                    v = dilate ? (v || cell) : (v && cell);
                }
            out[static_cast<std::size_t>(y) * w + x] = v ? 1 : 0;
        }
    return out;
}

}  // namespace

TissueMask detect_tissue(const RasterImage& image, int downsample, const TissueParams& params) {
    if (image.empty()) throw ValidationError("tissue detection on an empty image");
    if (downsample < 1) throw ValidationError("tissue mask downsample must be >= 1");
    image.validate();

    const auto small = downsample_box(image, downsample);
    const auto sat = saturation_channel(small);
    double threshold = params.saturation_threshold;
    if (params.use_otsu) {
        if (auto t = otsu_threshold(sat)) threshold = *t;
    }

    TissueMask mask;
    mask.downsample = downsample;
    mask.source_width = image.width;
    mask.source_height = image.height;
    mask.width = small.width;
    mask.height = small.height;
    mask.cells.resize(sat.size());
    for (std::size_t i = 0; i < sat.size(); ++i) mask.cells[i] = sat[i] > threshold ? 1 : 0;

    // closing: dilate, then erode
    mask.cells = morph(morph(mask.cells, mask.width, mask.height, true), mask.width, mask.height, false);
    return mask;
}

double tissue_fraction(const TissueMask& mask, int x, int y, int size) {
    const int d = mask.downsample;
    long long covered = 0;
    for (int cy = y / d; cy < mask.height && cy * d < y + size; ++cy) {
        const int oy = std::min(y + size, std::min((cy + 1) * d, mask.source_height)) - std::max(y, cy * d);
        if (oy <= 0) continue;
        for (int cx = x / d; cx < mask.width && cx * d < x + size; ++cx) {
            if (!mask.at(cx, cy)) continue;
            const int ox = std::min(x + size, std::min((cx + 1) * d, mask.source_width)) - std::max(x, cx * d);
            if (ox > 0) covered += static_cast<long long>(ox) * oy;
        }
    }
    return static_cast<double>(covered) / (static_cast<double>(size) * size);
}

int origins_per_axis(int dim, int tile_size, int stride) {
    if (dim < tile_size) return 0;
    return (dim - tile_size) / stride + 1;
}

TileGrid plan_tiles(const std::string& wsi_id, int width, int height, int tile_size, int overlap,
                    const TissueMask& mask, double min_tissue_fraction) {
    if (tile_size < 1) throw ValidationError("tile size must be positive");
    if (overlap < 0 || overlap >= tile_size)
        throw ValidationError(fmt::format("overlap {} must satisfy 0 <= overlap < tile size {}", overlap, tile_size));
    if (!(min_tissue_fraction >= 0.0 && min_tissue_fraction <= 1.0))
        throw ValidationError("min tissue fraction must be in [0, 1]");
    if (mask.source_width != width || mask.source_height != height)
        throw ValidationError("tissue mask does not match the image dimensions");

    TileGrid grid;
    grid.tile_size = tile_size;
    grid.stride = tile_size - overlap;
    grid.min_tissue_fraction = min_tissue_fraction;
    if (tile_size > width || tile_size > height) {
        spdlog::warn("{}: tile size {} exceeds image {}x{}; no tiles planned", wsi_id, tile_size, width, height);
        return grid;
    }
    const int nx = origins_per_axis(width, tile_size, grid.stride);
    const int ny = origins_per_axis(height, tile_size, grid.stride);
    for (int j = 0; j < ny; ++j) {
        for (int i = 0; i < nx; ++i) {
            const int x = i * grid.stride, y = j * grid.stride;
            const double frac = tissue_fraction(mask, x, y, tile_size);
            if (frac < min_tissue_fraction) continue;
            grid.tiles.push_back({wsi_id, make_tile_id(wsi_id, x, y), x, y, frac});
        }
    }
    return grid;
}

RasterImage extract_tile(const RasterImage& image, const TileRecord& record, int tile_size) {
    if (record.x < 0 || record.y < 0 || record.x + tile_size > image.width || record.y + tile_size > image.height)
        throw ValidationError(fmt::format("tile {} at ({}, {}) size {} is outside the {}x{} image", record.tile_id,
                                          record.x, record.y, tile_size, image.width, image.height));
    RasterImage out(tile_size, tile_size, image.mpp);
    const std::size_t row_bytes = static_cast<std::size_t>(tile_size) * 3;
    for (int r = 0; r < tile_size; ++r)
        std::memcpy(out.at(0, r), image.at(record.x, record.y + r), row_bytes);
    return out;
}

void save_tile_manifest(const std::filesystem::path& path, const std::vector<TileRecord>& tiles) {
    std::string out = "tile_id,wsi_id,x,y,tissue_fraction\n";
    for (const auto& t : tiles)
        out += fmt::format("{},{},{},{},{}\n", t.tile_id, t.wsi_id, t.x, t.y, io::format_real(t.tissue_fraction));
    io::write_file(path, out);
}

std::vector<TileRecord> load_tile_manifest(const std::filesystem::path& path) {
    auto table = io::read_csv(path, {"tile_id", "wsi_id", "x", "y", "tissue_fraction"});
    std::vector<TileRecord> tiles;
    std::set<std::string> seen;
    for (const auto& row : table.rows) {
        auto where = fmt::format("{}: line {}", path.string(), row.line);
        TileRecord t;
        t.tile_id = row.fields[0];
        t.wsi_id = row.fields[1];
        t.x = static_cast<int>(io::parse_int(row.fields[2], where));
        t.y = static_cast<int>(io::parse_int(row.fields[3], where));
        t.tissue_fraction = io::parse_real(row.fields[4], where);
        if (!seen.insert(t.tile_id).second) throw ValidationError(where + ": duplicate tile_id " + t.tile_id);
        tiles.push_back(std::move(t));
    }
    return tiles;
}

}  // namespace histotype
