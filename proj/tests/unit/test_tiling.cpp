#include "histotype/rng.hpp"
#include "histotype/synthetic.hpp"
#include "histotype/tiling.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <set>

using namespace histotype;

namespace {

RasterImage constant(int w, int h, double mpp, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    RasterImage img(w, h, mpp);
    for (std::size_t i = 0; i < img.pixel_count(); ++i) {
        img.pixels[3 * i] = r;
        img.pixels[3 * i + 1] = g;
        img.pixels[3 * i + 2] = b;
    }
    return img;
}

RasterImage gradient(int w, int h) {
    RasterImage img(w, h, 0.5);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            auto* p = img.at(x, y);
            p[0] = static_cast<std::uint8_t>(x % 256);
            p[1] = static_cast<std::uint8_t>(y % 256);
            p[2] = static_cast<std::uint8_t>((x * 7 + y * 3) % 256);
        }
    return img;
}

std::vector<std::pair<int, int>> origins(const TileGrid& g) {
    std::vector<std::pair<int, int>> out;
    for (const auto& t : g.tiles) out.emplace_back(t.x, t.y);
    return out;
}

}  // namespace

TEST(Resample, HalvesQuarterMicronSlides) {
    const auto img = gradient(1024, 1024);
    auto src = img;
    src.mpp = 0.25;
    const auto out = resample_to_target_mpp(src, 0.5);
    EXPECT_EQ(out.width, 512);
    EXPECT_EQ(out.height, 512);
    EXPECT_EQ(out.mpp, 0.5);
    // area average of the 2x2 block, half-up rounding
    for (int y : {0, 100, 511})
        for (int x : {0, 37, 511})
            for (int c = 0; c < 3; ++c) {
                int sum = 0;
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx) sum += src.at(2 * x + dx, 2 * y + dy)[c];
                EXPECT_NEAR(out.at(x, y)[c], sum / 4.0, 0.5 + 1e-9);
            }
}

TEST(Resample, IdentityAndConstant) {
    const auto img = gradient(300, 200);
    EXPECT_EQ(resample_to_target_mpp(img, 0.5), img);
    const auto gray = constant(333, 129, 0.25, 128, 128, 128);
    const auto out = resample_to_target_mpp(gray, 0.5);
    EXPECT_EQ(out.width, 166);
    EXPECT_EQ(out.height, 64);
    for (auto v : out.pixels) EXPECT_EQ(v, 128);
    EXPECT_THROW(resample_to_target_mpp(img, 0.25), ValidationError);
}

TEST(Tissue, WhiteIsBackground) {
    const auto mask = detect_tissue(constant(64, 48, 0.5, 255, 255, 255), 4);
    EXPECT_EQ(mask.width, 16);
    EXPECT_EQ(mask.height, 12);
    for (auto c : mask.cells) EXPECT_EQ(c, 0);
}

TEST(Tissue, SaturatedIsForeground) {
    const auto mask = detect_tissue(constant(65, 47, 0.5, 200, 40, 120), 4);
    EXPECT_EQ(mask.width, 17);
    EXPECT_EQ(mask.height, 12);
    for (auto c : mask.cells) EXPECT_EQ(c, 1);
}

TEST(Tissue, RecoversGeneratorDisk) {
    SyntheticCohortConfig cfg;
    cfg.artifacts = false;
    cfg.seed = 3;
    for (int index = 0; index < 3; ++index) {
        const auto slide = render_slide(cfg, "LumB", index);
        const int d = 4;
        const auto mask = detect_tissue(slide.image, d);
        long inter = 0, uni = 0;
        for (int y = 0; y < mask.height; ++y)
            for (int x = 0; x < mask.width; ++x) {
                const bool truth = slide.truth.tissue.contains((x + 0.5) * d, (y + 0.5) * d);
                const bool got = mask.at(x, y);
                inter += truth && got;
                uni += truth || got;
            }
        EXPECT_GE(static_cast<double>(inter) / uni, 0.95) << "slide " << index;
    }
}

TEST(Tissue, EmptyImageRejected) { EXPECT_THROW(detect_tissue(RasterImage{}, 4), ValidationError); }

TEST(Plan, ExactTilingOfSquare) {
    const auto g = plan_tiles("s", 1024, 1024, 512, 0, TissueMask::full(1024, 1024), 0.5);
    EXPECT_EQ(origins(g), (std::vector<std::pair<int, int>>{{0, 0}, {512, 0}, {0, 512}, {512, 512}}));
    EXPECT_EQ(g.tiles[1].tile_id, "s_512_0");
}

TEST(Plan, OverlapMatchesEnumeration) {
    const auto g = plan_tiles("s", 1024, 1024, 512, 64, TissueMask::full(1024, 1024), 0.5);
    std::vector<std::pair<int, int>> expected;
    for (int y = 0; y + 512 <= 1024; ++y)
        for (int x = 0; x + 512 <= 1024; ++x)
            if (x % 448 == 0 && y % 448 == 0) expected.emplace_back(x, y);
    EXPECT_EQ(origins(g), expected);
    EXPECT_EQ(g.stride, 448);
}

TEST(Plan, BackgroundAndOversizedTiles) {
    TissueMask empty = TissueMask::full(1024, 1024, 16);
    std::fill(empty.cells.begin(), empty.cells.end(), 0);
    EXPECT_TRUE(plan_tiles("s", 1024, 1024, 512, 0, empty, 0.5).tiles.empty());
    EXPECT_TRUE(plan_tiles("s", 300, 1024, 512, 0, TissueMask::full(300, 1024), 0.5).tiles.empty());
    EXPECT_THROW(plan_tiles("s", 1024, 1024, 512, 512, TissueMask::full(1024, 1024), 0.5), ValidationError);
    EXPECT_THROW(plan_tiles("s", 1024, 1024, 512, 600, TissueMask::full(1024, 1024), 0.5), ValidationError);
}

TEST(Plan, StrideLawOnRandomTriples) {
    Xoshiro256 rng(12);
    for (int i = 0; i < 100; ++i) {
        const int tile = 1 + static_cast<int>(rng.below(64));
        const int overlap = static_cast<int>(rng.below(tile));
        const int w = tile + static_cast<int>(rng.below(200));
        const int h = tile + static_cast<int>(rng.below(200));
        const auto g = plan_tiles("s", w, h, tile, overlap, TissueMask::full(w, h), 0.0);
        const int stride = tile - overlap;
        EXPECT_EQ(g.tiles.size(), static_cast<std::size_t>(((w - tile) / stride + 1) * ((h - tile) / stride + 1)));
        for (const auto& t : g.tiles) {
            EXPECT_LE(t.x + tile, w);
            EXPECT_LE(t.y + tile, h);
        }
    }
}

TEST(Plan, TissueFractionMonotone) {
    SyntheticCohortConfig cfg;
    cfg.seed = 8;
    const auto slide = render_slide(cfg, "HER2", 1);
    const auto img = resample_to_target_mpp(slide.image, 0.5);
    const auto mask = detect_tissue(img, 4);
    std::set<std::string> previous;
    bool first = true;
    for (double t : {0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0}) {
        const auto g = plan_tiles("s", img.width, img.height, 32, 4, mask, t);
        std::set<std::string> kept;
        for (const auto& r : g.tiles) {
            kept.insert(r.tile_id);
            EXPECT_GE(r.tissue_fraction, t);
            EXPECT_LE(r.tissue_fraction, 1.0);
        }
        if (!first) EXPECT_TRUE(std::includes(previous.begin(), previous.end(), kept.begin(), kept.end()));
        previous = kept;
        first = false;
    }
    EXPECT_EQ(origins(plan_tiles("s", img.width, img.height, 32, 4, mask, 0.5)),
              origins(plan_tiles("s", img.width, img.height, 32, 4, mask, 0.5)));
}

TEST(Extract, MatchesDirectIndexing) {
    const auto img = gradient(200, 150);
    TileRecord r{"s", "s_0_0", 0, 0, 1.0};
    const auto t = extract_tile(img, r, 64);
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x)
            for (int c = 0; c < 3; ++c) ASSERT_EQ(t.at(x, y)[c], img.at(x, y)[c]);
    TileRecord edge{"s", "s_136_86", 200 - 64, 150 - 64, 1.0};
    const auto e = extract_tile(img, edge, 64);
    EXPECT_EQ(e.at(63, 63)[0], img.at(199, 149)[0]);
    EXPECT_THROW(extract_tile(img, TileRecord{"s", "x", 137, 0, 1.0}, 64), ValidationError);
    const auto c = extract_tile(constant(100, 100, 0.5, 9, 8, 7), TileRecord{"s", "y", 30, 20, 1.0}, 50);
    for (std::size_t i = 0; i < c.pixel_count(); ++i) EXPECT_EQ(c.pixels[3 * i + 1], 8);
}

TEST(Extract, ZeroOverlapTilesPartitionCroppedImage) {
    const auto img = gradient(250, 170);
    const int tile = 48;
    const auto g = plan_tiles("s", img.width, img.height, tile, 0, TissueMask::full(img.width, img.height), 0.0);
    std::vector<int> hits(static_cast<std::size_t>(img.width) * img.height, 0);
    std::multiset<std::uint32_t> tile_pixels, crop_pixels;
    for (const auto& r : g.tiles) {
        const auto t = extract_tile(img, r, tile);
        for (int y = 0; y < tile; ++y)
            for (int x = 0; x < tile; ++x) {
                ++hits[static_cast<std::size_t>(r.y + y) * img.width + r.x + x];
                const auto* p = t.at(x, y);
                tile_pixels.insert(p[0] << 16 | p[1] << 8 | p[2]);
            }
    }
    const int cw = (img.width / tile) * tile, ch = (img.height / tile) * tile;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const int expected = x < cw && y < ch ? 1 : 0;
            ASSERT_EQ(hits[static_cast<std::size_t>(y) * img.width + x], expected);
            if (expected) {
                const auto* p = img.at(x, y);
                crop_pixels.insert(p[0] << 16 | p[1] << 8 | p[2]);
            }
        }
    EXPECT_EQ(tile_pixels, crop_pixels);
}

TEST(TileManifest, RoundTrip) {
    testing_support::TempDir dir;
    const auto g = plan_tiles("w1", 256, 256, 64, 0, TissueMask::full(256, 256), 0.0);
    save_tile_manifest(dir / "tiles.csv", g.tiles);
    EXPECT_EQ(load_tile_manifest(dir / "tiles.csv"), g.tiles);
}
