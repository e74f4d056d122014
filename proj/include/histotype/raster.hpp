#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace histotype {

/// 8-bit interleaved RGB raster with its physical resolution.
struct RasterImage {
    int width = 0;
    int height = 0;
    double mpp = 0.5;
    std::vector<std::uint8_t> pixels;  // width * height * 3

    RasterImage() = default;
    RasterImage(int w, int h, double mpp_, std::uint8_t fill = 0)
        : width(w), height(h), mpp(mpp_), pixels(static_cast<std::size_t>(w) * h * 3, fill) {}

    std::size_t offset(int x, int y) const {
        return (static_cast<std::size_t>(y) * width + x) * 3;
    }
    std::uint8_t* at(int x, int y) { return pixels.data() + offset(x, y); }
    const std::uint8_t* at(int x, int y) const { return pixels.data() + offset(x, y); }

    bool empty() const { return width <= 0 || height <= 0; }
    std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }

    /// Throws ValidationError when the buffer size or mpp is inconsistent.
    void validate() const;

    bool operator==(const RasterImage& o) const {
        return width == o.width && height == o.height && pixels == o.pixels;
    }
};

/// Pluggable decoder. Real WSI containers (pyramidal TIFF, vendor formats)
/// plug in here; the core ships PNG and binary PPM.
class ImageReader {
public:
    virtual ~ImageReader() = default;
    virtual bool can_read(const std::filesystem::path& path) const = 0;
    virtual RasterImage read(const std::filesystem::path& path) const = 0;
};

void register_image_reader(std::shared_ptr<const ImageReader> reader);

/// Decodes with the first registered reader that accepts the path. The
/// returned image carries `mpp`, which file headers do not provide.
RasterImage read_image(const std::filesystem::path& path, double mpp);

/// Lossless PNG output.
void write_png(const std::filesystem::path& path, const RasterImage& image);
void write_ppm(const std::filesystem::path& path, const RasterImage& image);

}  // namespace histotype
