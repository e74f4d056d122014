#include "histotype/raster.hpp"

#include "histotype/common.hpp"
#include "histotype/io.hpp"

#include <fmt/format.h>
#include <png.h>

#include <algorithm>
#include <cctype>
#include <cstring>
#include <fstream>
#include <mutex>

namespace histotype {

namespace fs = std::filesystem;

void RasterImage::validate() const {
    if (width < 0 || height < 0) throw ValidationError("negative raster dimensions");
    if (pixels.size() != pixel_count() * 3)
        throw ValidationError(fmt::format("raster buffer holds {} bytes, expected {}", pixels.size(),
                                          pixel_count() * 3));
    if (!(mpp > 0)) throw ValidationError("raster mpp must be positive");
}

namespace {

std::string lower_ext(const fs::path& p) {
    auto ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return ext;
}

class PngReader final : public ImageReader {
public:
    bool can_read(const fs::path& path) const override { return lower_ext(path) == ".png"; }

    RasterImage read(const fs::path& path) const override {
        png_image img;
        std::memset(&img, 0, sizeof img);
        img.version = PNG_IMAGE_VERSION;
        auto bytes = io::read_file(path);
        if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
            throw ValidationError(fmt::format("{}: {}", path.string(), img.message));
        img.format = PNG_FORMAT_RGB;
        RasterImage out(static_cast<int>(img.width), static_cast<int>(img.height), 1.0);
        if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
            std::string msg = img.message;
            png_image_free(&img);
            throw ValidationError(fmt::format("{}: {}", path.string(), msg));
        }
        return out;
    }
};

// Binary P6, maxval 255, '#' comments allowed in the header.
class PpmReader final : public ImageReader {
public:
    bool can_read(const fs::path& path) const override { return lower_ext(path) == ".ppm"; }

    RasterImage read(const fs::path& path) const override {
        auto bytes = io::read_file(path);
        std::size_t pos = 0;
        auto next_token = [&]() -> std::string {
            for (;;) {
                while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
                if (pos < bytes.size() && bytes[pos] == '#') {
                    while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
                    continue;
                }
                break;
            }
            std::size_t start = pos;
            while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
            return bytes.substr(start, pos - start);
        };
        if (next_token() != "P6") throw ValidationError(path.string() + ": not a binary PPM");
        auto w = io::parse_int(next_token(), path.string());
        auto h = io::parse_int(next_token(), path.string());
        auto maxval = io::parse_int(next_token(), path.string());
        if (w <= 0 || h <= 0 || maxval != 255)
            throw ValidationError(path.string() + ": unsupported PPM header");
        ++pos;  // single whitespace before raster
        RasterImage out(static_cast<int>(w), static_cast<int>(h), 1.0);
        if (bytes.size() - pos < out.pixels.size())
            throw ValidationError(path.string() + ": truncated PPM");
        std::memcpy(out.pixels.data(), bytes.data() + pos, out.pixels.size());
        return out;
    }
};

struct ReaderRegistry {
    std::mutex mutex;
    std::vector<std::shared_ptr<const ImageReader>> readers{std::make_shared<PngReader>(),
                                                             std::make_shared<PpmReader>()};
};

ReaderRegistry& registry() {
    static ReaderRegistry r;
    return r;
}

}  // namespace

void register_image_reader(std::shared_ptr<const ImageReader> reader) {
    auto& r = registry();
    std::lock_guard lock(r.mutex);
    r.readers.insert(r.readers.begin(), std::move(reader));
}

RasterImage read_image(const fs::path& path, double mpp) {
    std::shared_ptr<const ImageReader> chosen;
    {
        auto& r = registry();
        std::lock_guard lock(r.mutex);
        for (const auto& reader : r.readers) {
            if (reader->can_read(path)) {
                chosen = reader;
                break;
            }
        }
    }
    if (!chosen) throw ValidationError(fmt::format("no image reader for '{}'", path.string()));
    if (!fs::exists(path)) throw ValidationError(fmt::format("missing image '{}'", path.string()));
    auto img = chosen->read(path);
    img.mpp = mpp;
    img.validate();
    return img;
}

namespace {

void append_png_data(png_structp png, png_bytep data, png_size_t length) {
    auto* out = static_cast<std::string*>(png_get_io_ptr(png));
    out->append(reinterpret_cast<const char*>(data), length);
}

void png_error_to_exception(png_structp png, png_const_charp msg) {
    *static_cast<std::string*>(png_get_error_ptr(png)) = msg;
    png_longjmp(png, 1);
}

}  // namespace

void write_png(const fs::path& path, const RasterImage& image) {
    image.validate();
    std::string buffer, error;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &error, png_error_to_exception, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw RuntimeError(fmt::format("{}: cannot allocate PNG writer", path.string()));
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw RuntimeError(fmt::format("{}: {}", path.string(), error));
    }
    png_set_write_fn(png, &buffer, append_png_data, nullptr);
    // speed over size: tiles are written once per run and read back a few times
    png_set_compression_level(png, 1);
    png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const std::size_t stride = static_cast<std::size_t>(image.width) * 3;
    for (int y = 0; y < image.height; ++y)
        png_write_row(png, const_cast<png_bytep>(image.pixels.data() + y * stride));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    io::write_file(path, buffer);
}

void write_ppm(const fs::path& path, const RasterImage& image) {
    image.validate();
    std::string out = fmt::format("P6\n{} {}\n255\n", image.width, image.height);
    out.append(reinterpret_cast<const char*>(image.pixels.data()), image.pixels.size());
    io::write_file(path, out);
}

}  // namespace histotype
