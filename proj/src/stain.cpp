#include "histotype/stain.hpp"

#include "histotype/io.hpp"
#include "histotype/rng.hpp"
#include "histotype/stats.hpp"

#include <Eigen/Dense>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace histotype {

namespace {

constexpr double kMinColumnAngleDeg = 1.0;
constexpr double kMinEigenRatio = 1e-3;

double norm(const Vec3& v) { return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]); }

Vec3 from_eigen(const Eigen::Vector3d& v) { return {v[0], v[1], v[2]}; }

}  // namespace

OpticalDensityField rgb_to_od(const RasterImage& tile, double I0) {
    if (!(I0 > 0)) throw ValidationError("illumination I0 must be positive");
    OpticalDensityField od;
    od.width = tile.width;
    od.height = tile.height;
    od.values.resize(tile.pixels.size());
    // 256-entry table: the clamp makes OD a function of the byte value alone
    std::array<double, 256> lut{};
    for (int v = 0; v < 256; ++v) lut[v] = -std::log10(std::clamp(static_cast<double>(v), 1.0, I0) / I0);
    for (std::size_t i = 0; i < tile.pixels.size(); ++i) od.values[i] = lut[tile.pixels[i]];
    return od;
}

double angle_degrees(const Vec3& a, const Vec3& b) {
    const double c = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / (norm(a) * norm(b));
    return std::acos(std::clamp(c, -1.0, 1.0)) * 180.0 / std::numbers::pi;
}

StainProfile estimate_stain_profile(const OpticalDensityField& od, const MacenkoParams& params) {
    // (1) keep pixels whose every channel reaches beta
    std::vector<Eigen::Vector3d> kept;
    kept.reserve(od.pixel_count());
    for (std::size_t i = 0; i < od.pixel_count(); ++i) {
        const double* p = od.at(i);
        if (p[0] >= params.beta && p[1] >= params.beta && p[2] >= params.beta) kept.emplace_back(p[0], p[1], p[2]);
    }
    if (kept.size() < 2)
        throw DegenerateStainError(fmt::format("only {} pixels above OD threshold {}", kept.size(), params.beta));

    // (2) top-2 eigenvectors of the 3x3 covariance
    Eigen::Vector3d mean = Eigen::Vector3d::Zero();
    for (const auto& v : kept) mean += v;
    mean /= static_cast<double>(kept.size());
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (const auto& v : kept) {
        const Eigen::Vector3d d = v - mean;
        cov += d * d.transpose();
    }
    cov /= static_cast<double>(kept.size() - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
    const auto& evals = eig.eigenvalues();  // ascending
    if (!(evals[2] > 0) || evals[1] < kMinEigenRatio * evals[2])
        throw DegenerateStainError("OD covariance is rank-deficient; fewer than two stains present");
    Eigen::Vector3d e1 = eig.eigenvectors().col(2);
    Eigen::Vector3d e2 = eig.eigenvectors().col(1);
    if (e1.sum() < 0) e1 = -e1;
    if (e2.sum() < 0) e2 = -e2;

    // (3)-(4) polar angle of each projection; robust extremes
    std::vector<double> phi(kept.size());
    for (std::size_t i = 0; i < kept.size(); ++i) phi[i] = std::atan2(kept[i].dot(e2), kept[i].dot(e1));
    auto phi_copy = phi;
    const double phi_min = percentile(phi, params.alpha);
    const double phi_max = percentile(phi_copy, 100.0 - params.alpha);

    // (5) back to 3-space, unit length, nonnegative orientation
    auto direction = [&](double a) {
        Eigen::Vector3d v = e1 * std::cos(a) + e2 * std::sin(a);
        v.normalize();
        if (v.sum() < 0) v = -v;
        return from_eigen(v);
    };
    Vec3 a = direction(phi_min);
    Vec3 b = direction(phi_max);
    if (angle_degrees(a, b) < kMinColumnAngleDeg)
        throw DegenerateStainError("estimated stain vectors are nearly parallel");

    // (6) hematoxylin first: the column with the larger blue OD weight
    StainProfile profile;
    profile.columns = a[2] >= b[2] ? std::array<Vec3, 2>{a, b} : std::array<Vec3, 2>{b, a};

    // (7) 99th percentile concentrations over all pixels
    auto conc = compute_concentrations(od, profile.columns);
    for (int k = 0; k < 2; ++k) {
        std::vector<double> ch(conc.size() / 2);
        for (std::size_t i = 0; i < ch.size(); ++i) ch[i] = conc[2 * i + k];
        profile.max_concentrations[k] = percentile(ch, 99.0);
        if (!(profile.max_concentrations[k] > 0))
            throw DegenerateStainError(fmt::format("stain {} has no positive concentration", k == 0 ? "H" : "E"));
    }
    return profile;
}

std::vector<double> compute_concentrations(const OpticalDensityField& od, const std::array<Vec3, 2>& stain_matrix) {
    Eigen::Matrix<double, 3, 2> m;
    for (int c = 0; c < 2; ++c)
        for (int r = 0; r < 3; ++r) m(r, c) = stain_matrix[c][r];
    const Eigen::Matrix2d gram = m.transpose() * m;
    if (std::abs(gram.determinant()) < 1e-12) throw ValidationError("stain matrix is singular");
    const Eigen::Matrix<double, 2, 3> pinv = gram.inverse() * m.transpose();

    std::vector<double> out(od.pixel_count() * 2);
    for (std::size_t i = 0; i < od.pixel_count(); ++i) {
        const double* p = od.at(i);
        const Eigen::Vector2d c = pinv * Eigen::Vector3d(p[0], p[1], p[2]);
        out[2 * i] = std::max(0.0, c[0]);
        out[2 * i + 1] = std::max(0.0, c[1]);
    }
    return out;
}

RasterImage normalize_tile(const RasterImage& tile, const StainProfile& source, const StainProfile& reference,
                           double I0) {
    for (int k = 0; k < 2; ++k)
        if (!(source.max_concentrations[k] > 0) || !(reference.max_concentrations[k] > 0))
            throw DegenerateStainError("stain profile has a non-positive max concentration");
    const auto od = rgb_to_od(tile, I0);
    const auto conc = compute_concentrations(od, source.columns);
    const double scale_h = reference.max_concentrations[0] / source.max_concentrations[0];
    const double scale_e = reference.max_concentrations[1] / source.max_concentrations[1];
    const double hi = std::min(I0, 255.0);

    RasterImage out(tile.width, tile.height, tile.mpp);
    for (std::size_t i = 0; i < od.pixel_count(); ++i) {
        const double ch = conc[2 * i] * scale_h;
        const double ce = conc[2 * i + 1] * scale_e;
        for (int r = 0; r < 3; ++r) {
            const double v = I0 * std::pow(10.0, -(reference.columns[0][r] * ch + reference.columns[1][r] * ce));
            out.pixels[3 * i + r] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, hi)));
        }
    }
    return out;
}

ReferenceMosaic build_reference_mosaic(const std::map<std::string, std::vector<std::string>>& tumor_tiles_by_wsi,
                                       const TileLoader& load, int n_wsis, std::uint64_t seed,
                                       const MacenkoParams& params) {
    if (n_wsis < 1) throw ValidationError("reference mosaic needs n_wsis >= 1");
    std::vector<std::string> eligible;
    for (const auto& [wsi, tiles] : tumor_tiles_by_wsi)
        if (!tiles.empty()) eligible.push_back(wsi);
    if (eligible.empty()) throw ValidationError("no slide has a tumor tile for the reference mosaic");
    if (eligible.size() < static_cast<std::size_t>(n_wsis))
        spdlog::warn("reference mosaic: only {} eligible slides, fewer than the requested {}", eligible.size(), n_wsis);

    Xoshiro256 rng(seed);
    rng.shuffle(eligible);
    eligible.resize(std::min(eligible.size(), static_cast<std::size_t>(n_wsis)));

    ReferenceMosaic mosaic;
    for (const auto& wsi : eligible) {
        auto tiles = tumor_tiles_by_wsi.at(wsi);
        std::sort(tiles.begin(), tiles.end());
        mosaic.provenance.push_back({wsi, tiles[rng.below(tiles.size())]});
    }

    const int n = static_cast<int>(mosaic.provenance.size());
    mosaic.columns = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n)) - 1e-9));
    const int rows = (n + mosaic.columns - 1) / mosaic.columns;

    OpticalDensityField combined;
    int tile_w = 0, tile_h = 0;
    for (int i = 0; i < n; ++i) {
        auto tile = load(mosaic.provenance[i]);
        if (i == 0) {
            tile_w = tile.width;
            tile_h = tile.height;
            mosaic.image = RasterImage(tile_w * mosaic.columns, tile_h * rows, tile.mpp, 255);
        } else if (tile.width != tile_w || tile.height != tile_h) {
            throw ValidationError("reference mosaic tiles differ in size");
        }
        const int ox = (i % mosaic.columns) * tile_w, oy = (i / mosaic.columns) * tile_h;
        for (int y = 0; y < tile_h; ++y)
            std::copy_n(tile.at(0, y), static_cast<std::size_t>(tile_w) * 3, mosaic.image.at(ox, oy + y));
        auto od = rgb_to_od(tile, params.I0);
        combined.values.insert(combined.values.end(), od.values.begin(), od.values.end());
    }
    combined.width = static_cast<int>(combined.values.size() / 3);
    combined.height = 1;
    mosaic.profile = estimate_stain_profile(combined, params);
    return mosaic;
}

std::string serialize_profile(const StainProfile& p) {
    const auto& c = p.columns;
    return fmt::format("histotype-stain-profile 1\nstain_matrix {} {} {} {} {} {}\nmax_concentrations {} {}\n",
                       io::format_real(c[0][0]), io::format_real(c[1][0]), io::format_real(c[0][1]),
                       io::format_real(c[1][1]), io::format_real(c[0][2]), io::format_real(c[1][2]),
                       io::format_real(p.max_concentrations[0]), io::format_real(p.max_concentrations[1]));
}

StainProfile parse_profile(const std::string& text) {
    std::istringstream in(text);
    std::string magic, key;
    int version = 0;
    if (!(in >> magic >> version) || magic != "histotype-stain-profile")
        throw ValidationError("not a stain profile record");
    if (version != 1) throw ValidationError(fmt::format("unsupported stain profile version {}", version));
    std::array<std::string, 6> m;
    std::array<std::string, 2> mx;
    if (!(in >> key) || key != "stain_matrix") throw ValidationError("stain profile: missing stain_matrix");
    for (auto& s : m)
        if (!(in >> s)) throw ValidationError("stain profile: truncated stain_matrix");
    if (!(in >> key) || key != "max_concentrations") throw ValidationError("stain profile: missing max_concentrations");
    for (auto& s : mx)
        if (!(in >> s)) throw ValidationError("stain profile: truncated max_concentrations");
    StainProfile p;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 2; ++c) p.columns[c][r] = io::parse_real(m[r * 2 + c], "stain profile");
    for (int k = 0; k < 2; ++k) p.max_concentrations[k] = io::parse_real(mx[k], "stain profile");
    return p;
}

void save_profile(const std::filesystem::path& path, const StainProfile& profile) {
    io::write_file(path, serialize_profile(profile));
}

StainProfile load_profile(const std::filesystem::path& path) { return parse_profile(io::read_file(path)); }

}  // namespace histotype
