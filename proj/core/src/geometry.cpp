#include "rangediff/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "rangediff/binary_io.hpp"
#include "rangediff/errors.hpp"

namespace rangediff {

void SensorConfig::validate() const {
    if (height < 2 || width < 2)
        throw ConfigError("sensor grid must be at least 2x2, got " + std::to_string(height) + "x" + std::to_string(width));
    if (!(f_up > f_down)) throw ConfigError("sensor f_up must exceed f_down");
    if (!(r_max > 0.0)) throw ConfigError("sensor r_max must be positive");
}

SensorConfig default_sensor() { return SensorConfig{}; }

SensorConfig beam32_sensor() {
    SensorConfig cfg;
    cfg.height = 32;
    return cfg;
}

RangeImage RangeImage::empty(const SensorConfig& config) {
    config.validate();
    const auto n = config.height * config.width;
    return RangeImage{config, std::vector<float>(n, 0.0f), std::vector<float>(n, 0.0f), std::vector<std::uint8_t>(n, 0)};
}

std::size_t RangeImage::valid_count() const {
    return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
}

ProjectedPoint project_point(const std::array<double, 3>& p, const SensorConfig& cfg) {
    const double r = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
    if (!(r > 0.0)) throw DegenerateInputError("cannot project a zero-norm point");
    const double azimuth = std::atan2(p[1], p[0]);
    const double elevation = std::asin(std::clamp(p[2] / r, -1.0, 1.0));
    const double u = 0.5 * (1.0 - azimuth / std::numbers::pi) * static_cast<double>(cfg.width);
    const double v = (1.0 - (elevation - cfg.f_down) / cfg.fov()) * static_cast<double>(cfg.height);
    return {u, v, r};
}

std::optional<Pixel> discretize(const ProjectedPoint& pp, const SensorConfig& cfg) {
    const double h = static_cast<double>(cfg.height);
    if (!(pp.v >= 0.0 && pp.v <= h)) return std::nullopt;
    const auto row = std::min(static_cast<std::size_t>(std::floor(pp.v)), cfg.height - 1);
    const double u = std::clamp(pp.u, 0.0, static_cast<double>(cfg.width));
    const auto col = std::min(static_cast<std::size_t>(std::floor(u)), cfg.width - 1);
    return Pixel{row, col};
}

std::array<double, 3> pixel_direction(std::size_t row, std::size_t col, const SensorConfig& cfg) {
    const double uc = static_cast<double>(col) + 0.5;
    const double vc = static_cast<double>(row) + 0.5;
    const double azimuth = std::numbers::pi * (1.0 - 2.0 * uc / static_cast<double>(cfg.width));
    const double elevation = cfg.f_up - vc / static_cast<double>(cfg.height) * cfg.fov();
    const double ce = std::cos(elevation);
    return {ce * std::cos(azimuth), ce * std::sin(azimuth), std::sin(elevation)};
}

RasterResult rasterize(const PointCloud& cloud, const SensorConfig& cfg) {
    if (cloud.intensity.size() != cloud.points.size())
        throw DimensionError("point cloud has " + std::to_string(cloud.points.size()) + " points but " +
                             std::to_string(cloud.intensity.size()) + " intensities");
    RasterResult out{RangeImage::empty(cfg), {}};
    auto& img = out.image;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const auto& p = cloud.points[i];
        const double r = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
        if (!(r > 0.0) || r > cfg.r_max) {
            ++out.stats.out_of_range;
            continue;
        }
        const auto pixel = discretize(project_point(p, cfg), cfg);
        if (!pixel) {
            ++out.stats.out_of_fov;
            continue;
        }
        ++out.stats.kept;
        const auto k = img.index(pixel->row, pixel->col);
        const auto rf = static_cast<float>(r);
        if (!img.valid[k] || rf < img.range[k]) {
            img.valid[k] = 1;
            img.range[k] = rf;
            img.intensity[k] = static_cast<float>(std::clamp(cloud.intensity[i], 0.0, 1.0));
        }
    }
    return out;
}

PointCloud unproject(const RangeImage& image) {
    PointCloud cloud;
    const auto& cfg = image.config;
    for (std::size_t row = 0; row < cfg.height; ++row)
        for (std::size_t col = 0; col < cfg.width; ++col) {
            const auto k = image.index(row, col);
            if (!image.valid[k]) continue;
            const auto d = pixel_direction(row, col, cfg);
            const double r = image.range[k];
            cloud.push_back({d[0] * r, d[1] * r, d[2] * r}, image.intensity[k]);
        }
    return cloud;
}

double normalize_range(double r, double r_max) { return 2.0 * std::log1p(r) / std::log1p(r_max) - 1.0; }

double denormalize_range(double x, double r_max) { return std::expm1((x + 1.0) * 0.5 * std::log1p(r_max)); }

Tensor normalize(const RangeImage& image, std::size_t* clipped) {
    const auto& cfg = image.config;
    const auto n = cfg.height * cfg.width;
    std::vector<Real> out(2 * n, -1.0);
    std::size_t clip_count = 0;
    for (std::size_t k = 0; k < n; ++k) {
        if (!image.valid[k]) continue;
        double r = image.range[k];
        if (r > cfg.r_max) {
            r = cfg.r_max;
            ++clip_count;
        }
        out[k] = normalize_range(r, cfg.r_max);
        out[n + k] = 2.0 * std::clamp(static_cast<double>(image.intensity[k]), 0.0, 1.0) - 1.0;
    }
    if (clipped) *clipped = clip_count;
    return Tensor::from({2, cfg.height, cfg.width}, std::move(out));
}

RangeImage denormalize(const Tensor& x, const SensorConfig& cfg, double min_valid_range) {
    if (x.rank() != 3 || x.dim(0) != 2 || x.dim(1) != cfg.height || x.dim(2) != cfg.width)
        throw DimensionError("denormalize: expected [2x" + std::to_string(cfg.height) + "x" + std::to_string(cfg.width) +
                             "], got " + shape_str(x.shape()));
    auto img = RangeImage::empty(cfg);
    const auto n = cfg.height * cfg.width;
    const auto xs = x.data();
    for (std::size_t k = 0; k < n; ++k) {
        const double r = std::min(denormalize_range(std::clamp(xs[k], -1.0, 1.0), cfg.r_max), cfg.r_max);
        if (!(r > 0.0) || r <= min_valid_range) continue;
        img.valid[k] = 1;
        img.range[k] = static_cast<float>(r);
        img.intensity[k] = static_cast<float>(std::clamp((xs[n + k] + 1.0) * 0.5, 0.0, 1.0));
    }
    return img;
}

void write_olri(const std::filesystem::path& path, const RangeImage& image) {
    const auto& cfg = image.config;
    const auto n = cfg.height * cfg.width;
    if (image.range.size() != n || image.intensity.size() != n || image.valid.size() != n)
        throw DimensionError("range image buffers do not match its " + std::to_string(cfg.height) + "x" +
                             std::to_string(cfg.width) + " grid");
    io::ByteWriter w;
    w.put_bytes("OLRI");
    w.put<std::uint16_t>(1);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(cfg.height));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(cfg.width));
    w.put<std::uint32_t>(2);
    w.put<float>(static_cast<float>(cfg.f_up));
    w.put<float>(static_cast<float>(cfg.f_down));
    w.put<float>(static_cast<float>(cfg.r_max));
    for (float v : image.range) w.put<float>(v);
    for (float v : image.intensity) w.put<float>(v);
    for (auto v : image.valid) w.put<std::uint8_t>(v ? 1 : 0);
    w.save(path);
}

RangeImage read_olri(const std::filesystem::path& path) {
    io::ByteReader r(path);
    r.expect_magic("OLRI");
    const auto version = r.get<std::uint16_t>();
    if (version != 1) throw IoError("'" + path.string() + "': unsupported OLRI version " + std::to_string(version));
    SensorConfig cfg;
    cfg.height = r.get<std::uint32_t>();
    cfg.width = r.get<std::uint32_t>();
    if (r.get<std::uint32_t>() != 2) throw IoError("'" + path.string() + "': OLRI channel count must be 2");
    cfg.f_up = r.get<float>();
    cfg.f_down = r.get<float>();
    cfg.r_max = r.get<float>();
    try {
        cfg.validate();
    } catch (const ConfigError& e) {
        throw IoError("'" + path.string() + "': " + e.what());
    }
    auto img = RangeImage::empty(cfg);
    for (auto& v : img.range) v = r.get<float>();
    for (auto& v : img.intensity) v = r.get<float>();
    for (auto& v : img.valid) {
        v = r.get<std::uint8_t>();
        if (v > 1) throw IoError("'" + path.string() + "': validity bytes must be 0 or 1");
    }
    if (!r.at_end()) throw IoError("'" + path.string() + "' has trailing bytes");
    return img;
}

void write_point_text(const std::filesystem::path& path, const PointCloud& cloud) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << std::setprecision(9);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const auto& p = cloud.points[i];
        out << p[0] << ' ' << p[1] << ' ' << p[2] << ' ' << cloud.intensity[i] << '\n';
    }
    if (!out) throw IoError("failed writing '" + path.string() + "'");
}

PointCloud read_point_text(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    PointCloud cloud;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ss(line);
        double x, y, z, i;
        if (!(ss >> x >> y >> z >> i) || !std::isfinite(x) || !std::isfinite(y) || !std::isfinite(z))
            throw IoError("'" + path.string() + "' line " + std::to_string(lineno) + ": expected 'x y z intensity'");
        cloud.push_back({x, y, z}, std::clamp(i, 0.0, 1.0));
    }
    return cloud;
}

}  // namespace rangediff
