#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "rangediff/tensor.hpp"

namespace rangediff {

/// Spherical-projection sensor model. Angles in radians, ranges in meters.
struct SensorConfig {
    std::size_t height = 64;
    std::size_t width = 1024;
    // +3 / -25 degrees, rounded to single precision so OLRI round trips are exact.
    double f_up = static_cast<float>(0.05235987755982988);
    double f_down = static_cast<float>(-0.4363323129985824);
    double r_max = 80.0;

    /// Vertical field of view, f_up - f_down (= |f_up| + |f_down| for a FOV straddling the horizon).
    double fov() const { return f_up - f_down; }
    /// Throws ConfigError unless H >= 2, W >= 2, f_up > f_down and r_max > 0.
    void validate() const;

    bool operator==(const SensorConfig&) const = default;
};

SensorConfig default_sensor();
/// 32-row variant of the default sensor with the same field of view.
SensorConfig beam32_sensor();

struct PointCloud {
    std::vector<std::array<double, 3>> points;
    std::vector<double> intensity;

    std::size_t size() const { return points.size(); }
    void push_back(const std::array<double, 3>& p, double i) {
        points.push_back(p);
        intensity.push_back(i);
    }
};

/// H x W grid of nearest returns. Stored in single precision, matching the OLRI file layout.
struct RangeImage {
    SensorConfig config;
    std::vector<float> range;        // 0 where invalid
    std::vector<float> intensity;    // [0, 1]
    std::vector<std::uint8_t> valid;

    static RangeImage empty(const SensorConfig& config);
    std::size_t index(std::size_t row, std::size_t col) const { return row * config.width + col; }
    std::size_t valid_count() const;
    bool operator==(const RangeImage&) const = default;
};

/// Continuous pixel coordinates of a point; u is the column axis, v the row axis.
struct ProjectedPoint {
    double u;
    double v;
    double r;
};

struct Pixel {
    std::size_t row;
    std::size_t col;
};

/// Spherical projection. Throws DegenerateInputError for a zero-norm point.
ProjectedPoint project_point(const std::array<double, 3>& p, const SensorConfig& cfg);
/// Floor discretization. Returns nullopt when the point lies outside the vertical FOV;
/// points exactly on either FOV edge are kept (clamped into the grid).
std::optional<Pixel> discretize(const ProjectedPoint& pp, const SensorConfig& cfg);
/// Unit direction of the ray through the center of a pixel.
std::array<double, 3> pixel_direction(std::size_t row, std::size_t col, const SensorConfig& cfg);

struct RasterStats {
    std::size_t kept = 0;
    std::size_t out_of_fov = 0;
    std::size_t out_of_range = 0;
};

struct RasterResult {
    RangeImage image;
    RasterStats stats;
};

/// Keeps the nearest return per pixel; among equal ranges the lower point index wins.
RasterResult rasterize(const PointCloud& cloud, const SensorConfig& cfg);
/// One point per valid pixel along its pixel-center ray at the stored range.
PointCloud unproject(const RangeImage& image);

/// Maps a range image to a [2, H, W] tensor in [-1, 1]: log-scaled range and linear
/// intensity; invalid pixels become -1 on both channels. Ranges above r_max are
/// clipped and counted in `clipped` when provided.
Tensor normalize(const RangeImage& image, std::size_t* clipped = nullptr);
/// Inverse of normalize. A pixel is valid when its decoded range exceeds
/// `min_valid_range` (default: any positive range).
RangeImage denormalize(const Tensor& x, const SensorConfig& cfg, double min_valid_range = 0.0);
double normalize_range(double r, double r_max);
double denormalize_range(double x, double r_max);

/// OLRI: magic, u16 version=1, u32 H, u32 W, u32 channels=2, f32 f_up, f32 f_down,
/// f32 r_max, H*W f32 ranges, H*W f32 intensities, H*W u8 validity. Little-endian.
void write_olri(const std::filesystem::path& path, const RangeImage& image);
RangeImage read_olri(const std::filesystem::path& path);

/// "x y z intensity" per line.
void write_point_text(const std::filesystem::path& path, const PointCloud& cloud);
PointCloud read_point_text(const std::filesystem::path& path);

}  // namespace rangediff
