#pragma once

#include <optional>
#include <string>
#include <vector>

#include "rangediff/geometry.hpp"

namespace rangediff {

/// Bird's-eye-view occupancy distribution over a square grid centered on the sensor.
struct OccupancyHistogram {
    std::size_t bins = 80;   // per axis
    double extent = 40.0;    // meters; cells cover [-extent, extent)
    std::vector<double> mass;
    std::size_t points = 0;  // in-range points counted
    bool empty = true;       // no in-range point; mass is all zero

    double at(std::size_t ix, std::size_t iy) const { return mass[ix * bins + iy]; }
};

OccupancyHistogram bev_histogram(const PointCloud& cloud, double extent = 40.0, std::size_t bins = 80);

/// Base-2 Jensen–Shannon divergence, in [0, 1]. Throws MetricError on empty or mismatched inputs.
double jsd(const std::vector<double>& p, const std::vector<double>& q);
double jsd(const OccupancyHistogram& p, const OccupancyHistogram& q);

/// Element-wise mean of non-empty histograms.
OccupancyHistogram mean_histogram(const std::vector<OccupancyHistogram>& set);

struct MmdResult {
    double mmd2 = 0.0;       // biased estimator of the squared discrepancy
    double bandwidth = 0.0;  // Gaussian kernel σ
    double scaled() const { return mmd2 * 1e4; }
};

/// Gaussian kernel exp(-|a-b|² / (2σ²)) on flattened histograms.
double gaussian_kernel(const std::vector<double>& a, const std::vector<double>& b, double bandwidth);
/// Median of the positive pairwise distances over the pooled set.
/// Throws MetricError when every pair coincides.
double median_bandwidth(const std::vector<OccupancyHistogram>& a, const std::vector<OccupancyHistogram>& b);
/// Biased MMD² between two sets; bandwidth from the median heuristic unless given.
MmdResult mmd(const std::vector<OccupancyHistogram>& a, const std::vector<OccupancyHistogram>& b,
              std::optional<double> bandwidth = std::nullopt);

struct MetricReport {
    std::size_t generated = 0;
    std::size_t reference = 0;
    std::size_t empty_scans = 0;  // scans with no in-range return, kept as zero vectors for MMD
    double jsd = 0.0;
    MmdResult mmd;

    /// "metric = value" lines.
    std::string text() const;
    /// Header plus one row.
    std::string csv() const;
};

/// Set-level JSD between mean histograms and MMD between per-scan histograms.
MetricReport evaluate_sets(const std::vector<RangeImage>& generated, const std::vector<RangeImage>& reference,
                           std::optional<double> bandwidth = std::nullopt);

}  // namespace rangediff
