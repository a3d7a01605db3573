#include "rangediff/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "rangediff/errors.hpp"

namespace rangediff {

OccupancyHistogram bev_histogram(const PointCloud& cloud, double extent, std::size_t bins) {
    if (!(extent > 0.0) || bins == 0) throw MetricError("histogram extent and bin count must be positive");
    OccupancyHistogram h;
    h.bins = bins;
    h.extent = extent;
    h.mass.assign(bins * bins, 0.0);
    const double cell = 2.0 * extent / static_cast<double>(bins);
    for (const auto& p : cloud.points) {
        const double fx = std::floor((p[0] + extent) / cell);
        const double fy = std::floor((p[1] + extent) / cell);
        if (!(fx >= 0.0 && fy >= 0.0 && fx < static_cast<double>(bins) && fy < static_cast<double>(bins))) continue;
        h.mass[static_cast<std::size_t>(fx) * bins + static_cast<std::size_t>(fy)] += 1.0;
        ++h.points;
    }
    h.empty = h.points == 0;
    if (!h.empty)
        for (auto& m : h.mass) m /= static_cast<double>(h.points);
    return h;
}

double jsd(const std::vector<double>& p, const std::vector<double>& q) {
    if (p.size() != q.size())
        throw MetricError("JSD inputs differ in size (" + std::to_string(p.size()) + " vs " + std::to_string(q.size()) + ")");
    double sp = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] < 0.0 || q[i] < 0.0) throw MetricError("JSD inputs must be nonnegative");
        sp += p[i];
        sq += q[i];
    }
    if (!(sp > 0.0) || !(sq > 0.0)) throw MetricError("JSD of an empty histogram is undefined");
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double a = p[i] / sp, b = q[i] / sq;
        const double m = 0.5 * (a + b);
        const double ta = a > 0.0 ? a * std::log2(a / m) : 0.0;
        const double tb = b > 0.0 ? b * std::log2(b / m) : 0.0;
        total += 0.5 * (ta + tb);  // summed per bin so swapping p and q is exact
    }
    return std::clamp(total, 0.0, 1.0);
}

double jsd(const OccupancyHistogram& p, const OccupancyHistogram& q) {
    if (p.empty || q.empty) throw MetricError("JSD of an empty histogram is undefined");
    return jsd(p.mass, q.mass);
}

OccupancyHistogram mean_histogram(const std::vector<OccupancyHistogram>& set) {
    OccupancyHistogram out;
    std::size_t used = 0;
    for (const auto& h : set) {
        if (h.empty) continue;
        if (used == 0) {
            out.bins = h.bins;
            out.extent = h.extent;
            out.mass.assign(h.mass.size(), 0.0);
        } else if (h.mass.size() != out.mass.size()) {
            throw MetricError("histograms of different grids cannot be averaged");
        }
        for (std::size_t i = 0; i < h.mass.size(); ++i) out.mass[i] += h.mass[i];
        out.points += h.points;
        ++used;
    }
    if (used == 0) throw MetricError("every histogram in the set is empty");
    for (auto& m : out.mass) m /= static_cast<double>(used);
    out.empty = false;
    return out;
}

namespace {

double squared_distance(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw MetricError("histograms of different grids cannot be compared");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

}  // namespace

double gaussian_kernel(const std::vector<double>& a, const std::vector<double>& b, double bandwidth) {
    if (!(bandwidth > 0.0)) throw MetricError("kernel bandwidth must be positive");
    return std::exp(-squared_distance(a, b) / (2.0 * bandwidth * bandwidth));
}

double median_bandwidth(const std::vector<OccupancyHistogram>& a, const std::vector<OccupancyHistogram>& b) {
    std::vector<const std::vector<double>*> pool;
    for (const auto& h : a) pool.push_back(&h.mass);
    for (const auto& h : b) pool.push_back(&h.mass);
    std::vector<double> dist;
    for (std::size_t i = 0; i < pool.size(); ++i)
        for (std::size_t j = i + 1; j < pool.size(); ++j) {
            const double d = std::sqrt(squared_distance(*pool[i], *pool[j]));
            if (d > 0.0) dist.push_back(d);
        }
    if (dist.empty()) throw MetricError("median bandwidth is degenerate: all histograms coincide");
    const auto mid = dist.size() / 2;
    std::nth_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(mid), dist.end());
    double median = dist[mid];
    if (dist.size() % 2 == 0) {
        const double lower = *std::max_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(mid));
        median = 0.5 * (median + lower);
    }
    return median;
}

MmdResult mmd(const std::vector<OccupancyHistogram>& a, const std::vector<OccupancyHistogram>& b,
              std::optional<double> bandwidth) {
    if (a.empty() || b.empty()) throw MetricError("MMD needs at least one scan per set");
    MmdResult r;
    r.bandwidth = bandwidth ? *bandwidth : median_bandwidth(a, b);
    if (!(r.bandwidth > 0.0)) throw MetricError("MMD bandwidth must be positive");
    auto mean_kernel = [&](const std::vector<OccupancyHistogram>& x, const std::vector<OccupancyHistogram>& y) {
        double s = 0.0;
        for (const auto& u : x)
            for (const auto& v : y) s += gaussian_kernel(u.mass, v.mass, r.bandwidth);
        return s / static_cast<double>(x.size() * y.size());
    };
    r.mmd2 = std::max(0.0, mean_kernel(a, a) + mean_kernel(b, b) - 2.0 * mean_kernel(a, b));
    return r;
}

std::string MetricReport::text() const {
    std::ostringstream os;
    os.precision(10);
    os << "generated = " << generated << '\n'
       << "reference = " << reference << '\n'
       << "empty_scans = " << empty_scans << '\n'
       << "JSD = " << jsd << '\n'
       << "MMD = " << mmd.mmd2 << '\n'
       << "MMD(x1e4) = " << mmd.scaled() << '\n'
       << "bandwidth = " << mmd.bandwidth << '\n';
    for (const char* name : {"FRD", "FRID", "FSVD", "FPVD", "FPD"})
        os << name << " = unavailable: requires pretrained extractor\n";
    os << "note = histogram metrics are comparable only between runs of this tool\n";
    return os.str();
}

std::string MetricReport::csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "generated,reference,empty_scans,jsd,bandwidth,mmd,mmd_x1e4\n"
       << generated << ',' << reference << ',' << empty_scans << ',' << jsd << ',' << mmd.bandwidth << ','
       << mmd.mmd2 << ',' << mmd.scaled() << '\n';
    return os.str();
}

MetricReport evaluate_sets(const std::vector<RangeImage>& generated, const std::vector<RangeImage>& reference,
                           std::optional<double> bandwidth) {
    if (generated.empty() || reference.empty()) throw MetricError("evaluation needs at least one scan per set");
    MetricReport report;
    report.generated = generated.size();
    report.reference = reference.size();
    auto histograms = [&](const std::vector<RangeImage>& set) {
        std::vector<OccupancyHistogram> out;
        out.reserve(set.size());
        for (const auto& img : set) {
            out.push_back(bev_histogram(unproject(img)));
            if (out.back().empty) ++report.empty_scans;
        }
        return out;
    };
    const auto gen = histograms(generated);
    const auto ref = histograms(reference);
    report.jsd = jsd(mean_histogram(gen), mean_histogram(ref));
    report.mmd = mmd(gen, ref, bandwidth);
    return report;
}

}  // namespace rangediff
