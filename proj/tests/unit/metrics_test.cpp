#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "rangediff/errors.hpp"
#include "rangediff/metrics.hpp"
#include "rangediff/random.hpp"

using namespace rangediff;

namespace {

PointCloud cloud_of(std::initializer_list<std::array<double, 3>> points) {
    PointCloud pc;
    for (const auto& p : points) pc.push_back(p, 0.5);
    return pc;
}

double kl2(const std::vector<double>& p, const std::vector<double>& q) {
    double s = 0;
    for (std::size_t i = 0; i < p.size(); ++i)
        if (p[i] > 0) s += p[i] * std::log2(p[i] / q[i]);
    return s;
}

double jsd_oracle(const std::vector<double>& p, const std::vector<double>& q) {
    std::vector<double> m(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) m[i] = 0.5 * (p[i] + q[i]);
    return 0.5 * kl2(p, m) + 0.5 * kl2(q, m);
}

std::vector<OccupancyHistogram> random_histograms(std::size_t n, Rng& rng) {
    std::vector<OccupancyHistogram> out;
    std::uniform_real_distribution<double> u(-20, 20);
    for (std::size_t i = 0; i < n; ++i) {
        PointCloud pc;
        for (int k = 0; k < 50; ++k) pc.push_back({u(rng), u(rng), 0.0}, 0.5);
        out.push_back(bev_histogram(pc, 40.0, 8));
    }
    return out;
}

}  // namespace

TEST(Bev, SinglePointAndTwoBins) {
    const auto h = bev_histogram(cloud_of({{0.0, 0.0, 1.0}}));
    EXPECT_FALSE(h.empty);
    EXPECT_EQ(h.mass.size(), 80u * 80u);
    EXPECT_EQ(h.at(40, 40), 1.0);
    EXPECT_EQ(std::count(h.mass.begin(), h.mass.end(), 0.0), 80 * 80 - 1);

    const auto two = bev_histogram(cloud_of({{-39.5, 10.2, 0.0}, {5.5, -0.5, 3.0}, {45.0, 0.0, 0.0}}));
    EXPECT_EQ(two.points, 2u);
    EXPECT_EQ(two.at(0, 50), 0.5);
    EXPECT_EQ(two.at(45, 39), 0.5);
}

TEST(Bev, EmptyWhenNothingInRange) {
    const auto h = bev_histogram(cloud_of({{50.0, 0.0, 0.0}, {0.0, -40.5, 0.0}}));
    EXPECT_TRUE(h.empty);
    EXPECT_EQ(h.points, 0u);
    EXPECT_TRUE(std::all_of(h.mass.begin(), h.mass.end(), [](double v) { return v == 0.0; }));
    EXPECT_TRUE(bev_histogram(PointCloud{}).empty);
}

TEST(Bev, UniformDiskMatchesPoisson) {
    Rng rng(12);
    const double radius = 30.0;
    const std::size_t n = 100000;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    PointCloud pc;
    for (std::size_t i = 0; i < n; ++i) {
        const double r = radius * std::sqrt(u(rng)), a = 2.0 * std::numbers::pi * u(rng);
        pc.push_back({r * std::cos(a), r * std::sin(a), 0.0}, 0.5);
    }
    const auto h = bev_histogram(pc);
    const double lambda = static_cast<double>(n) / (std::numbers::pi * radius * radius);  // 1 m² cells
    std::vector<double> counts;
    for (std::size_t ix = 0; ix < 80; ++ix)
        for (std::size_t iy = 0; iy < 80; ++iy) {
            // Cells entirely inside the disk.
            const double x0 = -40.0 + ix, y0 = -40.0 + iy;
            const double far_x = std::max(std::abs(x0), std::abs(x0 + 1)), far_y = std::max(std::abs(y0), std::abs(y0 + 1));
            if (std::hypot(far_x, far_y) < radius) counts.push_back(h.at(ix, iy) * n);
        }
    ASSERT_GT(counts.size(), 2000u);
    double mean = 0, var = 0;
    for (auto c : counts) mean += c / counts.size();
    for (auto c : counts) var += (c - mean) * (c - mean) / (counts.size() - 1);
    EXPECT_NEAR(mean, lambda, 3.0 * std::sqrt(lambda / counts.size()));
    // Index of dispersion of Poisson counts is 1 with standard error sqrt(2/(n-1)).
    EXPECT_NEAR(var / mean, 1.0, 3.0 * std::sqrt(2.0 / (counts.size() - 1)));
    const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
    EXPECT_GT(*lo, lambda - 5.0 * std::sqrt(lambda));
    EXPECT_LT(*hi, lambda + 5.0 * std::sqrt(lambda));
}

TEST(Jsd, Examples) {
    const std::vector<double> p = {0.5, 0.5, 0.0}, q = {0.0, 0.5, 0.5};
    EXPECT_NEAR(jsd(p, q), jsd_oracle(p, q), 1e-12);
    EXPECT_NEAR(jsd(p, q), 0.5, 1e-12);
    EXPECT_EQ(jsd(p, p), 0.0);
    using Dist = std::vector<double>;
    EXPECT_EQ(jsd(Dist{1.0, 0.0}, Dist{0.0, 1.0}), 1.0);
    EXPECT_THROW(jsd(Dist{0.0, 0.0}, Dist{0.5, 0.5}), MetricError);
    EXPECT_THROW(jsd(Dist{1.0}, Dist{0.5, 0.5}), MetricError);
}

TEST(Jsd, SymmetricAndBoundedOnRandomDistributions) {
    Rng rng(2);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> p(10), q(10);
        double sp = 0, sq = 0;
        for (int i = 0; i < 10; ++i) {
            p[i] = u(rng) < 0.3 ? 0.0 : u(rng);
            q[i] = u(rng) < 0.3 ? 0.0 : u(rng);
            sp += p[i];
            sq += q[i];
        }
        p[0] += 0.1;
        q[1] += 0.1;
        sp += 0.1;
        sq += 0.1;
        for (int i = 0; i < 10; ++i) {
            p[i] /= sp;
            q[i] /= sq;
        }
        const double d = jsd(p, q);
        EXPECT_NEAR(d, jsd_oracle(p, q), 1e-12);
        EXPECT_EQ(d, jsd(q, p));
        EXPECT_GE(d, 0.0);
        EXPECT_LE(d, 1.0);
    }
}

TEST(Jsd, EmptyHistogramIsAnError) {
    const auto full = bev_histogram(cloud_of({{1.0, 1.0, 0.0}}));
    const auto empty = bev_histogram(PointCloud{});
    EXPECT_THROW(jsd(full, empty), MetricError);
    EXPECT_EQ(jsd(full, full), 0.0);
}

TEST(Mmd, IdenticalSetsAndSingletons) {
    Rng rng(3);
    const auto a = random_histograms(6, rng);
    EXPECT_NEAR(mmd(a, a).mmd2, 0.0, 1e-12);
    const auto b = random_histograms(1, rng);
    const std::vector<OccupancyHistogram> one = {a[0]};
    const double bw = 0.07;
    const auto r = mmd(one, b, bw);
    EXPECT_NEAR(r.mmd2, 2.0 - 2.0 * gaussian_kernel(a[0].mass, b[0].mass, bw), 1e-12);
    EXPECT_EQ(r.bandwidth, bw);
    EXPECT_EQ(r.scaled(), r.mmd2 * 1e4);
}

TEST(Mmd, SymmetricOrderInvariantNonNegative) {
    Rng rng(4);
    auto a = random_histograms(5, rng);
    auto b = random_histograms(7, rng);
    const auto ab = mmd(a, b), ba = mmd(b, a);
    EXPECT_NEAR(ab.mmd2, ba.mmd2, 1e-14);
    EXPECT_EQ(ab.bandwidth, ba.bandwidth);
    EXPECT_GE(ab.mmd2, 0.0);
    std::reverse(a.begin(), a.end());
    std::shuffle(b.begin(), b.end(), rng);
    EXPECT_NEAR(mmd(a, b).mmd2, ab.mmd2, 1e-14);
}

TEST(Mmd, BandwidthHeuristic) {
    const auto h1 = bev_histogram(cloud_of({{1.0, 1.0, 0.0}}), 40.0, 4);
    const auto h2 = bev_histogram(cloud_of({{-30.0, 1.0, 0.0}}), 40.0, 4);
    // Pooled distances: 0 (h1,h1) is excluded; the rest are all sqrt(2).
    EXPECT_NEAR(median_bandwidth({h1, h1}, {h2}), std::sqrt(2.0), 1e-15);
    EXPECT_THROW(median_bandwidth({h1}, {h1}), MetricError);
    EXPECT_THROW(mmd({h1}, {h1}, 0.0), MetricError);
}

TEST(Report, EvaluateSetsAndText) {
    SensorConfig cfg;
    cfg.height = 8;
    cfg.width = 32;
    std::vector<RangeImage> gen, ref;
    Rng rng(5);
    std::uniform_real_distribution<double> r(2.0, 30.0);
    for (int i = 0; i < 4; ++i) {
        for (auto* set : {&gen, &ref}) {
            auto img = RangeImage::empty(cfg);
            for (std::size_t k = 0; k < img.range.size(); k += 3) {
                img.valid[k] = 1;
                img.range[k] = static_cast<float>(r(rng));
            }
            set->push_back(img);
        }
    }
    gen.push_back(RangeImage::empty(cfg));
    const auto same = evaluate_sets(ref, ref);
    EXPECT_EQ(same.jsd, 0.0);
    EXPECT_NEAR(same.mmd.mmd2, 0.0, 1e-12);
    const auto rep = evaluate_sets(gen, ref);
    EXPECT_EQ(rep.generated, 5u);
    EXPECT_EQ(rep.reference, 4u);
    EXPECT_EQ(rep.empty_scans, 1u);
    EXPECT_GT(rep.jsd, 0.0);
    const auto text = rep.text();
    EXPECT_NE(text.find("MMD(x1e4)"), std::string::npos);
    for (const char* name : {"FRD", "FRID", "FSVD", "FPVD", "FPD"})
        EXPECT_NE(text.find(std::string(name) + " ="), std::string::npos) << name;
    EXPECT_NE(rep.csv().find('\n'), std::string::npos);
}
