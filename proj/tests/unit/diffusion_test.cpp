#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numbers>

#include "gradcheck.hpp"
#include "rangediff/diffusion.hpp"
#include "rangediff/errors.hpp"
#include "rangediff/ops.hpp"

using namespace rangediff;
using rangediff::testing::random_tensor;

namespace {

double cosine_bar(double t, double T, double s) {
    const auto f = [&](double u) { return std::pow(std::cos((u / T + s) / (1 + s) * std::numbers::pi / 2), 2); };
    return f(t) / f(0);
}

Tensor zero_model(const Tensor& xt, const std::vector<std::size_t>&, const Tensor&, const std::vector<std::size_t>&) {
    return Tensor::zeros(xt.shape());
}

}  // namespace

TEST(CosineSchedule, Properties) {
    EXPECT_THROW(cosine_schedule(0), ConfigError);
    for (std::size_t T : {64u, 256u, 1024u}) {
        const auto s = cosine_schedule(T);
        ASSERT_EQ(s.alpha_bar.size(), T + 1);
        EXPECT_EQ(s.alpha_bar[0], 1.0);
        EXPECT_LE(s.alpha_bar[T], 1e-3);
        for (std::size_t t = 1; t <= T; ++t) {
            EXPECT_LT(s.alpha_bar[t], s.alpha_bar[t - 1]);
            EXPECT_GT(s.beta(t), 0.0);
            EXPECT_LE(s.beta(t), 0.999 + 1e-15);
        }
        // Away from the clipped tail the schedule is the closed-form cosine.
        for (std::size_t t = 0; t < T - T / 16; ++t) EXPECT_NEAR(s.alpha_bar[t], cosine_bar(t, T, 0.008), 1e-12);
    }
}

TEST(QSample, Endpoints) {
    const auto sched = cosine_schedule(64);
    Rng rng(1);
    const auto x0 = random_tensor({2, 2, 3, 4}, rng);
    const auto eps = random_tensor(x0.shape(), rng);
    const auto same = q_sample(x0, {0, 0}, eps, sched);
    EXPECT_TRUE(std::equal(same.data().begin(), same.data().end(), x0.data().begin()));
    const auto noisy = q_sample(x0, {64, 64}, eps, sched);
    const double a = std::sqrt(sched.alpha_bar[64]);
    for (std::size_t k = 0; k < x0.numel(); ++k) EXPECT_NEAR(noisy.data()[k], eps.data()[k], 2.0 * a + 1e-3);
    // Per-sample timesteps.
    const auto mixed = q_sample(x0, {0, 64}, eps, sched);
    EXPECT_EQ(mixed.data()[0], x0.data()[0]);
    EXPECT_THROW(q_sample(x0, {0, 0}, random_tensor({2, 2, 3, 3}, rng), sched), DimensionError);
    EXPECT_THROW(q_sample(x0, {0}, eps, sched), DimensionError);
}

TEST(QSample, MonteCarloMoments) {
    const auto sched = cosine_schedule(64);
    const std::size_t n = 10000, t = 20;
    const double x0_value = 0.6;
    const auto x0 = Tensor::full({n, 1}, x0_value);
    Rng rng(3);
    const auto eps = normal_tensor({n, 1}, rng);
    const auto xt = q_sample(x0, std::vector<std::size_t>(n, t), eps, sched);
    double mean = 0, var = 0;
    for (auto v : xt.data()) mean += v / n;
    for (auto v : xt.data()) var += (v - mean) * (v - mean) / (n - 1);
    const double ab = sched.alpha_bar[t];
    EXPECT_NEAR(mean, std::sqrt(ab) * x0_value, 4.0 * std::sqrt(1 - ab) / std::sqrt(static_cast<double>(n)));
    EXPECT_NEAR(var / (1 - ab), 1.0, 0.05);
}

TEST(DiffusionLoss, ZeroModelGivesUnitLoss) {
    const auto sched = cosine_schedule(64);
    Rng rng(4);
    DiffusionBatch batch{random_tensor({8, 2, 16, 16}, rng, 0.5), Tensor::zeros({8, 1, 4}), std::vector<std::size_t>(8, 0)};
    Rng a(9), b(9);
    const auto first = diffusion_loss(batch, zero_model, sched, a);
    const auto second = diffusion_loss(batch, zero_model, sched, b);
    const double n = 8.0 * 2 * 16 * 16;
    EXPECT_NEAR(first.loss.item(), 1.0, 5.0 * std::sqrt(2.0 / n));
    EXPECT_GE(first.loss.item(), 0.0);
    EXPECT_EQ(first.loss.item(), second.loss.item());
    EXPECT_EQ(first.timesteps, second.timesteps);
    for (auto t : first.timesteps) {
        EXPECT_GE(t, 1u);
        EXPECT_LE(t, 64u);
    }
}

TEST(DiffusionLoss, GradientsReachTheModel) {
    const auto sched = cosine_schedule(16);
    Rng rng(5);
    auto weight = Tensor::full({1}, 0.3, true);
    const EpsilonModel model = [&](const Tensor& xt, const std::vector<std::size_t>&, const Tensor&,
                                   const std::vector<std::size_t>&) {
        return ops::mul_lastdim(xt, ops::reshape(ops::concat(std::vector<Tensor>(4, weight), 0), {4}));
    };
    DiffusionBatch batch{random_tensor({2, 2, 2, 4}, rng), Tensor::zeros({2, 1, 1}), {0, 0}};
    diffusion_loss(batch, model, sched, rng).loss.backward();
    EXPECT_NE(weight.grad()[0], 0.0);
}

TEST(DiffusionLoss, NonFiniteLossNamesTheSample) {
    const auto sched = cosine_schedule(16);
    Rng rng(6);
    const EpsilonModel bad = [](const Tensor& xt, const std::vector<std::size_t>&, const Tensor&,
                                const std::vector<std::size_t>&) {
        auto out = Tensor::zeros(xt.shape());
        out.mutable_data()[xt.numel() / 2 + 1] = std::numeric_limits<double>::quiet_NaN();
        return out;
    };
    DiffusionBatch batch{random_tensor({2, 2, 2, 2}, rng), Tensor::zeros({2, 1, 1}), {0, 0}};
    try {
        diffusion_loss(batch, bad, sched, rng);
        FAIL() << "expected TrainingError";
    } catch (const TrainingError& e) {
        EXPECT_NE(std::string(e.what()).find("sample 1"), std::string::npos) << e.what();
    }
}

TEST(Sampler, StridedTimesteps) {
    EXPECT_EQ(sampling_timesteps(64, 64).size(), 65u);
    EXPECT_EQ(sampling_timesteps(1024, 256), [] {
        std::vector<std::size_t> v;
        for (std::size_t i = 0; i <= 256; ++i) v.push_back(i * 4);
        return v;
    }());
    const auto odd = sampling_timesteps(10, 3);
    EXPECT_EQ(odd, (std::vector<std::size_t>{0, 3, 6, 10}));
    EXPECT_EQ(kDefaultSamplingSteps, 256u);
    EXPECT_THROW(sampling_timesteps(64, 65), ConfigError);
    EXPECT_THROW(sampling_timesteps(64, 0), ConfigError);
}

TEST(Sampler, TwoStepOracleWithZeroModel) {
    const auto sched = cosine_schedule(2);
    const std::size_t H = 2, W = 3, per = 2 * H * W;
    const std::vector<std::uint64_t> seeds = {17, 23};
    const auto out = ddpm_sample(zero_model, sched, 2, Tensor::zeros({2, 1, 1}), {0, 0}, H, W, seeds);
    ASSERT_EQ(out.shape(), (Shape{2, 2, H, W}));

    // Closed form of the schedule with the final step clipped at β = 0.999.
    const double ab1 = cosine_bar(1, 2, 0.008);
    const double ab2 = ab1 * (1.0 - std::min(0.999, 1.0 - cosine_bar(2, 2, 0.008) / ab1));
    const double alpha2 = ab2 / ab1, alpha1 = ab1;
    const double var2 = (1 - ab1) / (1 - ab2) * (1 - alpha2);
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        Rng rng(seeds[i]);
        const auto x2 = normal_vector(per, rng);
        const auto z = normal_vector(per, rng);
        for (std::size_t k = 0; k < per; ++k) {
            const double x1 = x2[k] / std::sqrt(alpha2) + std::sqrt(var2) * z[k];
            const double x0 = std::clamp(x1 / std::sqrt(alpha1), -1.0, 1.0);
            EXPECT_NEAR(out.data()[i * per + k], x0, 1e-12);
        }
    }
}

TEST(Sampler, ReproducibleBoundedAndPerSampleStreams) {
    const auto sched = cosine_schedule(64);
    const EpsilonModel model = [](const Tensor& xt, const std::vector<std::size_t>&, const Tensor&,
                                  const std::vector<std::size_t>&) { return ops::scale(ops::tanh(xt), 0.5); };
    const auto ctx = Tensor::zeros({2, 1, 1});
    const auto a = ddpm_sample(model, sched, 16, ctx, {0, 1}, 4, 4, {5, 6});
    const auto b = ddpm_sample(model, sched, 16, ctx, {0, 1}, 4, 4, {5, 6});
    EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
    for (auto v : a.data()) {
        EXPECT_GE(v, -1.0);
        EXPECT_LE(v, 1.0);
    }
    // A sample depends only on its own seed, not on its batch neighbours.
    const auto solo = ddpm_sample(model, sched, 16, Tensor::zeros({1, 1, 1}), {1}, 4, 4, {6});
    EXPECT_TRUE(std::equal(solo.data().begin(), solo.data().end(), a.data().begin() + 32));
    EXPECT_THROW(ddpm_sample(model, sched, 65, ctx, {0, 1}, 4, 4, {5, 6}), ConfigError);
}

TEST(Sampler, ClippedPosteriorMeanMatchesWhenCleanImageIsInRange) {
    // A model that is exact for the constant image 0.3 implies x0 = 0.3 at every step.
    const auto sched = cosine_schedule(64);
    const double target = 0.3;
    const EpsilonModel exact = [&](const Tensor& xt, const std::vector<std::size_t>& t, const Tensor&,
                                   const std::vector<std::size_t>&) {
        auto e = Tensor::zeros(xt.shape());
        const double ab = sched.alpha_bar[t[0]];
        for (std::size_t k = 0; k < xt.numel(); ++k)
            e.mutable_data()[k] = (xt.data()[k] - std::sqrt(ab) * target) / std::sqrt(1.0 - ab);
        return e;
    };
    const auto ctx = Tensor::zeros({1, 1, 1});
    for (std::size_t steps : {64u, 16u}) {
        const auto plain = ddpm_sample(exact, sched, steps, ctx, {0}, 3, 4, {9});
        const auto clipped = ddpm_sample(exact, sched, steps, ctx, {0}, 3, 4, {9}, true);
        for (std::size_t k = 0; k < plain.numel(); ++k) {
            EXPECT_NEAR(clipped.data()[k], target, 1e-9);
            EXPECT_NEAR(plain.data()[k], target, 1e-6);
        }
    }
    // An overconfident model drives the plain update to the clamp; clipping keeps x0 at the bound.
    const EpsilonModel wild = [](const Tensor& xt, const std::vector<std::size_t>&, const Tensor&,
                                 const std::vector<std::size_t>&) { return ops::scale(xt, -3.0); };
    const auto clipped = ddpm_sample(wild, sched, 64, ctx, {0}, 3, 4, {9}, true);
    for (auto v : clipped.data()) EXPECT_TRUE(std::isfinite(v) && std::abs(v) <= 1.0);
}
