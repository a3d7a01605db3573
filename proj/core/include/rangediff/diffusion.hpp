#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "rangediff/random.hpp"
#include "rangediff/tensor.hpp"

namespace rangediff {

/// Cumulative signal retention ᾱ_0..ᾱ_T with ᾱ_0 = 1.
struct NoiseSchedule {
    std::size_t steps = 0;  // T
    std::vector<double> alpha_bar;

    /// β_t = 1 - ᾱ_t / ᾱ_{t-1}, t in [1, T].
    double beta(std::size_t t) const;
};

/// Cosine schedule with offset s; per-step β is clipped to 0.999 and ᾱ is rebuilt
/// from the clipped betas. Throws ConfigError when T < 1.
NoiseSchedule cosine_schedule(std::size_t T, double s = 0.008);

/// x_t = sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) ε, one timestep per sample along axis 0.
Tensor q_sample(const Tensor& x0, const std::vector<std::size_t>& timesteps, const Tensor& noise,
                const NoiseSchedule& schedule);

/// Noise predictor ε(x_t, t, context, domain).
using EpsilonModel = std::function<Tensor(const Tensor& xt, const std::vector<std::size_t>& timesteps,
                                          const Tensor& context, const std::vector<std::size_t>& domains)>;

struct DiffusionBatch {
    Tensor x0;       // [B, 2, H, W]
    Tensor context;  // [B, L_c, d]
    std::vector<std::size_t> domains;
};

struct LossResult {
    Tensor loss;  // scalar, differentiable
    std::vector<std::size_t> timesteps;
};

/// Draws t ~ U{1..T} and ε ~ N(0, I) per sample and returns the mean squared noise
/// prediction error. Throws TrainingError naming the sample when the loss is not finite.
LossResult diffusion_loss(const DiffusionBatch& batch, const EpsilonModel& model, const NoiseSchedule& schedule,
                          Rng& rng);

/// Timesteps visited by a strided sampler: τ_i = floor(i T / S), i = 0..S.
std::vector<std::size_t> sampling_timesteps(std::size_t T, std::size_t steps);

inline constexpr std::size_t kDefaultSamplingSteps = 256;

/// Ancestral sampling of B = seeds.size() images of shape [2, H, W]. Each sample
/// owns its random stream seeded by seeds[i]: first the initial noise, then one
/// draw per step that adds noise. Output is clamped to [-1, 1]. Throws ConfigError
/// when steps is 0 or exceeds T.
///
/// With `clip_denoised` each step clamps the implied clean image
/// x0 = (x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t) to [-1, 1] and takes the posterior
/// mean from it. Without clamping this is the same mean; with it, prediction
/// error is no longer amplified by the near-one final beta of the schedule.
Tensor ddpm_sample(const EpsilonModel& model, const NoiseSchedule& schedule, std::size_t steps, const Tensor& context,
                   const std::vector<std::size_t>& domains, std::size_t height, std::size_t width,
                   const std::vector<std::uint64_t>& seeds, bool clip_denoised = false);

}  // namespace rangediff
