#include "rangediff/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "rangediff/errors.hpp"
#include "rangediff/ops.hpp"

namespace rangediff {

double NoiseSchedule::beta(std::size_t t) const {
    if (t == 0 || t > steps) throw ArgumentError("beta index " + std::to_string(t) + " outside [1, " + std::to_string(steps) + "]");
    return 1.0 - alpha_bar[t] / alpha_bar[t - 1];
}

NoiseSchedule cosine_schedule(std::size_t T, double s) {
    if (T < 1) throw ConfigError("diffusion schedule needs T >= 1");
    auto f = [&](double t) {
        const double c = std::cos((t / static_cast<double>(T) + s) / (1.0 + s) * std::numbers::pi / 2.0);
        return c * c;
    };
    const double f0 = f(0.0);
    NoiseSchedule sched;
    sched.steps = T;
    sched.alpha_bar.resize(T + 1);
    sched.alpha_bar[0] = 1.0;
    for (std::size_t t = 1; t <= T; ++t) {
        const double beta = std::min(1.0 - (f(static_cast<double>(t)) / f0) / (f(static_cast<double>(t - 1)) / f0), 0.999);
        sched.alpha_bar[t] = sched.alpha_bar[t - 1] * (1.0 - beta);
    }
    return sched;
}

Tensor q_sample(const Tensor& x0, const std::vector<std::size_t>& timesteps, const Tensor& noise,
                const NoiseSchedule& schedule) {
    if (x0.shape() != noise.shape())
        throw DimensionError("q_sample: noise " + shape_str(noise.shape()) + " does not match x0 " + shape_str(x0.shape()));
    if (x0.rank() < 1 || timesteps.size() != x0.dim(0))
        throw DimensionError("q_sample needs one timestep per sample of " + shape_str(x0.shape()));
    const auto b = x0.dim(0);
    std::vector<Real> signal(b), spread(b);
    for (std::size_t i = 0; i < b; ++i) {
        const auto t = timesteps[i];
        if (t > schedule.steps) throw ArgumentError("timestep " + std::to_string(t) + " exceeds T = " + std::to_string(schedule.steps));
        signal[i] = std::sqrt(schedule.alpha_bar[t]);
        spread[i] = std::sqrt(1.0 - schedule.alpha_bar[t]);
    }
    // Per-sample scalars broadcast through the channel helpers on a [B, 1, N] view.
    const auto n = x0.numel() / b;
    const auto flat = ops::reshape(x0, {b, 1, n});
    const auto eps = ops::reshape(noise, {b, 1, n});
    const auto out = ops::add(ops::mul_channels(flat, Tensor::from({b, 1}, signal)),
                              ops::mul_channels(eps, Tensor::from({b, 1}, spread)));
    return ops::reshape(out, x0.shape());
}

LossResult diffusion_loss(const DiffusionBatch& batch, const EpsilonModel& model, const NoiseSchedule& schedule,
                          Rng& rng) {
    const auto b = batch.x0.dim(0);
    LossResult result;
    std::uniform_int_distribution<std::size_t> pick(1, schedule.steps);
    result.timesteps.resize(b);
    for (auto& t : result.timesteps) t = pick(rng);
    const auto noise = normal_tensor(batch.x0.shape(), rng);
    const auto xt = q_sample(batch.x0, result.timesteps, noise, schedule);
    const auto pred = model(xt, result.timesteps, batch.context, batch.domains);
    if (pred.shape() != noise.shape())
        throw DimensionError("noise prediction " + shape_str(pred.shape()) + " does not match " + shape_str(noise.shape()));
    result.loss = ops::mse(pred, noise);
    if (!std::isfinite(result.loss.item())) {
        const auto per = pred.numel() / b;
        for (std::size_t i = 0; i < b; ++i)
            for (std::size_t k = i * per; k < (i + 1) * per; ++k)
                if (!std::isfinite(pred.data()[k]) || !std::isfinite(batch.x0.data()[k]))
                    throw TrainingError("non-finite diffusion loss at sample " + std::to_string(i) + " (t = " +
                                        std::to_string(result.timesteps[i]) + ")");
        throw TrainingError("non-finite diffusion loss (overflow across the batch)");
    }
    return result;
}

std::vector<std::size_t> sampling_timesteps(std::size_t T, std::size_t steps) {
    if (steps == 0 || steps > T)
        throw ConfigError("sampling steps " + std::to_string(steps) + " must be in [1, T = " + std::to_string(T) + "]");
    std::vector<std::size_t> tau(steps + 1);
    for (std::size_t i = 0; i <= steps; ++i) tau[i] = i * T / steps;
    return tau;
}

Tensor ddpm_sample(const EpsilonModel& model, const NoiseSchedule& schedule, std::size_t steps, const Tensor& context,
                   const std::vector<std::size_t>& domains, std::size_t height, std::size_t width,
                   const std::vector<std::uint64_t>& seeds, bool clip_denoised) {
    const auto tau = sampling_timesteps(schedule.steps, steps);
    const auto b = seeds.size();
    if (domains.size() != b) throw DimensionError("ddpm_sample needs one domain per seed");
    const auto per = 2 * height * width;
    NoGradGuard no_grad;

    std::vector<Rng> rngs;
    rngs.reserve(b);
    for (auto s : seeds) rngs.push_back(make_rng(s));
    std::vector<Real> x(b * per);
    for (std::size_t i = 0; i < b; ++i) {
        const auto z = normal_vector(per, rngs[i]);
        std::copy(z.begin(), z.end(), x.begin() + static_cast<std::ptrdiff_t>(i * per));
    }

    for (std::size_t i = steps; i >= 1; --i) {
        const auto t = tau[i];
        const auto t_prev = tau[i - 1];
        const double ab = schedule.alpha_bar[t];
        const double ab_prev = schedule.alpha_bar[t_prev];
        const double alpha = ab / ab_prev;
        const double beta = 1.0 - alpha;
        const double var = (1.0 - ab_prev) / (1.0 - ab) * beta;

        const auto eps = model(Tensor::from({b, 2, height, width}, x), std::vector<std::size_t>(b, t), context, domains);
        if (eps.numel() != x.size()) throw DimensionError("noise prediction has shape " + shape_str(eps.shape()));
        const auto e = eps.data();
        if (clip_denoised) {
            const double sqrt_ab = std::sqrt(ab), sqrt_one_minus = std::sqrt(1.0 - ab);
            const double from_x0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
            const double from_xt = std::sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab);
            for (std::size_t k = 0; k < x.size(); ++k) {
                const double x0 = std::clamp((x[k] - sqrt_one_minus * e[k]) / sqrt_ab, -1.0, 1.0);
                x[k] = from_x0 * x0 + from_xt * x[k];
            }
        } else {
            const double coef = beta / std::sqrt(1.0 - ab);
            const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
            for (std::size_t k = 0; k < x.size(); ++k) x[k] = inv_sqrt_alpha * (x[k] - coef * e[k]);
        }
        if (t_prev > 0) {
            const double sd = std::sqrt(var);
            for (std::size_t s = 0; s < b; ++s) {
                const auto z = normal_vector(per, rngs[s]);
                for (std::size_t k = 0; k < per; ++k) x[s * per + k] += sd * z[k];
            }
        }
    }
    for (auto& v : x) v = std::clamp(v, -1.0, 1.0);
    return Tensor::from({b, 2, height, width}, std::move(x));
}

}  // namespace rangediff
