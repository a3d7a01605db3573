#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "rangediff/conditioning.hpp"
#include "rangediff/config.hpp"
#include "rangediff/optim.hpp"
#include "rangediff/tensor.hpp"

namespace rangediff {

struct DenoiserConfig {
    std::vector<std::size_t> channels = {32, 64, 128};  // per stage; each stage halves the resolution
    std::size_t groups = 4;
    std::size_t time_width = 64;
    std::size_t context_width = kEmbedWidth;
    std::size_t key_width = 32;
    std::size_t attention_stages = 2;  // cross-attention at this many deepest stages
    std::size_t domain_count = 8;
    double dafs_bound = 0.1;
    std::size_t max_timestep = 1024;
    bool use_cdfm = true;
    bool use_dafs = true;

    /// Throws ConfigError on an inconsistent configuration.
    void validate() const;
    /// Applies one "key = value" entry (keys as written by to_text). Returns false for unknown keys.
    bool apply(const KvEntry& entry);
    std::string to_text() const;
    bool operator==(const DenoiserConfig&) const = default;
};

/// Sinusoidal encoding of `t` at geometric frequencies: [sin(t*f_k) | cos(t*f_k)].
/// Throws ArgumentError unless 0 <= t <= max_t.
Tensor sinusoidal_embedding(std::size_t t, std::size_t width, std::size_t max_t);

enum class ScanDirection { Horizontal, Vertical };

/// z[B, H, W, C] → [B, H*W, C]. Horizontal order s = v*W + u, vertical order s = u*H + v.
Tensor scan_flatten(const Tensor& z, ScanDirection direction);
Tensor scan_unflatten(const Tensor& seq, ScanDirection direction, std::size_t height, std::size_t width);

/// Shared parameters of the directional sequence layer, sized for one channel group.
struct ScanParams {
    Tensor decay_log;   // a [c], decay rate A = -exp(a)
    Tensor gate_weight; // w_Δ [c]
    Tensor gate_bias;   // b_Δ [c]
    Tensor input_mix;   // W_B [c, c]
    Tensor output_mix;  // W_C [c, c]
    Tensor skip;        // D [c]

    static ScanParams create(ParamStore& store, const std::string& prefix, std::size_t channels, std::mt19937_64& rng);
};

/// Input-gated diagonal recurrence over s[B, L, c]:
///   Δ = softplus(w_Δ x + b_Δ), ā = exp(-Δ exp(a)),
///   h_s = ā_s h_{s-1} + Δ_s (x_s W_B) x_s,  y_s = (x_s W_C) h_s + D x_s.
Tensor selective_scan(const Tensor& s, const ScanParams& params);

struct CdfmParams {
    std::size_t channels = 0;
    std::size_t groups = 4;
    Tensor norm_gain, norm_bias;  // [C]
    ScanParams scan;              // one set, read by both directional passes
    Tensor projection;            // [C, C]

    static CdfmParams create(ParamStore& store, const std::string& prefix, std::size_t channels, std::size_t groups,
                             std::mt19937_64& rng);
};

/// Directional scan of one flattened sequence: residual plus the group-wise shared scan of its layer norm.
Tensor cdfm_direction(const Tensor& seq, const CdfmParams& params);
/// Cross-directional feature modeling on z[B, H, W, C].
Tensor cdfm_block(const Tensor& z, const CdfmParams& params);

struct DafsParams {
    Tensor table;  // [M, 2c], rows [γ | β]
    double bound = 0.1;

    static DafsParams create(ParamStore& store, const std::string& prefix, std::size_t domains, std::size_t channels,
                             double bound);
};

/// (1 + λ tanh γ_d) ⊙ F + λ tanh β_d per sample, F[B, c, H, W], one domain index per sample.
Tensor dafs_modulate(const Tensor& f, const std::vector<std::size_t>& domains, const DafsParams& params);

/// Conditional UNet noise predictor.
class Denoiser {
public:
    Denoiser(DenoiserConfig config, std::uint64_t seed);
    Denoiser(const Denoiser&) = delete;
    Denoiser& operator=(const Denoiser&) = delete;

    /// x[B, 2, H, W], one timestep and domain index per sample, context[B, L_c, d]. H and W
    /// must be divisible by 2^(stages-1).
    Tensor denoise(const Tensor& x, const std::vector<std::size_t>& timesteps, const Tensor& context,
                   const std::vector<std::size_t>& domains) const;

    const DenoiserConfig& config() const { return config_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }
    const std::optional<CdfmParams>& cdfm() const { return cdfm_; }
    const std::vector<DafsParams>& dafs() const { return dafs_; }

private:
    struct Conv {
        Tensor weight, bias;
    };
    struct ResBlock {
        Conv first, second;
        std::optional<Conv> shortcut;
        Tensor time_weight, time_bias;
    };
    struct Stage {
        ResBlock block;
        std::optional<CrossAttnParams> attention;
        std::optional<Conv> down;
    };
    struct UpStage {
        ResBlock block;
        std::optional<CrossAttnParams> attention;
        std::optional<Conv> up;  // applied after nearest upsampling
    };

    Conv make_conv(const std::string& name, std::size_t in, std::size_t out, std::size_t k, std::mt19937_64& rng);
    ResBlock make_block(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng);
    Tensor run_block(const ResBlock& block, const Tensor& x, const Tensor& temb) const;
    Tensor attend(const CrossAttnParams& params, const Tensor& x, const Tensor& context) const;

    DenoiserConfig config_;
    ParamStore store_;
    Conv input_;
    Tensor time_in_w_, time_in_b_, time_out_w_, time_out_b_;
    std::vector<Stage> down_;
    ResBlock middle_;
    std::optional<CrossAttnParams> middle_attention_;
    std::optional<CdfmParams> cdfm_;
    std::vector<UpStage> up_;  // deepest first
    std::vector<DafsParams> dafs_;
    Conv output_;
};

}  // namespace rangediff
