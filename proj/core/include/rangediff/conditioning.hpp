#pragma once

#include <filesystem>
#include <map>
#include <random>
#include <string>

#include "rangediff/optim.hpp"
#include "rangediff/tensor.hpp"

namespace rangediff {

inline constexpr std::size_t kPromptTokens = 8;
inline constexpr std::size_t kEmbedWidth = 64;

/// Deterministic hash embedding of a prompt, [tokens, width]. Tokens are the
/// lowercased whitespace-separated words; each maps to a unit vector seeded by a
/// 64-bit hash of the word. Short prompts are zero padded, long ones truncated.
/// Throws ConfigError for a prompt with no tokens.
Tensor embed_prompt(const std::string& prompt, std::size_t tokens = kPromptTokens, std::size_t width = kEmbedWidth);

/// OLEB: magic "OLEB", u32 tokens, u32 width, tokens*width f32, little-endian.
void write_oleb(const std::filesystem::path& path, const Tensor& embedding);
Tensor read_oleb(const std::filesystem::path& path);

/// Prompt → embedding with optional externally computed overrides.
class PromptEmbedder {
public:
    explicit PromptEmbedder(std::size_t tokens = kPromptTokens, std::size_t width = kEmbedWidth)
        : tokens_(tokens), width_(width) {}

    /// Throws DimensionError when the override does not match [tokens, width].
    void set_override(const std::string& prompt, Tensor embedding);
    Tensor embed(const std::string& prompt) const;
    /// Stacks the embeddings of `prompts` into [B, tokens, width].
    Tensor embed_batch(const std::vector<std::string>& prompts) const;

    std::size_t tokens() const { return tokens_; }
    std::size_t width() const { return width_; }

private:
    std::size_t tokens_;
    std::size_t width_;
    std::map<std::string, Tensor> overrides_;
};

struct CrossAttnConfig {
    std::size_t channels = 32;       // feature-map channels C
    std::size_t context_width = kEmbedWidth;
    std::size_t key_width = 32;      // d_k = d_v
    std::size_t ff_multiplier = 2;
};

/// Single-head cross-attention followed by a feed-forward refinement, both with
/// pre-normalization and residual connections.
struct CrossAttnParams {
    CrossAttnConfig config;
    Tensor norm_gain, norm_bias;  // [C]
    Tensor query;                 // [C, d_k]
    Tensor key;                   // [d, d_k]
    Tensor value;                 // [d, d_v]
    Tensor out;                   // [d_v, C]
    Tensor ff_norm_gain, ff_norm_bias;
    Tensor ff_in, ff_in_bias;     // [C, m*C], [m*C]
    Tensor ff_out, ff_out_bias;   // [m*C, C], [C]

    static CrossAttnParams create(ParamStore& store, const std::string& prefix, const CrossAttnConfig& config,
                                  std::mt19937_64& rng);
};

/// Attention weights [B, H*W, L_c] of the feature map z[B, H, W, C] against context[B, L_c, d].
Tensor attention_weights(const Tensor& z, const Tensor& context, const CrossAttnParams& params);
/// z[B, H, W, C] attended to context[B, L_c, d]; same shape as z.
Tensor cross_attention(const Tensor& z, const Tensor& context, const CrossAttnParams& params);

}  // namespace rangediff
