#include "rangediff/conditioning.hpp"

#include <cctype>
#include <cmath>
#include <sstream>

#include "rangediff/binary_io.hpp"
#include "rangediff/errors.hpp"
#include "rangediff/ops.hpp"
#include "rangediff/random.hpp"

namespace rangediff {

namespace {

std::vector<std::string> tokenize(const std::string& prompt) {
    std::vector<std::string> out;
    std::istringstream ss(prompt);
    std::string word;
    while (ss >> word) {
        for (auto& c : word) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        out.push_back(word);
    }
    return out;
}

void token_vector(const std::string& token, std::span<Real> out) {
    std::uint64_t state = fnv1a64(token);
    Real norm2 = 0.0;
    for (auto& v : out) {
        state = mix64(state);
        v = static_cast<Real>(state >> 11) * 0x1.0p-53 * 2.0 - 1.0;
        norm2 += v * v;
    }
    const Real inv = 1.0 / std::sqrt(norm2);
    for (auto& v : out) v *= inv;
}

}  // namespace

Tensor embed_prompt(const std::string& prompt, std::size_t tokens, std::size_t width) {
    const auto words = tokenize(prompt);
    if (words.empty()) throw ConfigError("cannot embed an empty prompt");
    if (tokens == 0 || width == 0) throw ConfigError("embedding needs at least one token and one channel");
    std::vector<Real> data(tokens * width, 0.0);
    for (std::size_t i = 0; i < std::min(tokens, words.size()); ++i)
        token_vector(words[i], std::span<Real>(data.data() + i * width, width));
    return Tensor::from({tokens, width}, std::move(data));
}

void write_oleb(const std::filesystem::path& path, const Tensor& embedding) {
    if (embedding.rank() != 2) throw DimensionError("OLEB embedding must be rank 2, got " + shape_str(embedding.shape()));
    io::ByteWriter w;
    w.put_bytes("OLEB");
    w.put<std::uint32_t>(static_cast<std::uint32_t>(embedding.dim(0)));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(embedding.dim(1)));
    for (Real v : embedding.data()) w.put<float>(static_cast<float>(v));
    w.save(path);
}

Tensor read_oleb(const std::filesystem::path& path) {
    io::ByteReader r(path);
    r.expect_magic("OLEB");
    const std::size_t tokens = r.get<std::uint32_t>();
    const std::size_t width = r.get<std::uint32_t>();
    if (tokens == 0 || width == 0) throw IoError("'" + path.string() + "': empty OLEB embedding");
    std::vector<Real> data(tokens * width);
    for (auto& v : data) v = r.get<float>();
    if (!r.at_end()) throw IoError("'" + path.string() + "' has trailing bytes");
    return Tensor::from({tokens, width}, std::move(data));
}

void PromptEmbedder::set_override(const std::string& prompt, Tensor embedding) {
    if (embedding.shape() != Shape{tokens_, width_})
        throw DimensionError("embedding override for '" + prompt + "' has shape " + shape_str(embedding.shape()) +
                             ", expected " + shape_str({tokens_, width_}));
    overrides_[prompt] = embedding.detach();
}

Tensor PromptEmbedder::embed(const std::string& prompt) const {
    if (auto it = overrides_.find(prompt); it != overrides_.end()) return it->second;
    return embed_prompt(prompt, tokens_, width_);
}

Tensor PromptEmbedder::embed_batch(const std::vector<std::string>& prompts) const {
    std::vector<Real> data;
    data.reserve(prompts.size() * tokens_ * width_);
    for (const auto& p : prompts) {
        const auto e = embed(p);
        data.insert(data.end(), e.data().begin(), e.data().end());
    }
    return Tensor::from({prompts.size(), tokens_, width_}, std::move(data));
}

CrossAttnParams CrossAttnParams::create(ParamStore& store, const std::string& prefix, const CrossAttnConfig& config,
                                        std::mt19937_64& rng) {
    const auto c = config.channels;
    const auto d = config.context_width;
    const auto k = config.key_width;
    const auto m = config.ff_multiplier * c;
    if (c == 0 || d == 0 || k == 0 || m == 0) throw ConfigError("cross-attention extents must be positive");
    CrossAttnParams p;
    p.config = config;
    p.norm_gain = store.add_constant(prefix + ".norm.gain", {c}, 1.0);
    p.norm_bias = store.add_constant(prefix + ".norm.bias", {c}, 0.0);
    p.query = store.add_fan_in(prefix + ".query", {c, k}, c, rng);
    p.key = store.add_fan_in(prefix + ".key", {d, k}, d, rng);
    p.value = store.add_fan_in(prefix + ".value", {d, k}, d, rng);
    p.out = store.add_fan_in(prefix + ".out", {k, c}, k, rng);
    p.ff_norm_gain = store.add_constant(prefix + ".ff.norm.gain", {c}, 1.0);
    p.ff_norm_bias = store.add_constant(prefix + ".ff.norm.bias", {c}, 0.0);
    p.ff_in = store.add_fan_in(prefix + ".ff.in", {c, m}, c, rng);
    p.ff_in_bias = store.add_constant(prefix + ".ff.in.bias", {m}, 0.0);
    p.ff_out = store.add_fan_in(prefix + ".ff.out", {m, c}, m, rng);
    p.ff_out_bias = store.add_constant(prefix + ".ff.out.bias", {c}, 0.0);
    return p;
}

namespace {

void check_shapes(const Tensor& z, const Tensor& context, const CrossAttnParams& p) {
    if (z.rank() != 4 || z.dim(3) != p.config.channels)
        throw DimensionError("cross-attention expects features [B,H,W," + std::to_string(p.config.channels) + "], got " +
                             shape_str(z.shape()));
    if (context.rank() != 3 || context.dim(0) != z.dim(0) || context.dim(2) != p.config.context_width)
        throw DimensionError("cross-attention expects context [" + std::to_string(z.dim(0)) + ",L," +
                             std::to_string(p.config.context_width) + "], got " + shape_str(context.shape()));
}

// Queries as [B, L_t, d_k] from the normalized feature sequence.
Tensor queries(const Tensor& seq, const CrossAttnParams& p) {
    return ops::linear(ops::layer_norm(seq, p.norm_gain, p.norm_bias), p.query);
}

Tensor weights_from(const Tensor& q, const Tensor& context, const CrossAttnParams& p) {
    const auto keys = ops::linear(context, p.key);
    const auto logits = ops::scale(ops::bmm(q, ops::transpose_last2(keys)),
                                   1.0 / std::sqrt(static_cast<Real>(p.config.key_width)));
    return ops::softmax(logits, 2);
}

}  // namespace

Tensor attention_weights(const Tensor& z, const Tensor& context, const CrossAttnParams& params) {
    check_shapes(z, context, params);
    const auto b = z.dim(0);
    const auto seq = ops::reshape(z, {b, z.dim(1) * z.dim(2), z.dim(3)});
    return weights_from(queries(seq, params), context, params);
}

Tensor cross_attention(const Tensor& z, const Tensor& context, const CrossAttnParams& params) {
    check_shapes(z, context, params);
    const auto b = z.dim(0);
    const auto seq = ops::reshape(z, {b, z.dim(1) * z.dim(2), z.dim(3)});
    const auto w = weights_from(queries(seq, params), context, params);
    const auto attended = ops::bmm(w, ops::linear(context, params.value));
    const auto h = ops::add(seq, ops::linear(attended, params.out));
    const auto ff = ops::linear(
        ops::silu(ops::linear(ops::layer_norm(h, params.ff_norm_gain, params.ff_norm_bias), params.ff_in, params.ff_in_bias)),
        params.ff_out, params.ff_out_bias);
    return ops::reshape(ops::add(h, ff), z.shape());
}

}  // namespace rangediff
