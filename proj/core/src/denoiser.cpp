#include "rangediff/denoiser.hpp"

#include <cmath>
#include <sstream>

#include "rangediff/errors.hpp"
#include "rangediff/ops.hpp"
#include "rangediff/random.hpp"

namespace rangediff {

void DenoiserConfig::validate() const {
    if (channels.empty()) throw ConfigError("model.channels must list at least one stage");
    if (groups == 0) throw ConfigError("model.groups must be positive");
    for (auto c : channels) {
        if (c == 0) throw ConfigError("model.channels entries must be positive");
        if (c % groups != 0)
            throw ConfigError("model.channels entry " + std::to_string(c) + " is not divisible by model.groups = " +
                              std::to_string(groups));
    }
    if (time_width == 0 || time_width % 2 != 0) throw ConfigError("model.time_width must be a positive even number");
    if (context_width == 0 || key_width == 0) throw ConfigError("model.context_width and model.key_width must be positive");
    if (attention_stages > channels.size())
        throw ConfigError("model.attention_stages exceeds the stage count " + std::to_string(channels.size()));
    if (domain_count == 0) throw ConfigError("model.domain_count must be positive");
    if (!(dafs_bound >= 0.0)) throw ConfigError("model.dafs_bound must be non-negative");
    if (max_timestep == 0) throw ConfigError("model.max_timestep must be positive");
}

bool DenoiserConfig::apply(const KvEntry& e) {
    const auto& k = e.key;
    if (k == "channels") channels = kv_uint_list(e);
    else if (k == "groups") groups = kv_uint(e);
    else if (k == "time_width") time_width = kv_uint(e);
    else if (k == "context_width") context_width = kv_uint(e);
    else if (k == "key_width") key_width = kv_uint(e);
    else if (k == "attention_stages") attention_stages = kv_uint(e);
    else if (k == "domain_count") domain_count = kv_uint(e);
    else if (k == "dafs_bound") dafs_bound = kv_double(e);
    else if (k == "max_timestep") max_timestep = kv_uint(e);
    else if (k == "cdfm") use_cdfm = kv_bool(e);
    else if (k == "dafs") use_dafs = kv_bool(e);
    else return false;
    return true;
}

std::string DenoiserConfig::to_text() const {
    std::ostringstream os;
    os.precision(17);
    os << "channels = ";
    for (std::size_t i = 0; i < channels.size(); ++i) os << (i ? "," : "") << channels[i];
    os << "\ngroups = " << groups << "\ntime_width = " << time_width << "\ncontext_width = " << context_width
       << "\nkey_width = " << key_width << "\nattention_stages = " << attention_stages
       << "\ndomain_count = " << domain_count << "\ndafs_bound = " << dafs_bound
       << "\nmax_timestep = " << max_timestep << "\ncdfm = " << (use_cdfm ? "true" : "false")
       << "\ndafs = " << (use_dafs ? "true" : "false") << '\n';
    return os.str();
}

Tensor sinusoidal_embedding(std::size_t t, std::size_t width, std::size_t max_t) {
    if (t > max_t)
        throw ArgumentError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(max_t) + "]");
    if (width == 0 || width % 2 != 0) throw ConfigError("timestep embedding width must be a positive even number");
    const auto half = width / 2;
    std::vector<Real> out(width);
    for (std::size_t k = 0; k < half; ++k) {
        const Real freq = std::exp(-std::log(10000.0) * static_cast<Real>(k) / static_cast<Real>(half));
        out[k] = std::sin(static_cast<Real>(t) * freq);
        out[half + k] = std::cos(static_cast<Real>(t) * freq);
    }
    return Tensor::from({width}, std::move(out));
}

Tensor scan_flatten(const Tensor& z, ScanDirection direction) {
    if (z.rank() != 4) throw DimensionError("scan_flatten expects [B,H,W,C], got " + shape_str(z.shape()));
    const auto b = z.dim(0), h = z.dim(1), w = z.dim(2), c = z.dim(3);
    if (direction == ScanDirection::Horizontal) return ops::reshape(z, {b, h * w, c});
    return ops::reshape(ops::permute(z, {0, 2, 1, 3}), {b, w * h, c});
}

Tensor scan_unflatten(const Tensor& seq, ScanDirection direction, std::size_t height, std::size_t width) {
    if (seq.rank() != 3 || seq.dim(1) != height * width)
        throw DimensionError("scan_unflatten expects [B," + std::to_string(height * width) + ",C], got " +
                             shape_str(seq.shape()));
    const auto b = seq.dim(0), c = seq.dim(2);
    if (direction == ScanDirection::Horizontal) return ops::reshape(seq, {b, height, width, c});
    return ops::permute(ops::reshape(seq, {b, width, height, c}), {0, 2, 1, 3});
}

ScanParams ScanParams::create(ParamStore& store, const std::string& prefix, std::size_t c, std::mt19937_64& rng) {
    ScanParams p;
    p.decay_log = store.add_constant(prefix + ".decay_log", {c}, 0.0);
    p.gate_weight = store.add_fan_in(prefix + ".gate.weight", {c}, 1, rng);
    p.gate_bias = store.add_constant(prefix + ".gate.bias", {c}, 0.0);
    p.input_mix = store.add_fan_in(prefix + ".input_mix", {c, c}, c, rng);
    p.output_mix = store.add_fan_in(prefix + ".output_mix", {c, c}, c, rng);
    p.skip = store.add_constant(prefix + ".skip", {c}, 1.0);
    return p;
}

Tensor selective_scan(const Tensor& s, const ScanParams& p) {
    const auto c = p.skip.numel();
    if (s.rank() != 3 || s.dim(2) != c)
        throw DimensionError("selective_scan expects [B,L," + std::to_string(c) + "], got " + shape_str(s.shape()));
    const auto step = ops::softplus(ops::add_lastdim(ops::mul_lastdim(s, p.gate_weight), p.gate_bias));
    const auto rate = ops::scale(ops::exp(p.decay_log), -1.0);
    const auto decay = ops::exp(ops::mul_lastdim(step, rate));
    const auto drive = ops::mul(ops::mul(step, ops::linear(s, p.input_mix)), s);
    const auto state = ops::linear_recurrence(decay, drive);
    return ops::add(ops::mul(ops::linear(s, p.output_mix), state), ops::mul_lastdim(s, p.skip));
}

CdfmParams CdfmParams::create(ParamStore& store, const std::string& prefix, std::size_t channels, std::size_t groups,
                              std::mt19937_64& rng) {
    if (groups == 0 || channels % groups != 0)
        throw ConfigError("CDFM channels " + std::to_string(channels) + " not divisible by " + std::to_string(groups) +
                          " groups");
    CdfmParams p;
    p.channels = channels;
    p.groups = groups;
    p.norm_gain = store.add_constant(prefix + ".norm.gain", {channels}, 1.0);
    p.norm_bias = store.add_constant(prefix + ".norm.bias", {channels}, 0.0);
    p.scan = ScanParams::create(store, prefix + ".scan", channels / groups, rng);
    p.projection = store.add_fan_in(prefix + ".projection", {channels, channels}, channels, rng);
    return p;
}

Tensor cdfm_direction(const Tensor& seq, const CdfmParams& p) {
    const auto b = seq.dim(0), len = seq.dim(1), c = seq.dim(2);
    if (c % p.groups != 0)
        throw ConfigError("CDFM channels " + std::to_string(c) + " not divisible by " + std::to_string(p.groups) +
                          " groups");
    const auto cg = c / p.groups;
    const auto normed = ops::layer_norm(seq, p.norm_gain, p.norm_bias);
    // Groups are folded into the batch axis so one scan call covers all of them.
    const auto grouped = ops::reshape(ops::permute(ops::reshape(normed, {b, len, p.groups, cg}), {0, 2, 1, 3}),
                                      {b * p.groups, len, cg});
    const auto scanned = selective_scan(grouped, p.scan);
    const auto merged = ops::reshape(ops::permute(ops::reshape(scanned, {b, p.groups, len, cg}), {0, 2, 1, 3}),
                                     {b, len, c});
    return ops::add(seq, merged);
}

Tensor cdfm_block(const Tensor& z, const CdfmParams& p) {
    if (z.rank() != 4 || z.dim(3) != p.channels)
        throw DimensionError("cdfm_block expects [B,H,W," + std::to_string(p.channels) + "], got " + shape_str(z.shape()));
    if (p.channels % p.groups != 0)
        throw ConfigError("CDFM channels " + std::to_string(p.channels) + " not divisible by " +
                          std::to_string(p.groups) + " groups");
    const auto h = z.dim(1), w = z.dim(2);
    const auto across = scan_unflatten(cdfm_direction(scan_flatten(z, ScanDirection::Horizontal), p),
                                       ScanDirection::Horizontal, h, w);
    const auto down = scan_unflatten(cdfm_direction(scan_flatten(z, ScanDirection::Vertical), p),
                                     ScanDirection::Vertical, h, w);
    const auto fused = ops::scale(ops::add(across, down), 0.5);
    return ops::add(fused, ops::linear(fused, p.projection));
}

DafsParams DafsParams::create(ParamStore& store, const std::string& prefix, std::size_t domains, std::size_t channels,
                              double bound) {
    if (!(bound > 0.0)) throw ConfigError("DAFS bound must be positive");
    return {store.add_constant(prefix + ".table", {domains, 2 * channels}, 0.0), bound};
}

Tensor dafs_modulate(const Tensor& f, const std::vector<std::size_t>& domains, const DafsParams& p) {
    const auto m = p.table.dim(0);
    const auto c = p.table.dim(1) / 2;
    if (f.rank() < 2 || f.dim(1) != c)
        throw DimensionError("dafs_modulate expects [B," + std::to_string(c) + ",...], got " + shape_str(f.shape()));
    if (domains.size() != f.dim(0))
        throw DimensionError("dafs_modulate got " + std::to_string(domains.size()) + " domain indices for batch " +
                             std::to_string(f.dim(0)));
    for (auto d : domains)
        if (d >= m) throw ArgumentError("domain index " + std::to_string(d) + " outside [0, " + std::to_string(m) + ")");
    const auto rows = ops::gather_rows(p.table, domains);
    const auto gain = ops::add_scalar(ops::scale(ops::tanh(ops::slice(rows, 1, 0, c)), p.bound), 1.0);
    const auto shift = ops::scale(ops::tanh(ops::slice(rows, 1, c, c)), p.bound);
    return ops::add_channels(ops::mul_channels(f, gain), shift);
}

Denoiser::Conv Denoiser::make_conv(const std::string& name, std::size_t in, std::size_t out, std::size_t k,
                                   std::mt19937_64& rng) {
    return {store_.add_fan_in(name + ".weight", {out, in, k, k}, in * k * k, rng),
            store_.add_constant(name + ".bias", {out}, 0.0)};
}

Denoiser::ResBlock Denoiser::make_block(const std::string& name, std::size_t in, std::size_t out,
                                        std::mt19937_64& rng) {
    ResBlock b;
    b.first = make_conv(name + ".conv1", in, out, 3, rng);
    b.time_weight = store_.add_fan_in(name + ".time.weight", {config_.time_width, out}, config_.time_width, rng);
    b.time_bias = store_.add_constant(name + ".time.bias", {out}, 0.0);
    b.second = make_conv(name + ".conv2", out, out, 3, rng);
    if (in != out) b.shortcut = make_conv(name + ".shortcut", in, out, 1, rng);
    return b;
}

Denoiser::Denoiser(DenoiserConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    auto rng = make_rng(stream_key(seed, "denoiser.init"));
    const auto& ch = config_.channels;
    const auto n = ch.size();
    const auto tw = config_.time_width;
    auto attn_cfg = [&](std::size_t c) { return CrossAttnConfig{c, config_.context_width, config_.key_width, 2}; };
    auto has_attention = [&](std::size_t stage) { return stage + config_.attention_stages >= n; };

    input_ = make_conv("input", 2, ch[0], 3, rng);
    time_in_w_ = store_.add_fan_in("time.in.weight", {tw, tw}, tw, rng);
    time_in_b_ = store_.add_constant("time.in.bias", {tw}, 0.0);
    time_out_w_ = store_.add_fan_in("time.out.weight", {tw, tw}, tw, rng);
    time_out_b_ = store_.add_constant("time.out.bias", {tw}, 0.0);

    for (std::size_t i = 0; i < n; ++i) {
        const std::string name = "down" + std::to_string(i);
        Stage s;
        s.block = make_block(name + ".block", i == 0 ? ch[0] : ch[i - 1], ch[i], rng);
        if (has_attention(i) && config_.attention_stages > 0)
            s.attention = CrossAttnParams::create(store_, name + ".attn", attn_cfg(ch[i]), rng);
        if (i + 1 < n) s.down = make_conv(name + ".downsample", ch[i], ch[i], 3, rng);
        down_.push_back(std::move(s));
    }
    middle_ = make_block("middle.block", ch[n - 1], ch[n - 1], rng);
    if (config_.attention_stages > 0)
        middle_attention_ = CrossAttnParams::create(store_, "middle.attn", attn_cfg(ch[n - 1]), rng);
    if (config_.use_cdfm) cdfm_ = CdfmParams::create(store_, "middle.cdfm", ch[n - 1], config_.groups, rng);

    for (std::size_t j = 0; j < n; ++j) {
        const auto i = n - 1 - j;
        const std::string name = "up" + std::to_string(i);
        UpStage s;
        s.block = make_block(name + ".block", 2 * ch[i], ch[i], rng);
        if (has_attention(i) && config_.attention_stages > 0)
            s.attention = CrossAttnParams::create(store_, name + ".attn", attn_cfg(ch[i]), rng);
        if (config_.use_dafs)
            dafs_.push_back(DafsParams::create(store_, name + ".dafs", config_.domain_count, ch[i], config_.dafs_bound));
        if (i > 0) s.up = make_conv(name + ".upsample", ch[i], ch[i - 1], 3, rng);
        up_.push_back(std::move(s));
    }
    output_ = make_conv("output", ch[0], 2, 1, rng);
}

Tensor Denoiser::run_block(const ResBlock& b, const Tensor& x, const Tensor& temb) const {
    auto h = ops::conv2d(ops::silu(x), b.first.weight, b.first.bias);
    h = ops::add_channels(h, ops::linear(temb, b.time_weight, b.time_bias));
    h = ops::conv2d(ops::silu(h), b.second.weight, b.second.bias);
    const auto skip = b.shortcut ? ops::conv2d(x, b.shortcut->weight, b.shortcut->bias) : x;
    return ops::add(skip, h);
}

Tensor Denoiser::attend(const CrossAttnParams& params, const Tensor& x, const Tensor& context) const {
    const auto nhwc = ops::permute(x, {0, 2, 3, 1});
    return ops::permute(cross_attention(nhwc, context, params), {0, 3, 1, 2});
}

Tensor Denoiser::denoise(const Tensor& x, const std::vector<std::size_t>& timesteps, const Tensor& context,
                         const std::vector<std::size_t>& domains) const {
    const auto n = config_.channels.size();
    const std::size_t factor = std::size_t{1} << (n - 1);
    if (x.rank() != 4 || x.dim(1) != 2)
        throw DimensionError("denoise expects [B,2,H,W], got " + shape_str(x.shape()));
    const auto b = x.dim(0);
    if (x.dim(2) % factor != 0 || x.dim(3) % factor != 0)
        throw DimensionError("image " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                             " is not divisible by " + std::to_string(factor) + " for " + std::to_string(n) + " stages");
    if (timesteps.size() != b || domains.size() != b)
        throw DimensionError("denoise needs one timestep and one domain per sample (batch " + std::to_string(b) + ")");
    if (context.rank() != 3 || context.dim(0) != b || context.dim(2) != config_.context_width)
        throw DimensionError("denoise expects context [" + std::to_string(b) + ",L," +
                             std::to_string(config_.context_width) + "], got " + shape_str(context.shape()));
    for (auto d : domains)
        if (d >= config_.domain_count)
            throw ArgumentError("domain index " + std::to_string(d) + " outside [0, " +
                                std::to_string(config_.domain_count) + ")");

    std::vector<Real> sinus;
    sinus.reserve(b * config_.time_width);
    for (auto t : timesteps) {
        const auto e = sinusoidal_embedding(t, config_.time_width, config_.max_timestep);
        sinus.insert(sinus.end(), e.data().begin(), e.data().end());
    }
    auto temb = Tensor::from({b, config_.time_width}, std::move(sinus));
    temb = ops::linear(ops::silu(ops::linear(temb, time_in_w_, time_in_b_)), time_out_w_, time_out_b_);
    const auto temb_act = ops::silu(temb);

    auto h = ops::conv2d(x, input_.weight, input_.bias);
    std::vector<Tensor> skips;
    for (const auto& s : down_) {
        h = run_block(s.block, h, temb_act);
        if (s.attention) h = attend(*s.attention, h, context);
        skips.push_back(h);
        if (s.down) h = ops::conv2d(h, s.down->weight, s.down->bias, 2);
    }
    h = run_block(middle_, h, temb_act);
    if (middle_attention_) h = attend(*middle_attention_, h, context);
    if (cdfm_) h = ops::permute(cdfm_block(ops::permute(h, {0, 2, 3, 1}), *cdfm_), {0, 3, 1, 2});

    for (std::size_t j = 0; j < up_.size(); ++j) {
        const auto& s = up_[j];
        h = ops::concat({h, skips[n - 1 - j]}, 1);
        h = run_block(s.block, h, temb_act);
        if (s.attention) h = attend(*s.attention, h, context);
        if (config_.use_dafs) h = dafs_modulate(h, domains, dafs_[j]);
        if (s.up) h = ops::conv2d(ops::upsample_nearest2(h), s.up->weight, s.up->bias);
    }
    return ops::conv2d(ops::silu(h), output_.weight, output_.bias);
}

}  // namespace rangediff
