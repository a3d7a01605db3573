#include "rangediff/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "rangediff/binary_io.hpp"
#include "rangediff/checkpoint.hpp"
#include "rangediff/conditioning.hpp"
#include "rangediff/diffusion.hpp"
#include "rangediff/errors.hpp"
#include "rangediff/ops.hpp"
#include "rangediff/random.hpp"

namespace rangediff {

namespace fs = std::filesystem;

std::string_view sampler_name(SamplerKind kind) { return kind == SamplerKind::Cdts ? "cdts" : "homogeneous"; }

std::optional<SamplerKind> parse_sampler(std::string_view name) {
    if (name == "cdts") return SamplerKind::Cdts;
    if (name == "homogeneous") return SamplerKind::Homogeneous;
    return std::nullopt;
}

BatchSampler::BatchSampler(const DatasetIndex& index, std::vector<DomainSpec> specs, SamplerKind kind,
                           std::size_t batch, std::uint64_t seed, const std::vector<DomainId>& domains)
    : specs_(std::move(specs)), kind_(kind), batch_(batch), seed_(seed) {
    if (batch_ == 0) throw ConfigError("batch size must be at least 1");
    auto wanted = [&](DomainId d) { return domains.empty() || std::find(domains.begin(), domains.end(), d) != domains.end(); };
    std::map<DomainId, std::vector<std::size_t>> groups;
    records_domain_.reserve(index.records.size());
    for (std::size_t i = 0; i < index.records.size(); ++i) {
        const auto& r = index.records[i];
        records_domain_.push_back(r.domain);
        if (r.split != Split::Train || !wanted(r.domain)) continue;
        pool_.push_back(i);
        groups[r.domain].push_back(i);
    }
    if (pool_.empty()) throw ConfigError("the dataset index has no training records for the selected domains");
    for (auto& [d, recs] : groups) {
        find_spec(specs_, d);  // every sampled domain needs a prompt pool
        domains_.push_back(d);
        by_domain_.push_back(std::move(recs));
    }
}

BatchPlan BatchSampler::plan(std::uint64_t step) const {
    auto rng = make_rng(stream_key(seed_, "batch", step));
    BatchPlan out;
    out.reserve(batch_);
    auto emit = [&](std::size_t record) {
        const auto d = records_domain_[record];
        out.push_back({record, d, sample_prompt(find_spec(specs_, d), PromptMode::Train, rng)});
    };
    if (kind_ == SamplerKind::Cdts) {
        std::uniform_int_distribution<std::size_t> pick(0, pool_.size() - 1);
        for (std::size_t i = 0; i < batch_; ++i) emit(pool_[pick(rng)]);
    } else {
        std::uniform_int_distribution<std::size_t> pick_domain(0, by_domain_.size() - 1);
        const auto& recs = by_domain_[pick_domain(rng)];
        std::uniform_int_distribution<std::size_t> pick(0, recs.size() - 1);
        for (std::size_t i = 0; i < batch_; ++i) emit(recs[pick(rng)]);
    }
    return out;
}

bool TrainConfig::apply(const KvEntry& e) {
    if (e.section.empty() && e.key == "domains") {
        domains.clear();
        for (const auto& name : kv_list(e)) {
            const auto d = parse_domain(name);
            if (!d) throw ConfigError(e.where() + ": unknown domain '" + name + "' (known: " + known_domains_list() + ")");
            if (std::find(domains.begin(), domains.end(), *d) != domains.end())
                throw ConfigError(e.where() + ": domain '" + name + "' listed twice");
            domains.push_back(*d);
        }
        return true;
    }
    if (e.section == "model") return model.apply(e);
    if (e.section == "image") {
        if (e.key == "height") image.height = kv_uint(e);
        else if (e.key == "width") image.width = kv_uint(e);
        else if (e.key == "f_up") image.f_up = kv_double(e);
        else if (e.key == "f_down") image.f_down = kv_double(e);
        else if (e.key == "r_max") image.r_max = kv_double(e);
        else return false;
        return true;
    }
    if (e.section == "diffusion") {
        if (e.key != "T") return false;
        diffusion_steps = kv_uint(e);
        return true;
    }
    if (e.section == "train") {
        if (e.key == "batch") batch = kv_uint(e);
        else if (e.key == "lr") optimizer.learning_rate = kv_double(e);
        else if (e.key == "weight_decay") optimizer.weight_decay = kv_double(e);
        else if (e.key == "beta1") optimizer.beta1 = kv_double(e);
        else if (e.key == "beta2") optimizer.beta2 = kv_double(e);
        else if (e.key == "sampler") {
            const auto s = parse_sampler(e.value);
            if (!s) throw ConfigError(e.where() + ": sampler must be 'cdts' or 'homogeneous'");
            sampler = *s;
        } else if (e.key == "seed") seed = kv_uint(e);
        else if (e.key == "steps") steps = kv_uint(e);
        else if (e.key == "checkpoint_every") checkpoint_every = kv_uint(e);
        else if (e.key == "clip_norm") clip_norm = kv_double(e);
        else return false;
        return true;
    }
    return false;
}

void TrainConfig::validate() const {
    model.validate();
    image.validate();
    if (diffusion_steps < 1) throw ConfigError("diffusion.T must be at least 1");
    if (batch < 1) throw ConfigError("train.batch must be at least 1");
    if (!(optimizer.learning_rate > 0.0)) throw ConfigError("train.lr must be positive");
    if (!(optimizer.weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be non-negative");
    if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0 && optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0))
        throw ConfigError("train.beta1 and train.beta2 must be in [0, 1)");
    if (checkpoint_every < 1) throw ConfigError("train.checkpoint_every must be at least 1");
    if (!(clip_norm >= 0.0)) throw ConfigError("train.clip_norm must be non-negative");
}

void write_manifest(const fs::path& path, const TrainConfig& c) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.precision(17);
    out << "domains = ";
    for (std::size_t i = 0; i < c.domains.size(); ++i) out << (i ? "," : "") << domain_name(c.domains[i]);
    out << "\n\n[model]\n" << c.model.to_text();
    out << "\n[image]\nheight = " << c.image.height << "\nwidth = " << c.image.width << "\nf_up = " << c.image.f_up
        << "\nf_down = " << c.image.f_down << "\nr_max = " << c.image.r_max << '\n';
    out << "\n[diffusion]\nT = " << c.diffusion_steps << '\n';
    out << "\n[train]\nbatch = " << c.batch << "\nlr = " << c.optimizer.learning_rate
        << "\nweight_decay = " << c.optimizer.weight_decay << "\nbeta1 = " << c.optimizer.beta1
        << "\nbeta2 = " << c.optimizer.beta2 << "\nsampler = " << sampler_name(c.sampler) << "\nseed = " << c.seed
        << "\nsteps = " << c.steps << "\ncheckpoint_every = " << c.checkpoint_every << "\nclip_norm = " << c.clip_norm
        << '\n';
    if (!out) throw IoError("failed writing '" + path.string() + "'");
}

TrainConfig read_manifest(const fs::path& path) {
    TrainConfig c;
    for (const auto& e : read_kv_file(path))
        if (!c.apply(e)) throw ConfigError(e.where() + ": unknown key in model manifest");
    c.validate();
    if (c.domains.size() != c.model.domain_count)
        throw ConfigError(path.string() + ": domains list does not match model.domain_count");
    return c;
}

std::vector<std::vector<Real>> load_training_images(const fs::path& index_path, const DatasetIndex& index,
                                                    const SensorConfig& image, const std::vector<DomainId>& domains) {
    const auto root = index_path.parent_path();
    std::vector<std::vector<Real>> out(index.records.size());
    for (std::size_t i = 0; i < index.records.size(); ++i) {
        const auto& r = index.records[i];
        if (r.split != Split::Train) continue;
        if (!domains.empty() && std::find(domains.begin(), domains.end(), r.domain) == domains.end()) continue;
        auto img = read_olri(root / r.path);
        if (!(img.config == image)) img = rasterize(unproject(img), image).image;
        const auto t = normalize(img);
        out[i].assign(t.data().begin(), t.data().end());
    }
    return out;
}

fs::path state_path_for(const fs::path& checkpoint) {
    auto p = checkpoint;
    p.replace_extension(".state");
    return p;
}

namespace {

constexpr std::uint16_t kStateVersion = 1;

void write_state(const fs::path& path, const ParamStore& params, const OptimizerState& opt, std::uint64_t seed) {
    io::ByteWriter w;
    w.put_bytes("OLST");
    w.put<std::uint16_t>(kStateVersion);
    w.put<std::uint64_t>(opt.step);
    w.put<std::uint64_t>(seed);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(params.entries().size()));
    for (std::size_t i = 0; i < params.entries().size(); ++i) {
        const auto& e = params.entries()[i];
        w.put<std::uint16_t>(static_cast<std::uint16_t>(e.name.size()));
        w.put_bytes(e.name);
        const auto data = e.tensor.data();
        w.put<std::uint64_t>(data.size());
        for (Real v : data) w.put<double>(v);
        for (std::size_t k = 0; k < data.size(); ++k) w.put<double>(opt.first_moment.empty() ? 0.0 : opt.first_moment[i][k]);
        for (std::size_t k = 0; k < data.size(); ++k) w.put<double>(opt.second_moment.empty() ? 0.0 : opt.second_moment[i][k]);
    }
    w.save(path);
}

// Returns the stored seed.
std::uint64_t read_state(const fs::path& path, ParamStore& params, OptimizerState* opt) {
    io::ByteReader r(path);
    r.expect_magic("OLST");
    if (r.get<std::uint16_t>() != kStateVersion) throw IoError("'" + path.string() + "': unsupported state version");
    const auto step = r.get<std::uint64_t>();
    const auto seed = r.get<std::uint64_t>();
    const auto count = r.get<std::uint32_t>();
    if (count != params.entries().size())
        throw IoError("'" + path.string() + "' holds " + std::to_string(count) + " parameters, the model has " +
                      std::to_string(params.entries().size()));
    std::vector<std::vector<Real>> m1(count), m2(count);
    for (std::size_t i = 0; i < count; ++i) {
        auto& e = params.entries()[i];
        const auto name = r.get_bytes(r.get<std::uint16_t>());
        if (name != e.name) throw IoError("'" + path.string() + "': expected parameter '" + e.name + "', found '" + name + "'");
        const auto n = r.get<std::uint64_t>();
        if (n != e.tensor.numel()) throw IoError("'" + path.string() + "': size mismatch for '" + name + "'");
        auto data = e.tensor.mutable_data();
        for (auto& v : data) v = r.get<double>();
        m1[i].resize(n);
        m2[i].resize(n);
        for (auto& v : m1[i]) v = r.get<double>();
        for (auto& v : m2[i]) v = r.get<double>();
    }
    if (!r.at_end()) throw IoError("'" + path.string() + "' has trailing bytes");
    if (opt) {
        opt->step = step;
        opt->first_moment = std::move(m1);
        opt->second_moment = std::move(m2);
    }
    return seed;
}

std::uint64_t step_of_checkpoint(const fs::path& checkpoint) {
    const auto stem = checkpoint.stem().string();
    if (stem.rfind("ckpt_", 0) != 0) throw ConfigError("cannot infer the step of checkpoint '" + checkpoint.string() + "'");
    KvEntry e{"", "checkpoint", stem.substr(5), 0, checkpoint.string()};
    return kv_uint(e);
}

// Keeps the header and rows whose leading step is <= last_step.
void truncate_trace(const fs::path& path, std::uint64_t last_step, const std::string& header) {
    std::vector<std::string> keep{header};
    if (std::ifstream in(path); in) {
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            KvEntry e{"", "step", line.substr(0, line.find(',')), 0, path.string()};
            if (kv_uint(e) <= last_step) keep.push_back(line);
        }
    }
    std::ofstream out(path, std::ios::trunc);
    for (const auto& l : keep) out << l << '\n';
}

}  // namespace

void load_parameters(ParamStore& params, const fs::path& checkpoint) {
    if (!fs::exists(checkpoint)) throw IoError("checkpoint '" + checkpoint.string() + "' does not exist");
    const auto state = state_path_for(checkpoint);
    if (fs::exists(state)) read_state(state, params, nullptr);
    else restore(params, read_checkpoint(checkpoint));
}

TrainSummary train(const TrainConfig& input_config, const TrainOptions& options) {
    TrainConfig config = input_config;
    const auto index = read_index(options.index_path);
    const BatchSampler sampler(index, options.specs, config.sampler, config.batch, config.seed, config.domains);
    if (config.domains.empty()) config.domains = sampler.domains();
    config.model.domain_count = config.domains.size();
    config.model.max_timestep = config.diffusion_steps;
    config.validate();

    std::vector<std::size_t> row_of(kAllDomains.size(), 0);
    for (std::size_t i = 0; i < config.domains.size(); ++i) row_of[static_cast<std::size_t>(config.domains[i])] = i;

    const auto images = load_training_images(options.index_path, index, config.image, config.domains);
    const auto schedule = cosine_schedule(config.diffusion_steps);
    Denoiser model(config.model, config.seed);
    AdamW optimizer(model.params(), config.optimizer);
    const PromptEmbedder embedder(kPromptTokens, config.model.context_width);

    fs::create_directories(options.out_dir);
    write_manifest(options.out_dir / "model.cfg", config);
    const auto loss_path = options.out_dir / "loss.csv";
    const auto batch_path = options.out_dir / "batches.csv";

    TrainSummary summary;
    std::uint64_t start = 0;
    if (options.resume) {
        start = step_of_checkpoint(*options.resume);
        const auto state = state_path_for(*options.resume);
        if (!fs::exists(*options.resume)) throw IoError("checkpoint '" + options.resume->string() + "' does not exist");
        if (!fs::exists(state))
            throw IoError("exact training state '" + state.string() + "' is missing; cannot resume bit-identically");
        const auto seed = read_state(state, model.params(), &optimizer.state());
        if (seed != config.seed)
            throw ConfigError("checkpoint was trained with seed " + std::to_string(seed) + ", config has " +
                              std::to_string(config.seed));
        if (optimizer.state().step != start)
            throw IoError("state '" + state.string() + "' is at step " + std::to_string(optimizer.state().step));
    }
    truncate_trace(loss_path, start, "step,loss");
    truncate_trace(batch_path, start, "step,domains,records");
    std::ofstream loss_out(loss_path, std::ios::app);
    std::ofstream batch_out(batch_path, std::ios::app);
    loss_out.precision(17);

    auto save = [&](std::uint64_t step) {
        const auto path = options.out_dir / ("ckpt_" + std::to_string(step) + ".olck");
        write_checkpoint(path, snapshot(model.params()));
        write_state(state_path_for(path), model.params(), optimizer.state(), config.seed);
        summary.final_checkpoint = path;
    };

    const EpsilonModel eps = [&](const Tensor& xt, const std::vector<std::size_t>& t, const Tensor& ctx,
                                 const std::vector<std::size_t>& d) { return model.denoise(xt, t, ctx, d); };
    const auto per = 2 * config.image.height * config.image.width;
    summary.first_step = start + 1;
    for (std::uint64_t step = start + 1; step <= config.steps; ++step) {
        const auto plan = sampler.plan(step);
        std::vector<Real> x0;
        x0.reserve(config.batch * per);
        std::vector<std::string> prompts;
        DiffusionBatch batch;
        for (const auto& item : plan) {
            x0.insert(x0.end(), images[item.record].begin(), images[item.record].end());
            prompts.push_back(item.prompt);
            batch.domains.push_back(row_of[static_cast<std::size_t>(item.domain)]);
        }
        batch.x0 = Tensor::from({plan.size(), 2, config.image.height, config.image.width}, std::move(x0));
        batch.context = embedder.embed_batch(prompts);

        auto rng = make_rng(stream_key(config.seed, "loss", step));
        LossResult result;
        try {
            result = diffusion_loss(batch, eps, schedule, rng);
            optimizer.zero_grad();
            result.loss.backward();
            if (config.clip_norm > 0.0) clip_grad_norm(model.params(), config.clip_norm);
            optimizer.step();
        } catch (const Error& e) {
            if (!dynamic_cast<const TrainingError*>(&e) && !dynamic_cast<const NumericError*>(&e)) throw;
            std::string records;
            for (const auto& item : plan) records += (records.empty() ? "" : " ") + index.records[item.record].path;
            throw TrainingError("step " + std::to_string(step) + ": " + e.what() + "; batch: " + records);
        }
        const double loss = result.loss.item();
        summary.losses.push_back(loss);
        summary.last_step = step;

        loss_out << step << ',' << loss << '\n';
        batch_out << step << ',';
        for (std::size_t i = 0; i < plan.size(); ++i) batch_out << (i ? ";" : "") << domain_name(plan[i].domain);
        batch_out << ',';
        for (std::size_t i = 0; i < plan.size(); ++i) batch_out << (i ? ";" : "") << plan[i].record;
        batch_out << '\n';
        if (options.on_step) options.on_step(step, loss);
        if (step % config.checkpoint_every == 0) {
            loss_out.flush();
            batch_out.flush();
            save(step);
        }
    }
    if (summary.last_step == 0) summary.last_step = start;
    if (summary.final_checkpoint.empty() || summary.last_step % config.checkpoint_every != 0) save(summary.last_step);
    return summary;
}

}  // namespace rangediff
