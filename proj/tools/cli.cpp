#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "rangediff/conditioning.hpp"
#include "rangediff/diffusion.hpp"
#include "rangediff/errors.hpp"
#include "rangediff/metrics.hpp"
#include "rangediff/ops.hpp"

namespace rangediff::cli {

namespace fs = std::filesystem;

RunConfig RunConfig::toy() {
    RunConfig c;
    c.toy_scans = 40;
    c.data_root = "rangediff_toy/data";
    c.train_out = "rangediff_toy/run";
    c.sample_out = "rangediff_toy/samples";
    c.ablate_out = "rangediff_toy/ablation";
    c.train.domains = {DomainId::Vehicle, DomainId::Drone};
    c.train.image = SensorConfig{16, 64};
    c.train.model.channels = {8, 16};
    c.train.model.time_width = 32;
    c.train.model.context_width = kEmbedWidth;
    c.train.model.key_width = 16;
    c.train.diffusion_steps = 64;
    c.train.batch = 8;
    c.train.optimizer.learning_rate = 2e-3;
    c.train.optimizer.weight_decay = 0.0;
    c.train.steps = 1500;
    c.sample_steps = 64;
    c.sample_count = 4;
    c.ablate_steps = 300;
    c.ablate_samples = 8;
    c.ablate_sample_steps = 32;
    return c;
}

namespace {

fs::path resolve(const fs::path& base, const std::string& value) {
    fs::path p(value);
    return p.is_absolute() || base.empty() ? p : base / p;
}

}  // namespace

void RunConfig::load(const fs::path& file) {
    const auto entries = read_kv_file(file);
    const auto base = file.parent_path();
    for (const auto& e : entries) {
        if (train.apply(e)) continue;
        const auto& s = e.section;
        const auto& k = e.key;
        bool known = true;
        if (s == "data") {
            if (k == "base_index") base_index = resolve(base, e.value);
            else if (k == "root") data_root = resolve(base, e.value);
            else if (k == "corruptions") corruption_file = resolve(base, e.value);
            else if (k == "ground_threshold") ground_threshold = kv_double(e);
            else if (k == "seed") data_seed = kv_uint(e);
            else if (k == "toy_scans") toy_scans = kv_uint(e);
            else known = false;
        } else if (s == "train" && k == "out") {
            train_out = resolve(base, e.value);
        } else if (s == "sample") {
            if (k == "steps") sample_steps = kv_uint(e);
            else if (k == "count") sample_count = kv_uint(e);
            else if (k == "seed") sample_seed = kv_uint(e);
            else if (k == "out") sample_out = resolve(base, e.value);
            else if (k == "min_range") sample_min_range = kv_double(e);
            else if (k == "batch") sample_batch = kv_uint(e);
            else if (k == "clip_denoised") sample_clip_denoised = kv_bool(e);
            else known = false;
        } else if (s == "ablate") {
            if (k == "rows") ablate_rows = kv_list(e);
            else if (k == "steps") ablate_steps = kv_uint(e);
            else if (k == "samples") ablate_samples = kv_uint(e);
            else if (k == "sample_steps") ablate_sample_steps = kv_uint(e);
            else if (k == "out") ablate_out = resolve(base, e.value);
            else known = false;
        } else if (s.empty() && k == "threads") {
            threads = static_cast<unsigned>(kv_uint(e));
        } else {
            known = false;
        }
        if (!known) throw ConfigError(e.where() + ": unknown key '" + (s.empty() ? k : s + "." + k) + "'");
    }
}

const std::vector<std::string>& known_ablation_rows() {
    static const std::vector<std::string> rows = {"single-domain", "homogeneous", "cdts", "cdts+cdfm", "cdts+dafs", "full"};
    return rows;
}

void RunConfig::validate() const {
    train.validate();
    if (sample_count == 0) throw ConfigError("sample.count must be at least 1");
    if (sample_batch == 0) throw ConfigError("sample.batch must be at least 1");
    if (!(sample_min_range >= 0.0)) throw ConfigError("sample.min_range must be non-negative");
    for (const auto& r : ablate_rows)
        if (std::find(known_ablation_rows().begin(), known_ablation_rows().end(), r) == known_ablation_rows().end())
            throw ConfigError("unknown ablation row '" + r + "'");
    if (threads == 0) throw ConfigError("threads must be at least 1");
}

std::vector<double> mean_normalized_range(const Tensor& x) {
    const auto b = x.dim(0);
    const auto per = x.numel() / b;
    const auto plane = per / 2;
    std::vector<double> out(b, 0.0);
    for (std::size_t i = 0; i < b; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < plane; ++k) s += x.data()[i * per + k];
        out[i] = s / static_cast<double>(plane);
    }
    return out;
}

void write_range_pgm(const fs::path& path, const RangeImage& image) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << "P5\n" << image.config.width << ' ' << image.config.height << "\n255\n";
    for (std::size_t k = 0; k < image.range.size(); ++k) {
        unsigned char v = 0;
        if (image.valid[k]) {
            const double x = normalize_range(image.range[k], image.config.r_max);
            v = static_cast<unsigned char>(std::lround(255.0 * std::clamp(0.5 - 0.5 * x, 0.0, 1.0) * 0.9 + 25.0));
        }
        out.put(static_cast<char>(v));
    }
}

namespace {

struct Options {
    std::optional<std::string> config;
    bool toy = false;
    unsigned threads = 0;
};

RunConfig make_config(const Options& opt) {
    RunConfig c = opt.toy ? RunConfig::toy() : RunConfig{};
    if (opt.config) {
        if (!fs::exists(*opt.config)) throw IoError("config file '" + *opt.config + "' does not exist");
        c.load(*opt.config);
    }
    if (opt.threads > 0) c.threads = opt.threads;
    return c;
}

std::vector<DomainSpec> domain_specs(const RunConfig& c) {
    auto specs = default_domain_specs();
    if (c.corruption_file) {
        for (const auto& cs : read_corruption_file(*c.corruption_file))
            for (auto& s : specs)
                if (s.corruption && s.corruption->kind == cs.kind) s.corruption = cs;
    }
    return specs;
}

BuildSummary build_data(const RunConfig& c) {
    fs::path base_index = c.base_index;
    if (c.toy_scans > 0) {
        base_index = write_toy_base_corpus(c.data_root / "base", c.toy_scans, default_sensor(), c.data_seed);
    } else if (base_index.empty()) {
        throw ConfigError("data.base_index is not set (or use --toy)");
    }
    if (!fs::exists(base_index)) throw IoError("base corpus index '" + base_index.string() + "' does not exist");
    BuildOptions bo;
    bo.seed = c.data_seed;
    bo.threads = c.threads;
    bo.ground_threshold = c.ground_threshold;
    return build_dataset(base_index, domain_specs(c), c.data_root, bo);
}

fs::path ensure_dataset(const RunConfig& c) {
    const auto index = c.data_root / "index.tsv";
    if (!fs::exists(index)) {
        if (c.toy_scans == 0) throw IoError("dataset index '" + index.string() + "' does not exist; run build-data first");
        std::cout << "building toy corpus under " << c.data_root.string() << '\n';
        build_data(c);
    }
    return index;
}

}  // namespace

Generated generate(const SampleRequest& req) {
    const auto manifest_path = req.checkpoint.parent_path() / "model.cfg";
    if (!fs::exists(req.checkpoint)) throw IoError("checkpoint '" + req.checkpoint.string() + "' does not exist");
    if (!fs::exists(manifest_path)) throw IoError("model manifest '" + manifest_path.string() + "' does not exist");
    const auto manifest = read_manifest(manifest_path);
    const auto it = std::find(manifest.domains.begin(), manifest.domains.end(), req.domain);
    if (it == manifest.domains.end()) {
        std::string trained;
        for (auto d : manifest.domains) trained += (trained.empty() ? "" : ", ") + std::string(domain_name(d));
        throw ConfigError("domain " + std::string(domain_name(req.domain)) + " was not trained by this model (trained: " +
                          trained + ")");
    }
    const std::size_t row = static_cast<std::size_t>(it - manifest.domains.begin());

    Denoiser model(manifest.model, manifest.seed);
    load_parameters(model.params(), req.checkpoint);
    const auto schedule = cosine_schedule(manifest.diffusion_steps);
    const PromptEmbedder embedder(kPromptTokens, manifest.model.context_width);
    Rng unused(0);
    const auto prompt = sample_prompt(find_spec(default_domain_specs(), req.domain), PromptMode::Infer, unused);
    const EpsilonModel eps = [&](const Tensor& x, const std::vector<std::size_t>& t, const Tensor& ctx,
                                 const std::vector<std::size_t>& d) { return model.denoise(x, t, ctx, d); };

    const auto h = manifest.image.height, w = manifest.image.width;
    std::vector<Real> all;
    all.reserve(req.count * 2 * h * w);
    for (std::size_t start = 0; start < req.count; start += req.batch) {
        const auto n = std::min(req.batch, req.count - start);
        std::vector<std::uint64_t> seeds(n);
        for (std::size_t i = 0; i < n; ++i)
            seeds[i] = stream_key(req.seed, "sample/" + std::string(domain_name(req.domain)), start + i);
        const auto ctx = embedder.embed_batch(std::vector<std::string>(n, prompt));
        const auto x = ddpm_sample(eps, schedule, req.steps, ctx, std::vector<std::size_t>(n, row), h, w, seeds,
                                   req.clip_denoised);
        all.insert(all.end(), x.data().begin(), x.data().end());
    }
    return {Tensor::from({req.count, 2, h, w}, std::move(all)), manifest, prompt};
}

namespace {

std::vector<RangeImage> to_images(const Tensor& x, const SensorConfig& cfg, double min_range) {
    std::vector<RangeImage> out;
    const auto per = 2 * cfg.height * cfg.width;
    for (std::size_t i = 0; i < x.dim(0); ++i) {
        std::vector<Real> one(x.data().begin() + static_cast<std::ptrdiff_t>(i * per),
                              x.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
        out.push_back(denormalize(Tensor::from({2, cfg.height, cfg.width}, std::move(one)), cfg, min_range));
    }
    return out;
}

std::vector<RangeImage> read_olri_dir(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IoError("'" + dir.string() + "' is not a directory");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".olri") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw IoError("'" + dir.string() + "' contains no .olri files");
    std::vector<RangeImage> out;
    for (const auto& f : files) out.push_back(read_olri(f));
    return out;
}

// Validation scans of one domain, re-projected to the model's sensor.
std::vector<RangeImage> reference_set(const fs::path& index_path, DomainId domain, const SensorConfig& cfg) {
    const auto index = read_index(index_path);
    std::vector<RangeImage> out;
    for (const auto& r : index.records) {
        if (r.domain != domain || r.split != Split::Val) continue;
        auto img = read_olri(index_path.parent_path() / r.path);
        if (!(img.config == cfg)) img = rasterize(unproject(img), cfg).image;
        out.push_back(std::move(img));
    }
    if (out.empty()) throw ConfigError("no validation scans for domain " + std::string(domain_name(domain)));
    return out;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << text;
}

int cmd_build_data(const Options& opt, std::optional<std::uint64_t> seed) {
    auto c = make_config(opt);
    if (seed) c.data_seed = *seed;
    c.validate();
    const auto summary = build_data(c);
    std::cout << summary.report();
    std::cout << "index = " << (c.data_root / "index.tsv").string() << '\n';
    return 0;
}

int cmd_train(const Options& opt, const std::optional<std::string>& sampler, const std::optional<std::string>& resume,
              std::optional<std::size_t> steps, const std::optional<std::string>& out) {
    auto c = make_config(opt);
    if (sampler) {
        const auto s = parse_sampler(*sampler);
        if (!s) throw ConfigError("--sampler must be 'cdts' or 'homogeneous'");
        c.train.sampler = *s;
    }
    if (steps) c.train.steps = *steps;
    if (out) c.train_out = *out;
    c.validate();
    TrainOptions to;
    to.index_path = ensure_dataset(c);
    to.out_dir = c.train_out;
    to.specs = domain_specs(c);
    if (resume) to.resume = fs::path(*resume);
    const auto every = std::max<std::size_t>(1, c.train.steps / 20);
    to.on_step = [&](std::uint64_t step, double loss) {
        if (step % every == 0 || step == c.train.steps)
            std::cout << "step " << step << " loss " << std::setprecision(6) << loss << '\n';
    };
    const auto summary = train(c.train, to);
    std::cout << "trained steps " << summary.first_step << ".." << summary.last_step << '\n'
              << "loss trace = " << (c.train_out / "loss.csv").string() << '\n'
              << "checkpoint = " << summary.final_checkpoint.string() << '\n';
    return 0;
}

int cmd_sample(const Options& opt, const std::string& checkpoint, const std::string& domain,
               std::optional<std::size_t> count, std::optional<std::size_t> steps, std::optional<std::uint64_t> seed,
               const std::optional<std::string>& out, bool points, bool pgm) {
    auto c = make_config(opt);
    if (count) c.sample_count = *count;
    if (steps) c.sample_steps = *steps;
    if (seed) c.sample_seed = *seed;
    if (out) c.sample_out = *out;
    c.validate();
    const auto d = parse_domain(domain);
    if (!d) throw ConfigError("unknown domain '" + domain + "'; known domains: " + known_domains_list());
    SampleRequest req{checkpoint, *d, c.sample_count, c.sample_steps, c.sample_seed, c.sample_batch,
                      c.sample_clip_denoised};
    const auto gen = generate(req);
    const auto images = to_images(gen.x, gen.manifest.image, c.sample_min_range);
    fs::create_directories(c.sample_out);
    for (std::size_t i = 0; i < images.size(); ++i) {
        const std::string stem = std::string(domain_name(*d)) + "_seed" + std::to_string(c.sample_seed) + "_" + std::to_string(i);
        write_olri(c.sample_out / (stem + ".olri"), images[i]);
        if (points) write_point_text(c.sample_out / (stem + ".txt"), unproject(images[i]));
        if (pgm) write_range_pgm(c.sample_out / (stem + ".pgm"), images[i]);
    }
    std::cout << "wrote " << images.size() << " samples of " << domain_name(*d) << " to " << c.sample_out.string()
              << " (" << c.sample_steps << " steps)\n"
              << "prompt = " << gen.prompt << '\n';
    return 0;
}

int cmd_eval(const std::string& generated, const std::string& reference, const std::optional<std::string>& out) {
    const auto gen = read_olri_dir(generated);
    const auto ref = read_olri_dir(reference);
    const auto report = evaluate_sets(gen, ref);
    std::cout << report.text();
    const fs::path dir = out ? fs::path(*out) : fs::path(generated);
    fs::create_directories(dir);
    write_text(dir / "report.txt", report.text());
    write_text(dir / "report.csv", report.csv());
    return 0;
}

struct RowSetup {
    SamplerKind sampler;
    bool cdfm;
    bool dafs;
};

RowSetup row_setup(const std::string& row) {
    if (row == "single-domain" || row == "cdts") return {SamplerKind::Cdts, false, false};
    if (row == "homogeneous") return {SamplerKind::Homogeneous, false, false};
    if (row == "cdts+cdfm") return {SamplerKind::Cdts, true, false};
    if (row == "cdts+dafs") return {SamplerKind::Cdts, false, true};
    if (row == "full") return {SamplerKind::Cdts, true, true};
    throw ConfigError("unknown ablation row '" + row + "'");
}

std::string row_dir(const std::string& row) {
    std::string s = row;
    std::replace(s.begin(), s.end(), '+', '_');
    return s;
}

int cmd_ablate(const Options& opt, std::optional<std::size_t> steps, const std::optional<std::string>& out) {
    auto c = make_config(opt);
    if (steps) c.ablate_steps = *steps;
    if (out) c.ablate_out = *out;
    c.validate();
    const auto index_path = ensure_dataset(c);
    auto domains = c.train.domains;
    if (domains.empty())
        for (const auto& [d, n] : read_index(index_path).counts(Split::Train)) domains.push_back(d);
    if (c.ablate_sample_steps > c.train.diffusion_steps)
        throw ConfigError("ablate.sample_steps exceeds diffusion.T");

    fs::create_directories(c.ablate_out);
    std::ostringstream table;
    table << "row,domain,sampler,cdfm,dafs,final_loss,jsd,mmd,mmd_x1e4\n";
    table.precision(10);
    std::ostringstream text;
    for (const auto& row : c.ablate_rows) {
        const auto setup = row_setup(row);
        // single-domain trains one model per domain; every other row trains one pooled model.
        std::vector<std::vector<DomainId>> runs;
        if (row == "single-domain") for (auto d : domains) runs.push_back({d});
        else runs.push_back(domains);
        for (const auto& run_domains : runs) {
            TrainConfig tc = c.train;
            tc.sampler = setup.sampler;
            tc.model.use_cdfm = setup.cdfm;
            tc.model.use_dafs = setup.dafs;
            tc.domains = run_domains;
            tc.steps = c.ablate_steps;
            fs::path dir = c.ablate_out / row_dir(row);
            if (runs.size() > 1) dir /= domain_name(run_domains.front());
            TrainOptions to;
            to.index_path = index_path;
            to.out_dir = dir;
            to.specs = domain_specs(c);
            std::cout << "[" << row << "] training " << dir.string() << '\n';
            const auto summary = train(tc, to);
            const auto tail = std::min<std::size_t>(summary.losses.size(), 50);
            double final_loss = 0.0;
            for (std::size_t i = summary.losses.size() - tail; i < summary.losses.size(); ++i) final_loss += summary.losses[i];
            final_loss /= static_cast<double>(std::max<std::size_t>(tail, 1));

            for (auto d : run_domains) {
                SampleRequest req{summary.final_checkpoint, d, c.ablate_samples, c.ablate_sample_steps, c.sample_seed,
                                  c.sample_batch, c.sample_clip_denoised};
                const auto sampled = generate(req);
                const auto gen = to_images(sampled.x, sampled.manifest.image, c.sample_min_range);
                const auto ref = reference_set(index_path, d, sampled.manifest.image);
                const auto report = evaluate_sets(gen, ref);
                const auto rdir = dir / domain_name(d);
                fs::create_directories(rdir);
                write_text(rdir / "report.txt", report.text());
                write_text(rdir / "report.csv", report.csv());
                table << row << ',' << domain_name(d) << ',' << sampler_name(setup.sampler) << ',' << setup.cdfm << ','
                      << setup.dafs << ',' << final_loss << ',' << report.jsd << ',' << report.mmd.mmd2 << ','
                      << report.mmd.scaled() << '\n';
                text << "[" << row << " / " << domain_name(d) << "]\nfinal_loss = " << final_loss << '\n'
                     << report.text() << '\n';
            }
        }
    }
    write_text(c.ablate_out / "ablation.csv", table.str());
    write_text(c.ablate_out / "ablation.txt", text.str());
    std::cout << table.str();
    return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"Multi-domain LiDAR range-image diffusion toolkit", "rangediff"};
    app.require_subcommand(1);
    Options opt;
    app.add_flag("--toy", opt.toy, "Use the built-in synthetic two-domain preset");
    app.add_option("--threads", opt.threads, "Cap on worker threads")->check(CLI::PositiveNumber);
    app.add_option("--config", opt.config, "Run configuration file (key = value)");

    auto* build = app.add_subcommand("build-data", "Build the multi-domain corpus and its index")->fallthrough();
    std::optional<std::uint64_t> build_seed;
    build->add_option("--seed", build_seed, "Corpus seed");

    auto* tr = app.add_subcommand("train", "Train the denoiser")->fallthrough();
    std::optional<std::string> sampler, resume, train_out;
    std::optional<std::size_t> train_steps;
    tr->add_option("--sampler", sampler, "cdts (default) or homogeneous");
    tr->add_option("--resume", resume, "Continue from a checkpoint written by an earlier run");
    tr->add_option("--steps", train_steps, "Total training steps");
    tr->add_option("--out", train_out, "Output directory");

    auto* sm = app.add_subcommand("sample", "Generate range images for one domain")->fallthrough();
    std::string checkpoint, domain;
    std::optional<std::size_t> count, sample_steps;
    std::optional<std::uint64_t> sample_seed;
    std::optional<std::string> sample_out;
    bool points = false, pgm = false;
    sm->add_option("checkpoint", checkpoint, "Checkpoint (.olck) with model.cfg beside it")->required();
    sm->add_option("--domain", domain, "Domain id")->required();
    sm->add_option("--count", count, "Number of scans");
    sm->add_option("--steps", sample_steps, "Sampling steps (default 256)");
    sm->add_option("--seed", sample_seed, "Sampling seed");
    sm->add_option("--out", sample_out, "Output directory");
    sm->add_flag("--points", points, "Also write point-cloud text files");
    sm->add_flag("--pgm", pgm, "Also write grayscale renders of the range channel");

    auto* ev = app.add_subcommand("eval", "Compare a generated set against a reference set")->fallthrough();
    std::string generated, reference;
    std::optional<std::string> eval_out;
    ev->add_option("generated", generated, "Directory of generated .olri files")->required();
    ev->add_option("reference", reference, "Directory of reference .olri files")->required();
    ev->add_option("--out", eval_out, "Report directory (default: the generated directory)");

    auto* ab = app.add_subcommand("ablate", "Run the sampler/module ablation rows")->fallthrough();
    std::optional<std::size_t> ablate_steps;
    std::optional<std::string> ablate_out;
    ab->add_option("--steps", ablate_steps, "Training steps per row");
    ab->add_option("--out", ablate_out, "Output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*build) return cmd_build_data(opt, build_seed);
        if (*tr) return cmd_train(opt, sampler, resume, train_steps, train_out);
        if (*sm) return cmd_sample(opt, checkpoint, domain, count, sample_steps, sample_seed, sample_out, points, pgm);
        if (*ev) return cmd_eval(generated, reference, eval_out);
        if (*ab) return cmd_ablate(opt, ablate_steps, ablate_out);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const ArgumentError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const MetricError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const DegenerateInputError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return 2;
    }
    return 1;
}

}  // namespace rangediff::cli
