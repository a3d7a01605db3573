#include "rangediff/forge.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <thread>

#include "rangediff/config.hpp"
#include "rangediff/errors.hpp"

namespace rangediff {

namespace fs = std::filesystem;

namespace {

constexpr std::array<std::string_view, 8> kDomainNames = {"Vehicle", "Snow",   "Fog",   "Rain",
                                                           "WetGround", "Beam32", "Drone", "Quadruped"};
constexpr std::array<std::string_view, 4> kCorruptionNames = {"fog", "snow", "rain", "wet_ground"};

std::optional<CorruptionKind> weather_of(DomainId id) {
    switch (id) {
        case DomainId::Snow: return CorruptionKind::Snow;
        case DomainId::Fog: return CorruptionKind::Fog;
        case DomainId::Rain: return CorruptionKind::Rain;
        case DomainId::WetGround: return CorruptionKind::WetGround;
        default: return std::nullopt;
    }
}

}  // namespace

std::string_view domain_name(DomainId id) { return kDomainNames[static_cast<std::size_t>(id)]; }

std::optional<DomainId> parse_domain(std::string_view name) {
    for (std::size_t i = 0; i < kDomainNames.size(); ++i)
        if (kDomainNames[i] == name) return static_cast<DomainId>(i);
    return std::nullopt;
}

std::string known_domains_list() {
    std::string out;
    for (auto n : kDomainNames) {
        if (!out.empty()) out += ", ";
        out += n;
    }
    return out;
}

std::string_view corruption_name(CorruptionKind kind) { return kCorruptionNames[static_cast<std::size_t>(kind)]; }

std::optional<CorruptionKind> parse_corruption(std::string_view name) {
    for (std::size_t i = 0; i < kCorruptionNames.size(); ++i)
        if (kCorruptionNames[i] == name) return static_cast<CorruptionKind>(i);
    return std::nullopt;
}

void CorruptionSpec::validate() const {
    const std::string what = "corruption '" + std::string(corruption_name(kind)) + "'";
    if (levels.empty()) throw ConfigError(what + " has no severity levels");
    for (std::size_t i = 0; i < levels.size(); ++i) {
        const auto& l = levels[i];
        const std::string at = what + " level " + std::to_string(i);
        if (!(l.dropout_slope >= 0.0 && l.dropout_slope <= 1.0)) throw ConfigError(at + ": dropout_slope must be in [0,1]");
        if (!(l.attenuation >= 0.0 && l.attenuation <= 1.0)) throw ConfigError(at + ": attenuation must be in [0,1]");
        if (l.scatter_count > 0 && !(l.scatter_range > 0.5)) throw ConfigError(at + ": scatter_range must exceed 0.5 m");
    }
}

void DomainSpec::validate() const {
    if (prompt_pool.empty()) throw ConfigError("domain " + std::string(domain_name(id)) + " has an empty prompt pool");
    if (corruption) corruption->validate();
    sensor.validate();
}

CorruptionSpec default_corruption(CorruptionKind kind) {
    CorruptionSpec spec{kind, {}};
    switch (kind) {
        case CorruptionKind::Fog:
            spec.levels = {{0.004, 0, 0.0, 0.85}, {0.008, 0, 0.0, 0.70}, {0.012, 0, 0.0, 0.55}};
            break;
        case CorruptionKind::Snow:
            spec.levels = {{0.003, 200, 10.0, 0.90}, {0.006, 500, 10.0, 0.80}, {0.009, 1000, 10.0, 0.70}};
            break;
        case CorruptionKind::Rain:
            spec.levels = {{0.002, 0, 0.0, 0.90}, {0.004, 0, 0.0, 0.80}, {0.006, 0, 0.0, 0.70}};
            break;
        case CorruptionKind::WetGround:
            spec.levels = {{0.008, 0, 0.0, 0.70}, {0.015, 0, 0.0, 0.50}, {0.025, 0, 0.0, 0.30}};
            break;
    }
    return spec;
}

std::vector<DomainSpec> default_domain_specs() {
    const auto sensor = default_sensor();
    std::vector<DomainSpec> specs = {
        {DomainId::Vehicle,
         {"a driving scene captured by a vehicle-mounted lidar", "a clear-weather street scene from a car",
          "an urban road scene in clear weather"},
         std::nullopt, sensor},
        {DomainId::Snow,
         {"a driving scene with falling snow and low visibility", "a snowy road scene with scattered snowflake returns",
          "a lidar scan in heavy snowfall"},
         default_corruption(CorruptionKind::Snow), sensor},
        {DomainId::Fog,
         {"a driving scene in dense fog", "a foggy road scene with reduced visibility", "a lidar scan in misty conditions"},
         default_corruption(CorruptionKind::Fog), sensor},
        {DomainId::Rain,
         {"a driving scene in heavy rain", "a rainy street scene with wet air", "a lidar scan during rainfall"},
         default_corruption(CorruptionKind::Rain), sensor},
        {DomainId::WetGround,
         {"a driving scene on a wet road surface", "a street with puddles after rain", "a lidar scan over wet ground"},
         default_corruption(CorruptionKind::WetGround), sensor},
        {DomainId::Beam32,
         {"a driving scene from a 32-beam lidar", "a sparse low-resolution lidar scan",
          "a road scene captured with fewer laser beams"},
         std::nullopt, beam32_sensor()},
        {DomainId::Drone,
         {"an outdoor scene from a drone viewpoint", "an aerial lidar scan from a flying platform",
          "a top-down view captured by a drone"},
         std::nullopt, sensor},
        {DomainId::Quadruped,
         {"an outdoor scene from a quadruped robot", "a low viewpoint lidar scan from a legged robot",
          "a ground-level scene captured by a robot dog"},
         std::nullopt, sensor},
    };
    return specs;
}

const DomainSpec& find_spec(const std::vector<DomainSpec>& specs, DomainId id) {
    for (const auto& s : specs)
        if (s.id == id) return s;
    throw ConfigError("no spec for domain " + std::string(domain_name(id)));
}

std::vector<CorruptionSpec> read_corruption_file(const fs::path& path) {
    std::map<CorruptionKind, std::map<std::size_t, SeverityLevel>> table;
    for (const auto& e : read_kv_file(path)) {
        const auto dot = e.section.rfind('.');
        if (e.section.empty() || dot == std::string::npos)
            throw ConfigError(e.where() + ": expected a [<kind>.<level>] section");
        const auto kind = parse_corruption(e.section.substr(0, dot));
        if (!kind) throw ConfigError(e.where() + ": unknown corruption kind '" + e.section.substr(0, dot) + "'");
        KvEntry level_entry = e;
        level_entry.value = e.section.substr(dot + 1);
        auto& level = table[*kind][static_cast<std::size_t>(kv_uint(level_entry))];
        if (e.key == "dropout_slope") level.dropout_slope = kv_double(e);
        else if (e.key == "scatter_count") level.scatter_count = static_cast<std::size_t>(kv_uint(e));
        else if (e.key == "scatter_range") level.scatter_range = kv_double(e);
        else if (e.key == "attenuation") level.attenuation = kv_double(e);
        else throw ConfigError(e.where() + ": unknown key");
    }
    std::vector<CorruptionSpec> out;
    for (auto& [kind, levels] : table) {
        CorruptionSpec spec{kind, {}};
        std::size_t expect = 0;
        for (auto& [idx, level] : levels) {
            if (idx != expect++)
                throw ConfigError(path.string() + ": severity levels of '" + std::string(corruption_name(kind)) +
                                  "' must be numbered 0..n-1");
            spec.levels.push_back(level);
        }
        spec.validate();
        out.push_back(std::move(spec));
    }
    return out;
}

void write_corruption_file(const fs::path& path, const std::vector<CorruptionSpec>& specs) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.precision(17);
    for (const auto& spec : specs)
        for (std::size_t i = 0; i < spec.levels.size(); ++i) {
            const auto& l = spec.levels[i];
            out << '[' << corruption_name(spec.kind) << '.' << i << "]\n"
                << "dropout_slope = " << l.dropout_slope << '\n'
                << "scatter_count = " << l.scatter_count << '\n'
                << "scatter_range = " << l.scatter_range << '\n'
                << "attenuation = " << l.attenuation << "\n\n";
        }
}

RangeImage reduce_beams(const RangeImage& image) {
    const auto& cfg = image.config;
    if (cfg.height % 2 != 0)
        throw ConfigError("reduce_beams needs an even row count, got " + std::to_string(cfg.height));
    SensorConfig out_cfg = cfg;
    out_cfg.height = cfg.height / 2;
    auto out = RangeImage::empty(out_cfg);
    const auto w = cfg.width;
    for (std::size_t j = 0; j < out_cfg.height; ++j) {
        const auto src = 2 * j * w;
        const auto dst = j * w;
        std::copy_n(image.range.begin() + src, w, out.range.begin() + dst);
        std::copy_n(image.intensity.begin() + src, w, out.intensity.begin() + dst);
        std::copy_n(image.valid.begin() + src, w, out.valid.begin() + dst);
    }
    return out;
}

std::vector<std::uint8_t> detect_ground(const RangeImage& image, double z_threshold) {
    const auto& cfg = image.config;
    std::vector<std::uint8_t> mask(cfg.height * cfg.width, 0);
    for (std::size_t row = 0; row < cfg.height; ++row)
        for (std::size_t col = 0; col < cfg.width; ++col) {
            const auto k = image.index(row, col);
            if (!image.valid[k]) continue;
            const double z = pixel_direction(row, col, cfg)[2] * static_cast<double>(image.range[k]);
            mask[k] = z < z_threshold ? 1 : 0;
        }
    return mask;
}

RangeImage corrupt(const RangeImage& image, const CorruptionSpec& spec, std::size_t level, std::uint64_t seed,
                   double ground_threshold) {
    spec.validate();
    if (level >= spec.levels.size())
        throw ArgumentError("severity level " + std::to_string(level) + " out of range for '" +
                            std::string(corruption_name(spec.kind)) + "'");
    const auto& sev = spec.levels[level];
    auto rng = make_rng(stream_key(seed, corruption_name(spec.kind), level));
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    RangeImage out = image;
    std::vector<std::uint8_t> affected;
    if (spec.kind == CorruptionKind::WetGround) affected = detect_ground(image, ground_threshold);

    const auto n = out.range.size();
    for (std::size_t k = 0; k < n; ++k) {
        if (!out.valid[k]) continue;
        if (!affected.empty() && !affected[k]) continue;
        const double p = std::min(1.0, sev.dropout_slope * static_cast<double>(out.range[k]));
        if (unit(rng) < p) {
            out.valid[k] = 0;
            out.range[k] = 0.0f;
            out.intensity[k] = 0.0f;
        } else {
            out.intensity[k] = static_cast<float>(std::clamp(out.intensity[k] * sev.attenuation, 0.0, 1.0));
        }
    }

    if (spec.kind == CorruptionKind::Snow && sev.scatter_count > 0) {
        const double hi = std::min(sev.scatter_range, image.config.r_max);
        std::uniform_int_distribution<std::size_t> pixel(0, n - 1);
        std::uniform_real_distribution<double> range(0.5, hi);
        std::uniform_real_distribution<double> glow(0.0, 0.2);
        for (std::size_t i = 0; i < sev.scatter_count; ++i) {
            const auto k = pixel(rng);
            const auto r = static_cast<float>(range(rng));
            const auto inten = static_cast<float>(glow(rng));
            if (!out.valid[k] || r < out.range[k]) {
                out.valid[k] = 1;
                out.range[k] = r;
                out.intensity[k] = inten;
            }
        }
    }
    return out;
}

std::string sample_prompt(const DomainSpec& spec, PromptMode mode, Rng& rng) {
    if (spec.prompt_pool.empty())
        throw ConfigError("domain " + std::string(domain_name(spec.id)) + " has an empty prompt pool");
    if (mode == PromptMode::Infer) return spec.prompt_pool.front();
    std::uniform_int_distribution<std::size_t> pick(0, spec.prompt_pool.size() - 1);
    return spec.prompt_pool[pick(rng)];
}

std::string_view split_name(Split split) { return split == Split::Train ? "train" : "val"; }

std::optional<Split> parse_split(std::string_view name) {
    if (name == "train") return Split::Train;
    if (name == "val") return Split::Val;
    return std::nullopt;
}

std::map<DomainId, std::size_t> DatasetIndex::counts(std::optional<Split> split) const {
    std::map<DomainId, std::size_t> out;
    for (const auto& r : records)
        if (!split || r.split == *split) ++out[r.domain];
    return out;
}

DatasetIndex read_index(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset index '" + path.string() + "'");
    DatasetIndex index;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::istringstream ss(line);
        std::string f;
        while (std::getline(ss, f, '\t')) fields.push_back(f);
        const std::string where = path.string() + ":" + std::to_string(lineno);
        if (fields.size() != 3) throw IoError(where + ": expected '<path>\\t<domain>\\t<split>'");
        const auto domain = parse_domain(fields[1]);
        if (!domain) throw IoError(where + ": unknown domain '" + fields[1] + "'");
        const auto split = parse_split(fields[2]);
        if (!split) throw IoError(where + ": unknown split '" + fields[2] + "'");
        index.records.push_back({fields[0], *domain, *split});
    }
    return index;
}

void write_index(const fs::path& path, const DatasetIndex& index) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    for (const auto& r : index.records)
        out << r.path << '\t' << domain_name(r.domain) << '\t' << split_name(r.split) << '\n';
    if (!out) throw IoError("failed writing '" + path.string() + "'");
}

std::string BuildSummary::report() const {
    std::ostringstream os;
    os << "records = " << index.records.size() << '\n';
    for (const auto& [d, n] : index.counts()) os << "count." << domain_name(d) << " = " << n << '\n';
    for (const auto& [kind, hist] : severity_histogram) {
        os << "severity." << kind << " =";
        for (auto c : hist) os << ' ' << c;
        os << '\n';
    }
    os << "dropped_returns = " << dropped_returns << '\n';
    os << "scatter_returns = " << scatter_returns << '\n';
    os << "failures = " << failures.size() << '\n';
    for (const auto& [p, why] : failures) os << "failed: " << p << ": " << why << '\n';
    return os.str();
}

namespace {

struct ScanOutput {
    std::vector<DatasetRecord> records;
    std::vector<std::pair<std::string, std::size_t>> severities;  // (kind, level)
    std::size_t dropped = 0;
    std::size_t scatter = 0;
    std::optional<std::string> failure;
};

std::string flatten_stem(const std::string& rel) {
    std::string stem = fs::path(rel).replace_extension().generic_string();
    std::replace(stem.begin(), stem.end(), '/', '_');
    return stem;
}

ScanOutput process_scan(const DatasetRecord& base, const fs::path& base_root, const std::vector<DomainSpec>& specs,
                        const fs::path& out_root, const BuildOptions& options) {
    ScanOutput result;
    RangeImage image;
    try {
        image = read_olri(base_root / base.path);
    } catch (const Error& e) {
        result.failure = e.what();
        return result;
    }
    const std::string stem = flatten_stem(base.path);
    auto emit = [&](DomainId id, const RangeImage& img) {
        const std::string rel = std::string(domain_name(id)) + "/" + stem + ".olri";
        write_olri(out_root / rel, img);
        result.records.push_back({rel, id, base.split});
    };
    auto wants = [&](DomainId id) {
        return std::any_of(specs.begin(), specs.end(), [id](const DomainSpec& s) { return s.id == id; });
    };

    if (base.domain == DomainId::Drone || base.domain == DomainId::Quadruped) {
        if (wants(base.domain)) emit(base.domain, image);
        return result;
    }
    if (base.domain != DomainId::Vehicle) {
        result.failure = "base corpus records must be Vehicle, Drone or Quadruped";
        return result;
    }
    for (const auto& spec : specs) {
        if (spec.id == DomainId::Vehicle) {
            emit(spec.id, image);
        } else if (spec.id == DomainId::Beam32) {
            emit(spec.id, reduce_beams(image));
        } else if (auto kind = weather_of(spec.id)) {
            if (!spec.corruption || spec.corruption->kind != *kind)
                throw ConfigError("domain " + std::string(domain_name(spec.id)) + " needs a '" +
                                  std::string(corruption_name(*kind)) + "' corruption spec");
            const auto key = stream_key(options.seed, base.path + "#" + std::string(domain_name(spec.id)));
            auto rng = make_rng(key);
            std::uniform_int_distribution<std::size_t> pick(0, spec.corruption->levels.size() - 1);
            const auto level = pick(rng);
            auto corrupted = corrupt(image, *spec.corruption, level, mix64(key), options.ground_threshold);
            for (std::size_t k = 0; k < image.valid.size(); ++k) {
                if (image.valid[k] && !corrupted.valid[k]) ++result.dropped;
                if (corrupted.valid[k] && (!image.valid[k] || corrupted.range[k] < image.range[k])) ++result.scatter;
            }
            result.severities.emplace_back(std::string(corruption_name(*kind)), level);
            emit(spec.id, corrupted);
        }
    }
    return result;
}

}  // namespace

BuildSummary build_dataset(const fs::path& base_index_path, const std::vector<DomainSpec>& specs,
                           const fs::path& out_root, const BuildOptions& options) {
    for (std::size_t i = 0; i < specs.size(); ++i) {
        specs[i].validate();
        for (std::size_t j = 0; j < i; ++j)
            if (specs[j].id == specs[i].id)
                throw ConfigError("duplicate domain " + std::string(domain_name(specs[i].id)) + " in spec list");
    }
    const auto base = read_index(base_index_path);
    const auto base_root = base_index_path.parent_path();
    fs::create_directories(out_root);
    for (const auto& s : specs) fs::create_directories(out_root / domain_name(s.id));

    std::vector<ScanOutput> outputs(base.records.size());
    const unsigned threads = std::max(1u, options.threads);
    if (threads == 1) {
        for (std::size_t i = 0; i < outputs.size(); ++i)
            outputs[i] = process_scan(base.records[i], base_root, specs, out_root, options);
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(threads);
        for (unsigned t = 0; t < threads; ++t)
            pool.emplace_back([&, t] {
                try {
                    for (std::size_t i = t; i < outputs.size(); i += threads)
                        outputs[i] = process_scan(base.records[i], base_root, specs, out_root, options);
                } catch (...) {
                    errors[t] = std::current_exception();
                }
            });
        for (auto& th : pool) th.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }

    BuildSummary summary;
    for (const auto& s : specs)
        if (s.corruption) summary.severity_histogram[std::string(corruption_name(s.corruption->kind))].assign(s.corruption->levels.size(), 0);
    // Records grouped by domain in spec order, scans in base-index order.
    for (const auto& spec : specs)
        for (const auto& o : outputs)
            for (const auto& r : o.records)
                if (r.domain == spec.id) summary.index.records.push_back(r);
    for (std::size_t i = 0; i < outputs.size(); ++i) {
        const auto& o = outputs[i];
        if (o.failure) summary.failures.emplace_back(base.records[i].path, *o.failure);
        for (const auto& [kind, level] : o.severities) ++summary.severity_histogram[kind][level];
        summary.dropped_returns += o.dropped;
        summary.scatter_returns += o.scatter;
    }
    write_index(out_root / "index.tsv", summary.index);
    std::ofstream(out_root / "summary.txt", std::ios::trunc) << summary.report();
    return summary;
}

RangeImage render_scene(const SyntheticScene& scene, const SensorConfig& cfg) {
    auto img = RangeImage::empty(cfg);
    for (std::size_t row = 0; row < cfg.height; ++row)
        for (std::size_t col = 0; col < cfg.width; ++col) {
            const auto d = pixel_direction(row, col, cfg);
            const double azimuth = std::atan2(d[1], d[0]);
            const double radius = scene.wall_radius * (1.0 + scene.azimuth_ripple * std::sin(3.0 * azimuth + scene.ripple_phase));
            const double horizontal = std::hypot(d[0], d[1]);
            double r = radius / horizontal;
            double inten = scene.wall_intensity;
            if (d[2] < 0.0) {
                const double t_ground = scene.ground_height / d[2];
                if (t_ground > 0.0 && t_ground < r) {
                    r = t_ground;
                    inten = scene.ground_intensity;
                }
            }
            if (!(r > 0.0) || r > cfg.r_max) continue;
            const auto k = img.index(row, col);
            img.valid[k] = 1;
            img.range[k] = static_cast<float>(r);
            img.intensity[k] = static_cast<float>(inten);
        }
    return img;
}

fs::path write_toy_base_corpus(const fs::path& root, std::size_t scans_per_domain, const SensorConfig& sensor,
                               std::uint64_t seed) {
    fs::create_directories(root);
    DatasetIndex index;
    struct Platform {
        DomainId id;
        double r_lo, r_hi, ground;
    };
    const Platform platforms[] = {{DomainId::Vehicle, 8.0, 25.0, -1.73},
                                  {DomainId::Drone, 30.0, 60.0, -20.0},
                                  {DomainId::Quadruped, 4.0, 12.0, -0.5}};
    for (const auto& p : platforms) {
        const std::string dir(domain_name(p.id));
        fs::create_directories(root / dir);
        auto rng = make_rng(stream_key(seed, dir));
        std::uniform_real_distribution<double> radius(p.r_lo, p.r_hi), ripple(0.0, 0.15),
            phase(0.0, 2.0 * std::numbers::pi);
        for (std::size_t i = 0; i < scans_per_domain; ++i) {
            SyntheticScene scene;
            scene.wall_radius = radius(rng);
            scene.ground_height = p.ground;
            scene.azimuth_ripple = ripple(rng);
            scene.ripple_phase = phase(rng);
            const std::string rel = dir + "/" + std::to_string(i) + ".olri";
            write_olri(root / rel, render_scene(scene, sensor));
            const Split split = (i % 5 == 4) ? Split::Val : Split::Train;
            index.records.push_back({rel, p.id, split});
        }
    }
    const auto path = root / "index.tsv";
    write_index(path, index);
    return path;
}

}  // namespace rangediff
