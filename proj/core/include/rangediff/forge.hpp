#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rangediff/geometry.hpp"
#include "rangediff/random.hpp"

// Multi-domain corpus construction: beam reduction, parametric weather
// corruption, prompt pools and the pooled dataset index.
namespace rangediff {

enum class DomainId { Vehicle, Snow, Fog, Rain, WetGround, Beam32, Drone, Quadruped };

inline constexpr std::array<DomainId, 8> kAllDomains = {DomainId::Vehicle, DomainId::Snow,     DomainId::Fog,
                                                        DomainId::Rain,    DomainId::WetGround, DomainId::Beam32,
                                                        DomainId::Drone,   DomainId::Quadruped};

std::string_view domain_name(DomainId id);
std::optional<DomainId> parse_domain(std::string_view name);
std::string known_domains_list();

enum class CorruptionKind { Fog, Snow, Rain, WetGround };

std::string_view corruption_name(CorruptionKind kind);
std::optional<CorruptionKind> parse_corruption(std::string_view name);

/// One severity level of a weather stand-in.
struct SeverityLevel {
    double dropout_slope = 0.0;    // drop probability per meter of range, min(1, slope * r)
    std::size_t scatter_count = 0; // spurious near-sensor returns (snow only)
    double scatter_range = 0.0;    // scatter ranges are uniform in (0.5 m, scatter_range)
    double attenuation = 1.0;      // multiplicative intensity factor for surviving returns

    bool operator==(const SeverityLevel&) const = default;
};

struct CorruptionSpec {
    CorruptionKind kind = CorruptionKind::Fog;
    std::vector<SeverityLevel> levels;

    void validate() const;
    bool operator==(const CorruptionSpec&) const = default;
};

struct DomainSpec {
    DomainId id = DomainId::Vehicle;
    std::vector<std::string> prompt_pool;
    std::optional<CorruptionSpec> corruption;
    SensorConfig sensor;

    void validate() const;
};

/// Three-level parametric defaults per weather kind.
CorruptionSpec default_corruption(CorruptionKind kind);
/// The eight domains with their default prompt pools, corruptions and sensors.
std::vector<DomainSpec> default_domain_specs();
const DomainSpec& find_spec(const std::vector<DomainSpec>& specs, DomainId id);

/// Parses "[<kind>.<level>]" sections of "key = value" lines (keys: dropout_slope,
/// scatter_count, scatter_range, attenuation). Levels must be contiguous from 0.
std::vector<CorruptionSpec> read_corruption_file(const std::filesystem::path& path);
void write_corruption_file(const std::filesystem::path& path, const std::vector<CorruptionSpec>& specs);

/// Keeps rows 0, 2, 4, ... verbatim; the FOV is unchanged. Throws ConfigError on odd H.
RangeImage reduce_beams(const RangeImage& image);

/// Applies severity level `level` of `spec`; deterministic in (image, spec, level, seed).
RangeImage corrupt(const RangeImage& image, const CorruptionSpec& spec, std::size_t level, std::uint64_t seed,
                   double ground_threshold = -1.3);

inline constexpr double kDefaultGroundThreshold = -1.3;
/// Marks valid pixels whose unprojected height is below `z_threshold` (sensor frame, meters).
std::vector<std::uint8_t> detect_ground(const RangeImage& image, double z_threshold = kDefaultGroundThreshold);

enum class PromptMode { Train, Infer };
/// Train: uniform over the pool. Infer: the first entry.
std::string sample_prompt(const DomainSpec& spec, PromptMode mode, Rng& rng);

enum class Split { Train, Val };
std::string_view split_name(Split split);
std::optional<Split> parse_split(std::string_view name);

struct DatasetRecord {
    std::string path;  // relative to the index file's directory
    DomainId domain = DomainId::Vehicle;
    Split split = Split::Train;

    bool operator==(const DatasetRecord&) const = default;
};

struct DatasetIndex {
    std::vector<DatasetRecord> records;

    std::map<DomainId, std::size_t> counts(std::optional<Split> split = std::nullopt) const;
};

/// "<relative path>\t<domain id>\t<split>" per line.
DatasetIndex read_index(const std::filesystem::path& path);
void write_index(const std::filesystem::path& path, const DatasetIndex& index);

struct BuildOptions {
    std::uint64_t seed = 0;
    unsigned threads = 1;
    double ground_threshold = kDefaultGroundThreshold;
};

struct BuildSummary {
    DatasetIndex index;
    std::vector<std::pair<std::string, std::string>> failures;  // (scan path, reason)
    std::map<std::string, std::vector<std::size_t>> severity_histogram;  // corruption kind → per-level counts
    std::size_t dropped_returns = 0;
    std::size_t scatter_returns = 0;

    std::string report() const;
};

/// Builds the pooled multi-domain corpus from a base index (Vehicle, Drone and
/// Quadruped records). Vehicle scans seed the Vehicle, weather and Beam-32
/// domains; Drone and Quadruped scans are copied. Writes OLRI files under
/// `out_root/<Domain>/`, plus `index.tsv` and `summary.txt`. Unreadable scans are
/// recorded in the summary and skipped. Output is a pure function of the base
/// corpus bytes, the specs and the seed, independent of `threads`.
BuildSummary build_dataset(const std::filesystem::path& base_index_path, const std::vector<DomainSpec>& specs,
                           const std::filesystem::path& out_root, const BuildOptions& options);

/// Deterministic synthetic scene used by the toy corpus: ground plane plus a
/// cylindrical wall, rendered directly per pixel ray.
struct SyntheticScene {
    double wall_radius = 10.0;
    double ground_height = -1.73;  // z of the ground plane in sensor coordinates
    double wall_intensity = 0.6;
    double ground_intensity = 0.3;
    double azimuth_ripple = 0.0;   // relative wall radius modulation amplitude
    double ripple_phase = 0.0;
};
RangeImage render_scene(const SyntheticScene& scene, const SensorConfig& cfg);

/// Writes a synthetic base corpus (Vehicle, Drone, Quadruped) with `scans_per_domain`
/// scans each and its index file; returns the index path.
std::filesystem::path write_toy_base_corpus(const std::filesystem::path& root, std::size_t scans_per_domain,
                                            const SensorConfig& sensor, std::uint64_t seed);

}  // namespace rangediff
