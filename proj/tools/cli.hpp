#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rangediff/training.hpp"

namespace rangediff::cli {

/// All settings a command can read, from built-in defaults, an optional config
/// file and command-line flags (flags win). Relative paths in a config file are
/// resolved against the file's directory.
struct RunConfig {
    // [data]
    std::filesystem::path base_index;
    std::filesystem::path data_root = "data";
    std::optional<std::filesystem::path> corruption_file;
    double ground_threshold = kDefaultGroundThreshold;
    std::uint64_t data_seed = 0;
    std::size_t toy_scans = 0;  // > 0: synthesize a base corpus with this many scans per platform

    // [model] [image] [diffusion] [train] and the top-level domains list
    TrainConfig train;
    std::filesystem::path train_out = "run";

    // [sample]
    std::size_t sample_steps = 256;
    std::size_t sample_count = 4;
    std::uint64_t sample_seed = 0;
    std::filesystem::path sample_out = "samples";
    double sample_min_range = 0.3;
    std::size_t sample_batch = 8;
    bool sample_clip_denoised = true;

    // [ablate]
    std::vector<std::string> ablate_rows = {"single-domain", "homogeneous", "cdts", "cdts+cdfm", "cdts+dafs", "full"};
    std::size_t ablate_steps = 300;
    std::size_t ablate_samples = 8;
    std::size_t ablate_sample_steps = 32;
    std::filesystem::path ablate_out = "ablation";

    unsigned threads = 1;

    /// Desk-scale preset: two synthetic domains at 16x64 and a small model.
    static RunConfig toy();
    /// Applies every entry of a config file; throws ConfigError naming the first unknown key.
    void load(const std::filesystem::path& file);
    void validate() const;
};

struct SampleRequest {
    std::filesystem::path checkpoint;  // model.cfg must sit beside it
    DomainId domain = DomainId::Vehicle;
    std::size_t count = 1;
    std::size_t steps = 256;
    std::uint64_t seed = 0;
    std::size_t batch = 8;
    bool clip_denoised = true;
};

struct Generated {
    Tensor x;  // normalized samples [count, 2, H, W], clamped to [-1, 1]
    TrainConfig manifest;
    std::string prompt;
};

/// Samples `count` images of one domain with the domain's inference prompt. Sample i
/// uses its own stream keyed by (seed, domain, i), so results do not depend on `batch`.
Generated generate(const SampleRequest& request);

/// Names of the ablation rows, in report order.
const std::vector<std::string>& known_ablation_rows();

/// Mean of the normalized range channel over every pixel of each [2, H, W] image in x[B, 2, H, W].
std::vector<double> mean_normalized_range(const Tensor& x);

/// Grayscale PGM of the range channel, near returns bright, invalid pixels black.
void write_range_pgm(const std::filesystem::path& path, const RangeImage& image);

/// Entry point of the `rangediff` tool. Returns 0 on success, 1 for user or
/// configuration errors and 2 for internal failures.
int run_cli(int argc, const char* const* argv);

}  // namespace rangediff::cli
