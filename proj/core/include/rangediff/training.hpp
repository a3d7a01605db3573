#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "rangediff/config.hpp"
#include "rangediff/denoiser.hpp"
#include "rangediff/forge.hpp"
#include "rangediff/optim.hpp"

namespace rangediff {

enum class SamplerKind { Cdts, Homogeneous };
std::string_view sampler_name(SamplerKind kind);
std::optional<SamplerKind> parse_sampler(std::string_view name);

struct BatchItem {
    std::size_t record = 0;  // position in the dataset index
    DomainId domain = DomainId::Vehicle;
    std::string prompt;

    bool operator==(const BatchItem&) const = default;
};
using BatchPlan = std::vector<BatchItem>;

/// Mini-batch plans over the train split of an index.
///
/// Cdts draws records i.i.d. with replacement from the pooled train split.
/// Homogeneous first draws a domain uniformly among those present, then B records
/// uniformly from it. Each record carries a prompt sampled from its domain's pool.
/// plan(step) is a pure function of (index, specs, kind, B, seed, step).
class BatchSampler {
public:
    /// `domains`, when non-empty, restricts the pool to those domains.
    BatchSampler(const DatasetIndex& index, std::vector<DomainSpec> specs, SamplerKind kind, std::size_t batch,
                 std::uint64_t seed, const std::vector<DomainId>& domains = {});

    BatchPlan plan(std::uint64_t step) const;
    const std::vector<DomainId>& domains() const { return domains_; }
    std::size_t pool_size() const { return pool_.size(); }

private:
    std::vector<DomainSpec> specs_;
    SamplerKind kind_;
    std::size_t batch_;
    std::uint64_t seed_;
    std::vector<std::size_t> pool_;
    std::vector<DomainId> domains_;
    std::vector<std::vector<std::size_t>> by_domain_;
    std::vector<DomainId> records_domain_;
};

struct TrainConfig {
    DenoiserConfig model;
    SensorConfig image = {16, 64};
    std::size_t diffusion_steps = 1024;  // T
    std::size_t batch = 16;
    AdamWOptions optimizer;
    SamplerKind sampler = SamplerKind::Cdts;
    std::uint64_t seed = 0;
    std::size_t steps = 500000;
    std::size_t checkpoint_every = 100;
    double clip_norm = 0.0;  // 0 disables clipping
    std::vector<DomainId> domains;  // DAFS rows; empty = every domain in the train split

    /// Applies an entry from the [model], [image], [diffusion] or [train] section,
    /// or the top-level `domains` key. Returns false when the key is not a training key.
    bool apply(const KvEntry& entry);
    void validate() const;
};

/// Everything needed to rebuild a trained model: written as model.cfg next to checkpoints.
void write_manifest(const std::filesystem::path& path, const TrainConfig& config);
TrainConfig read_manifest(const std::filesystem::path& path);

/// Normalized [2, H, W] training images keyed by record position; records whose
/// sensor differs from `image` are re-projected through their point cloud.
std::vector<std::vector<Real>> load_training_images(const std::filesystem::path& index_path, const DatasetIndex& index,
                                                    const SensorConfig& image,
                                                    const std::vector<DomainId>& domains);

struct TrainOptions {
    std::filesystem::path index_path;
    std::filesystem::path out_dir;
    std::optional<std::filesystem::path> resume;  // an OLCK checkpoint written by a previous run
    std::function<void(std::uint64_t step, double loss)> on_step;
    std::vector<DomainSpec> specs = default_domain_specs();
};

struct TrainSummary {
    std::uint64_t first_step = 1;
    std::uint64_t last_step = 0;
    std::vector<double> losses;  // losses of steps first_step..last_step
    std::filesystem::path final_checkpoint;
};

/// Runs the diffusion training loop. Writes `loss.csv` ("step,loss"), `batches.csv`
/// (domains of every batch), `model.cfg`, and `ckpt_<step>.olck` every
/// checkpoint_every steps and at the end. Each checkpoint has a `.state` sidecar with
/// the exact parameters and optimizer moments, so resuming continues bit-identically.
TrainSummary train(const TrainConfig& config, const TrainOptions& options);

/// Exact training state next to an OLCK checkpoint.
std::filesystem::path state_path_for(const std::filesystem::path& checkpoint);

/// Loads parameters for sampling: exact state when the sidecar exists, else the f32 checkpoint.
void load_parameters(ParamStore& params, const std::filesystem::path& checkpoint);

}  // namespace rangediff
