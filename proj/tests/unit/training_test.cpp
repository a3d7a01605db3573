#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <set>

#include "rangediff/checkpoint.hpp"
#include "rangediff/errors.hpp"
#include "rangediff/training.hpp"

using namespace rangediff;
namespace fs = std::filesystem;

namespace {

DatasetIndex synthetic_index(const std::vector<std::pair<DomainId, std::size_t>>& sizes, std::size_t val_each = 0) {
    DatasetIndex idx;
    for (const auto& [id, n] : sizes) {
        for (std::size_t i = 0; i < n; ++i)
            idx.records.push_back({std::string(domain_name(id)) + "/" + std::to_string(i) + ".olri", id, Split::Train});
        for (std::size_t i = 0; i < val_each; ++i)
            idx.records.push_back({std::string(domain_name(id)) + "/v" + std::to_string(i) + ".olri", id, Split::Val});
    }
    return idx;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

fs::path scratch(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("rangediff_train_" + name);
    fs::remove_all(p);
    return p;
}

SensorConfig small_sensor() {
    SensorConfig s;
    s.height = 8;
    s.width = 32;
    return s;
}

// Vehicle and Drone scans rendered at 8x32.
fs::path toy_dataset(const fs::path& root) {
    const auto base = write_toy_base_corpus(root / "base", 5, small_sensor(), 2);
    const auto all = default_domain_specs();
    build_dataset(base, {find_spec(all, DomainId::Vehicle), find_spec(all, DomainId::Drone)}, root / "data", {});
    return root / "data" / "index.tsv";
}

TrainConfig tiny_train_config() {
    TrainConfig c;
    c.model.channels = {4, 8};
    c.model.groups = 2;
    c.model.time_width = 8;
    c.model.context_width = 8;
    c.model.key_width = 4;
    c.image = small_sensor();
    c.image.width = 16;
    c.diffusion_steps = 16;
    c.batch = 2;
    c.optimizer.learning_rate = 1e-3;
    c.seed = 5;
    c.steps = 8;
    c.checkpoint_every = 4;
    return c;
}

}  // namespace

TEST(BatchSampler, Defaults) {
    const TrainConfig c;
    EXPECT_EQ(c.batch, 16u);
    EXPECT_DOUBLE_EQ(c.optimizer.learning_rate, 1e-4);
    EXPECT_EQ(c.sampler, SamplerKind::Cdts);
    EXPECT_EQ(parse_sampler(sampler_name(SamplerKind::Homogeneous)), SamplerKind::Homogeneous);
    EXPECT_FALSE(parse_sampler("round-robin").has_value());
}

TEST(BatchSampler, CdtsFollowsPooledProportions) {
    const auto idx = synthetic_index({{DomainId::Vehicle, 100}, {DomainId::Drone, 300}}, 50);
    const BatchSampler sampler(idx, default_domain_specs(), SamplerKind::Cdts, 16, 1);
    EXPECT_EQ(sampler.pool_size(), 400u);
    std::map<DomainId, double> freq;
    std::size_t total = 0;
    for (std::uint64_t step = 1; total < 10000; ++step)
        for (const auto& item : sampler.plan(step)) {
            EXPECT_EQ(idx.records[item.record].split, Split::Train);
            EXPECT_EQ(idx.records[item.record].domain, item.domain);
            freq[item.domain] += 1;
            ++total;
        }
    const double n = static_cast<double>(total);
    const double sigma = std::sqrt(0.25 * 0.75 / n);
    EXPECT_NEAR(freq[DomainId::Vehicle] / n, 0.25, 3 * sigma);
    EXPECT_NEAR(freq[DomainId::Drone] / n, 0.75, 3 * sigma);
}

TEST(BatchSampler, CdtsBatchesAreMixed) {
    const auto idx = synthetic_index({{DomainId::Vehicle, 50}, {DomainId::Drone, 50}});
    const BatchSampler sampler(idx, default_domain_specs(), SamplerKind::Cdts, 16, 2);
    const double p_mixed = 1.0 - 2.0 * std::pow(0.5, 16);
    const std::size_t batches = 1000;
    std::size_t mixed = 0;
    for (std::uint64_t step = 1; step <= batches; ++step) {
        std::set<DomainId> seen;
        for (const auto& item : sampler.plan(step)) seen.insert(item.domain);
        mixed += seen.size() == 2;
    }
    const double sigma = std::sqrt(batches * p_mixed * (1 - p_mixed));
    EXPECT_GE(static_cast<double>(mixed), batches * p_mixed - 3 * sigma);
    EXPECT_LE(static_cast<double>(mixed), batches * p_mixed + 3 * sigma + 1e-9);
}

TEST(BatchSampler, HomogeneousUsesOneUniformDomain) {
    const auto idx = synthetic_index({{DomainId::Vehicle, 10}, {DomainId::Snow, 300}, {DomainId::Drone, 40}});
    const BatchSampler sampler(idx, default_domain_specs(), SamplerKind::Homogeneous, 4, 3);
    std::map<DomainId, double> freq;
    const std::size_t batches = 10000;
    for (std::uint64_t step = 1; step <= batches; ++step) {
        const auto plan = sampler.plan(step);
        ASSERT_EQ(plan.size(), 4u);
        std::set<DomainId> seen;
        for (const auto& item : plan) seen.insert(item.domain);
        ASSERT_EQ(seen.size(), 1u);
        freq[plan[0].domain] += 1;
    }
    const double sigma = std::sqrt((1.0 / 3) * (2.0 / 3) / batches);
    for (auto id : {DomainId::Vehicle, DomainId::Snow, DomainId::Drone})
        EXPECT_NEAR(freq[id] / batches, 1.0 / 3, 3 * sigma) << domain_name(id);
}

TEST(BatchSampler, PureInStepAndSeed) {
    const auto idx = synthetic_index({{DomainId::Vehicle, 30}, {DomainId::Fog, 30}});
    for (auto kind : {SamplerKind::Cdts, SamplerKind::Homogeneous}) {
        const BatchSampler a(idx, default_domain_specs(), kind, 8, 9), b(idx, default_domain_specs(), kind, 8, 9);
        const BatchSampler c(idx, default_domain_specs(), kind, 8, 10);
        EXPECT_EQ(a.plan(17), b.plan(17));
        EXPECT_EQ(a.plan(17), a.plan(17));
        EXPECT_NE(a.plan(17), a.plan(18));
        EXPECT_NE(a.plan(17), c.plan(17));
    }
}

TEST(BatchSampler, PromptsComeFromTheDomainPool) {
    const auto specs = default_domain_specs();
    const auto idx = synthetic_index({{DomainId::Snow, 20}, {DomainId::Drone, 20}});
    const BatchSampler sampler(idx, specs, SamplerKind::Cdts, 16, 4);
    std::set<std::string> snow_prompts;
    for (std::uint64_t step = 1; step <= 50; ++step)
        for (const auto& item : sampler.plan(step)) {
            const auto& pool = find_spec(specs, item.domain).prompt_pool;
            EXPECT_NE(std::find(pool.begin(), pool.end(), item.prompt), pool.end());
            if (item.domain == DomainId::Snow) snow_prompts.insert(item.prompt);
        }
    EXPECT_EQ(snow_prompts.size(), find_spec(specs, DomainId::Snow).prompt_pool.size());
}

TEST(BatchSampler, EmptyTrainSplitAndDomainFilter) {
    DatasetIndex only_val;
    only_val.records.push_back({"a.olri", DomainId::Vehicle, Split::Val});
    EXPECT_THROW(BatchSampler(only_val, default_domain_specs(), SamplerKind::Cdts, 4, 0), ConfigError);
    const auto idx = synthetic_index({{DomainId::Vehicle, 5}, {DomainId::Drone, 7}});
    const BatchSampler drone(idx, default_domain_specs(), SamplerKind::Cdts, 4, 0, {DomainId::Drone});
    EXPECT_EQ(drone.pool_size(), 7u);
    for (const auto& item : drone.plan(1)) EXPECT_EQ(item.domain, DomainId::Drone);
    EXPECT_THROW(BatchSampler(idx, default_domain_specs(), SamplerKind::Cdts, 0, 0), ConfigError);
}

TEST(Manifest, RoundTrip) {
    const auto dir = scratch("manifest");
    fs::create_directories(dir);
    auto c = tiny_train_config();
    c.sampler = SamplerKind::Homogeneous;
    c.domains = {DomainId::Drone, DomainId::Vehicle};
    c.model.domain_count = 2;
    c.model.use_dafs = false;
    write_manifest(dir / "model.cfg", c);
    const auto back = read_manifest(dir / "model.cfg");
    EXPECT_EQ(back.model, c.model);
    EXPECT_EQ(back.image.height, c.image.height);
    EXPECT_EQ(back.image.width, c.image.width);
    EXPECT_EQ(back.diffusion_steps, c.diffusion_steps);
    EXPECT_EQ(back.domains, c.domains);
    EXPECT_EQ(back.sampler, c.sampler);
    EXPECT_EQ(back.seed, c.seed);
    fs::remove_all(dir);
}

TEST(Train, WritesTracesAndResumesBitIdentically) {
    const auto dir = scratch("resume");
    const auto index = toy_dataset(dir);
    const auto config = tiny_train_config();

    TrainOptions full{index, dir / "full"};
    const auto whole = train(config, full);
    EXPECT_EQ(whole.losses.size(), 8u);
    EXPECT_TRUE(fs::exists(dir / "full" / "ckpt_4.olck"));
    EXPECT_TRUE(fs::exists(dir / "full" / "ckpt_8.olck"));
    EXPECT_TRUE(fs::exists(state_path_for(dir / "full" / "ckpt_8.olck")));
    EXPECT_EQ(read_manifest(dir / "full" / "model.cfg").model.domain_count, 2u);
    for (auto l : whole.losses) EXPECT_TRUE(std::isfinite(l));

    auto first_half = config;
    first_half.steps = 4;
    train(first_half, {index, dir / "split"});
    TrainOptions resume{index, dir / "split"};
    resume.resume = dir / "split" / "ckpt_4.olck";
    const auto rest = train(config, resume);
    EXPECT_EQ(rest.first_step, 5u);
    ASSERT_EQ(rest.losses.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(rest.losses[i], whole.losses[4 + i]);
    EXPECT_EQ(slurp(dir / "full" / "loss.csv"), slurp(dir / "split" / "loss.csv"));
    EXPECT_EQ(slurp(dir / "full" / "batches.csv"), slurp(dir / "split" / "batches.csv"));
    EXPECT_EQ(slurp(dir / "full" / "ckpt_8.olck"), slurp(dir / "split" / "ckpt_8.olck"));
    EXPECT_EQ(slurp(state_path_for(dir / "full" / "ckpt_8.olck")), slurp(state_path_for(dir / "split" / "ckpt_8.olck")));

    // The loss trace has a header and one row per step.
    std::ifstream in(dir / "full" / "loss.csv");
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "step,loss");
    std::size_t rows = 0;
    while (std::getline(in, line)) ++rows;
    EXPECT_EQ(rows, 8u);

    // Sampling-side loading restores the exact parameters.
    DenoiserConfig model_cfg = read_manifest(dir / "full" / "model.cfg").model;
    Denoiser a(model_cfg, 0), b(model_cfg, 0);
    load_parameters(a.params(), dir / "full" / "ckpt_8.olck");
    load_parameters(b.params(), dir / "split" / "ckpt_8.olck");
    for (std::size_t i = 0; i < a.params().entries().size(); ++i) {
        const auto x = a.params().entries()[i].tensor.data(), y = b.params().entries()[i].tensor.data();
        EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin()));
    }
    fs::remove_all(dir);
}

TEST(Train, ResumeRequiresMatchingState) {
    const auto dir = scratch("resume_errors");
    const auto index = toy_dataset(dir);
    auto config = tiny_train_config();
    config.steps = 4;
    train(config, {index, dir / "run"});
    TrainOptions resume{index, dir / "run"};
    resume.resume = dir / "run" / "ckpt_4.olck";
    auto other_seed = config;
    other_seed.seed = 99;
    other_seed.steps = 6;
    EXPECT_THROW(train(other_seed, resume), ConfigError);
    fs::remove(state_path_for(dir / "run" / "ckpt_4.olck"));
    config.steps = 6;
    EXPECT_THROW(train(config, resume), IoError);
    fs::remove_all(dir);
}

TEST(Train, NonFiniteLossNamesStepAndBatch) {
    const auto dir = scratch("nan");
    fs::create_directories(dir / "data" / "Vehicle");
    auto img = RangeImage::empty(small_sensor());
    img.valid[5] = 1;
    img.range[5] = std::numeric_limits<float>::quiet_NaN();
    write_olri(dir / "data" / "Vehicle" / "bad.olri", img);
    DatasetIndex idx;
    idx.records.push_back({"Vehicle/bad.olri", DomainId::Vehicle, Split::Train});
    write_index(dir / "data" / "index.tsv", idx);
    auto config = tiny_train_config();
    config.image = small_sensor();
    try {
        train(config, {dir / "data" / "index.tsv", dir / "run"});
        FAIL() << "expected TrainingError";
    } catch (const TrainingError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("step 1"), std::string::npos) << msg;
        EXPECT_NE(msg.find("Vehicle/bad.olri"), std::string::npos) << msg;
    }
    fs::remove_all(dir);
}
