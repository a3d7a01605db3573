#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "cli.hpp"
#include "rangediff/forge.hpp"

using namespace rangediff;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code = 0;
    std::string out, err;
};

Result run(std::vector<std::string> args) {
    args.insert(args.begin(), "rangediff");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    ::testing::internal::CaptureStdout();
    ::testing::internal::CaptureStderr();
    Result r;
    r.code = cli::run_cli(static_cast<int>(argv.size()), argv.data());
    r.out = ::testing::internal::GetCapturedStdout();
    r.err = ::testing::internal::GetCapturedStderr();
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<std::string> lines(const fs::path& p) {
    std::ifstream in(p);
    std::vector<std::string> out;
    for (std::string l; std::getline(in, l);) out.push_back(l);
    return out;
}

// A tiny synthetic setup: toy corpus, 8x16 images, a two-stage model and T = 16.
class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               ("rangediff_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
        write_config("run.cfg", "");
    }
    void TearDown() override { fs::remove_all(dir_); }

    fs::path write_config(const std::string& name, const std::string& extra) {
        std::ofstream(dir_ / name) << "domains = Vehicle, Snow\n"
                                      "[data]\nroot = data\ntoy_scans = 3\nseed = 4\n"
                                      "[image]\nheight = 8\nwidth = 16\n"
                                      "[model]\nchannels = 4,8\ngroups = 2\ntime_width = 8\nkey_width = 4\n"
                                      "[diffusion]\nT = 16\n"
                                      "[train]\nbatch = 2\nsteps = 4\ncheckpoint_every = 2\nlr = 0.001\nout = run\n"
                                      "[sample]\nsteps = 8\nout = samples\n"
                                   << extra;
        return dir_ / name;
    }
    std::string cfg(const std::string& name = "run.cfg") const { return (dir_ / name).string(); }

    fs::path dir_;
};

}  // namespace

TEST(RunConfig, DefaultsAndToyPreset) {
    const cli::RunConfig d;
    EXPECT_EQ(d.sample_steps, 256u);
    EXPECT_TRUE(d.sample_clip_denoised);
    EXPECT_EQ(d.train.batch, 16u);
    const auto toy = cli::RunConfig::toy();
    EXPECT_EQ(toy.train.domains, (std::vector<DomainId>{DomainId::Vehicle, DomainId::Drone}));
    EXPECT_NO_THROW(toy.validate());
}

TEST(RunConfig, ShippedConfigsMatchTheToyPreset) {
    const auto toy = cli::RunConfig::toy();
    for (const char* name : {"toy.cfg", "ablation.cfg"}) {
        cli::RunConfig c;
        c.load(fs::path(RANGEDIFF_CONFIG_DIR) / name);
        EXPECT_NO_THROW(c.validate()) << name;
        EXPECT_EQ(c.train.domains, toy.train.domains) << name;
        EXPECT_EQ(c.train.image, toy.train.image) << name;
        EXPECT_EQ(c.train.model, toy.train.model) << name;
        EXPECT_EQ(c.train.diffusion_steps, toy.train.diffusion_steps) << name;
        EXPECT_EQ(c.train.batch, toy.train.batch) << name;
        EXPECT_EQ(c.train.optimizer.learning_rate, toy.train.optimizer.learning_rate) << name;
        EXPECT_EQ(c.train.optimizer.weight_decay, toy.train.optimizer.weight_decay) << name;
        EXPECT_EQ(c.toy_scans, toy.toy_scans) << name;
    }
    cli::RunConfig ablation;
    ablation.load(fs::path(RANGEDIFF_CONFIG_DIR) / "ablation.cfg");
    EXPECT_EQ(ablation.ablate_rows, cli::known_ablation_rows());
    EXPECT_EQ(ablation.ablate_steps, toy.ablate_steps);
    cli::RunConfig train;
    train.load(fs::path(RANGEDIFF_CONFIG_DIR) / "toy.cfg");
    EXPECT_EQ(train.train.steps, toy.train.steps);
    EXPECT_EQ(train.sample_steps, toy.sample_steps);
}

TEST(RunConfig, MeanNormalizedRange) {
    auto x = Tensor::zeros({2, 2, 1, 2});
    auto data = x.mutable_data();
    data[0] = 0.5;
    data[1] = -0.1;
    data[2] = 9.0;  // intensity channel is ignored
    data[4] = 1.0;
    const auto m = cli::mean_normalized_range(x);
    EXPECT_DOUBLE_EQ(m[0], 0.2);
    EXPECT_DOUBLE_EQ(m[1], 0.5);
}

TEST_F(CliTest, BuildDataIsDeterministic) {
    const auto first = run({"--config", cfg(), "build-data"});
    ASSERT_EQ(first.code, 0) << first.err;
    const auto index = read_index(dir_ / "data" / "index.tsv");
    EXPECT_EQ(index.counts().size(), 8u);
    const auto bytes = slurp(dir_ / "data" / "index.tsv");
    const auto snow = slurp(dir_ / "data" / index.records[5].path);

    fs::remove_all(dir_ / "data");
    ASSERT_EQ(run({"--config", cfg(), "build-data"}).code, 0);
    EXPECT_EQ(slurp(dir_ / "data" / "index.tsv"), bytes);
    EXPECT_EQ(slurp(dir_ / "data" / index.records[5].path), snow);
}

TEST_F(CliTest, MissingBaseCorpusNamesThePath) {
    std::ofstream(dir_ / "missing.cfg") << "[data]\nbase_index = nowhere/index.tsv\nroot = out\n";
    const auto r = run({"--config", cfg("missing.cfg"), "build-data"});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("nowhere/index.tsv"), std::string::npos) << r.err;
}

TEST_F(CliTest, ConfigErrorsExitWithOne) {
    std::ofstream(dir_ / "bad.cfg") << "[train]\nlearning_speed = 3\n";
    const auto r = run({"--config", cfg("bad.cfg"), "train"});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("learning_speed"), std::string::npos) << r.err;
    EXPECT_EQ(run({"--config", cfg(), "train", "--sampler", "round-robin"}).code, 1);
    EXPECT_EQ(run({"frobnicate"}).code, 1);
}

TEST_F(CliTest, TrainWritesIndexedLossTraceAndResumes) {
    auto r = run({"--config", cfg(), "train", "--steps", "2"});
    ASSERT_EQ(r.code, 0) << r.err;
    ASSERT_TRUE(fs::exists(dir_ / "run" / "ckpt_2.olck"));
    r = run({"--config", cfg(), "train", "--resume", (dir_ / "run" / "ckpt_2.olck").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto trace = lines(dir_ / "run" / "loss.csv");
    ASSERT_EQ(trace.size(), 5u);
    EXPECT_EQ(trace[0], "step,loss");
    for (std::size_t i = 1; i < trace.size(); ++i) EXPECT_EQ(trace[i].substr(0, trace[i].find(',')), std::to_string(i));

    // The resumed trace equals an uninterrupted run.
    ASSERT_EQ(run({"--config", cfg(), "train", "--out", (dir_ / "whole").string()}).code, 0);
    EXPECT_EQ(slurp(dir_ / "whole" / "loss.csv"), slurp(dir_ / "run" / "loss.csv"));
}

TEST_F(CliTest, HomogeneousBatchesCarryOneDomain) {
    const auto r = run({"--config", cfg(), "train", "--sampler", "homogeneous", "--steps", "6"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto rows = lines(dir_ / "run" / "batches.csv");
    ASSERT_EQ(rows.size(), 7u);
    for (std::size_t i = 1; i < rows.size(); ++i) {
        std::istringstream row(rows[i]);
        std::string step, domains;
        std::getline(row, step, ',');
        std::getline(row, domains, ',');
        std::set<std::string> seen;
        std::istringstream names(domains);
        for (std::string n; std::getline(names, n, ';');) seen.insert(n);
        EXPECT_EQ(seen.size(), 1u) << rows[i];
    }
}

TEST_F(CliTest, SampleIsDeterministicAndUsesFirstPrompt) {
    ASSERT_EQ(run({"--config", cfg(), "train"}).code, 0);
    const auto ckpt = (dir_ / "run" / "ckpt_4.olck").string();
    auto r = run({"--config", cfg(), "sample", ckpt, "--domain", "Snow", "--count", "2", "--seed", "7", "--points"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("prompt = " + find_spec(default_domain_specs(), DomainId::Snow).prompt_pool.front()),
              std::string::npos)
        << r.out;
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir_ / "samples"))
        if (e.path().extension() == ".olri") files.push_back(e.path());
    ASSERT_EQ(files.size(), 2u);
    EXPECT_TRUE(fs::exists(dir_ / "samples" / "Snow_seed7_0.olri"));
    EXPECT_TRUE(fs::exists(dir_ / "samples" / "Snow_seed7_1.txt"));
    const auto first = slurp(dir_ / "samples" / "Snow_seed7_1.olri");
    const auto img = read_olri(dir_ / "samples" / "Snow_seed7_1.olri");
    EXPECT_EQ(img.config.height, 8u);
    EXPECT_EQ(img.config.width, 16u);

    r = run({"--config", cfg(), "sample", ckpt, "--domain", "Snow", "--count", "2", "--seed", "7", "--out",
             (dir_ / "again").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(slurp(dir_ / "again" / "Snow_seed7_1.olri"), first);
}

TEST_F(CliTest, SampleRejectsUnknownDomain) {
    ASSERT_EQ(run({"--config", cfg(), "train", "--steps", "2"}).code, 0);
    const auto ckpt = (dir_ / "run" / "ckpt_2.olck").string();
    auto r = run({"--config", cfg(), "sample", ckpt, "--domain", "Submarine"});
    EXPECT_EQ(r.code, 1);
    for (auto id : kAllDomains) EXPECT_NE(r.err.find(std::string(domain_name(id))), std::string::npos) << r.err;
    // Known but untrained.
    r = run({"--config", cfg(), "sample", ckpt, "--domain", "Drone"});
    EXPECT_EQ(r.code, 1);
    // More steps than the schedule has.
    r = run({"--config", cfg(), "sample", ckpt, "--domain", "Snow", "--steps", "256"});
    EXPECT_EQ(r.code, 1);
}

TEST_F(CliTest, EvalSelfComparisonAndErrors) {
    fs::create_directories(dir_ / "set");
    SensorConfig s;
    s.height = 8;
    s.width = 32;
    for (int i = 0; i < 3; ++i) {
        SyntheticScene scene;
        scene.wall_radius = 8.0 + 4.0 * i;
        write_olri(dir_ / "set" / (std::to_string(i) + ".olri"), render_scene(scene, s));
    }
    auto r = run({"eval", (dir_ / "set").string(), (dir_ / "set").string(), "--out", (dir_ / "report").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("MMD(x1e4)"), std::string::npos);
    const auto csv = lines(dir_ / "report" / "report.csv");
    ASSERT_EQ(csv.size(), 2u);
    std::vector<std::string> cells;
    std::istringstream row(csv[1]);
    for (std::string c; std::getline(row, c, ',');) cells.push_back(c);
    ASSERT_EQ(cells.size(), 7u);
    EXPECT_LE(std::abs(std::stod(cells[3])), 1e-9);  // jsd
    EXPECT_LE(std::abs(std::stod(cells[5])), 1e-9);  // mmd
    EXPECT_NE(slurp(dir_ / "report" / "report.txt").find("MMD(x1e4)"), std::string::npos);

    std::ofstream(dir_ / "set" / "broken.olri") << "not a range image";
    r = run({"eval", (dir_ / "set").string(), (dir_ / "set").string()});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("broken.olri"), std::string::npos) << r.err;

    fs::create_directories(dir_ / "empty");
    EXPECT_EQ(run({"eval", (dir_ / "empty").string(), (dir_ / "set").string()}).code, 1);
}
