#include <benchmark/benchmark.h>

#include "rangediff/conditioning.hpp"
#include "rangediff/denoiser.hpp"
#include "rangediff/diffusion.hpp"
#include "rangediff/geometry.hpp"
#include "rangediff/forge.hpp"
#include "rangediff/ops.hpp"
#include "rangediff/random.hpp"

using namespace rangediff;

static void BM_Conv2d(benchmark::State& state) {
    const auto channels = static_cast<std::size_t>(state.range(0));
    Rng rng(1);
    const auto x = normal_tensor({1, channels, 16, 64}, rng);
    const auto w = normal_tensor({channels, channels, 3, 3}, rng);
    for (auto _ : state) benchmark::DoNotOptimize(ops::conv2d(x, w));
}
BENCHMARK(BM_Conv2d)->Arg(8)->Arg(16)->Unit(benchmark::kMicrosecond);

static void BM_SelectiveScan(benchmark::State& state) {
    const auto length = static_cast<std::size_t>(state.range(0));
    ParamStore store;
    std::mt19937_64 init(2);
    const auto p = ScanParams::create(store, "scan", 8, init);
    Rng rng(3);
    const auto s = normal_tensor({4, length, 8}, rng);
    for (auto _ : state) benchmark::DoNotOptimize(selective_scan(s, p));
}
BENCHMARK(BM_SelectiveScan)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);

static void BM_DenoiseForward(benchmark::State& state) {
    DenoiserConfig cfg;
    cfg.channels = {8, 16};
    cfg.time_width = 32;
    cfg.key_width = 16;
    const Denoiser net(cfg, 4);
    Rng rng(5);
    const auto batch = static_cast<std::size_t>(state.range(0));
    const auto x = normal_tensor({batch, 2, 16, 64}, rng);
    const auto ctx = normal_tensor({batch, kPromptTokens, kEmbedWidth}, rng);
    const std::vector<std::size_t> t(batch, 10), domains(batch, 0);
    NoGradGuard guard;
    for (auto _ : state) benchmark::DoNotOptimize(net.denoise(x, t, ctx, domains));
}
BENCHMARK(BM_DenoiseForward)->Arg(1)->Arg(8)->Unit(benchmark::kMillisecond);

static void BM_RasterizeUnproject(benchmark::State& state) {
    const auto img = render_scene(SyntheticScene{}, default_sensor());
    for (auto _ : state) benchmark::DoNotOptimize(rasterize(unproject(img), img.config));
}
BENCHMARK(BM_RasterizeUnproject)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
