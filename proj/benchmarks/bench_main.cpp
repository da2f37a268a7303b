#include <benchmark/benchmark.h>
#include <torch/torch.h>

#include "semcom/channel.hpp"
#include "semcom/codec.hpp"
#include "semcom/evaluation.hpp"
#include "semcom/semantic_loss.hpp"

using namespace semcom;

namespace {

void BM_PowerNormalizeAndAwgn(benchmark::State& state) {
    torch::set_num_threads(1);
    const int64_t k = state.range(0);
    auto s = torch::randn({128, k, 2});
    AwgnChannel ch(NoiseModel::from_snr(20.0, 1.0, 0));
    for (auto _ : state) {
        auto y = ch.transmit(power_normalize(s, 1.0));
        benchmark::DoNotOptimize(y.data_ptr());
    }
    state.SetItemsProcessed(state.iterations() * 128 * k);
}
BENCHMARK(BM_PowerNormalizeAndAwgn)->Arg(64)->Arg(512)->Arg(1216);

void BM_InfoNce(benchmark::State& state) {
    torch::set_num_threads(1);
    const int64_t b = state.range(0);
    auto q = l2_normalize(torch::randn({b, 32}));
    auto v = l2_normalize(torch::randn({b, 32}));
    for (auto _ : state) {
        auto l = semantic_contrastive_loss(q, v, 0.1);
        benchmark::DoNotOptimize(l.data_ptr());
    }
}
BENCHMARK(BM_InfoNce)->Arg(32)->Arg(128)->Arg(512);

void BM_CodecForward(benchmark::State& state) {
    torch::set_num_threads(1);
    torch::NoGradGuard ng;
    CodecConfig cc;
    cc.target_ratio = 1.0 / static_cast<double>(state.range(0));
    auto codec = build_codec(cc);
    codec.train(false);
    auto x = torch::rand({32, 3, 32, 32});
    for (auto _ : state) {
        auto z = encode(codec.encoder, x);
        auto y = decode(codec.decoder, cc, power_normalize(z, 1.0).values, 32, 32);
        benchmark::DoNotOptimize(y.data_ptr());
    }
    state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_CodecForward)->Arg(48)->Arg(6)->Unit(benchmark::kMillisecond);

void BM_MsSsim(benchmark::State& state) {
    torch::set_num_threads(1);
    const int64_t side = state.range(0);
    auto x = torch::rand({3, side, side});
    auto y = (x + 0.05 * torch::randn_like(x)).clamp(0, 1);
    for (auto _ : state) {
        benchmark::DoNotOptimize(ms_ssim(x, y));
    }
}
BENCHMARK(BM_MsSsim)->Arg(32)->Arg(192)->Arg(512)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
