// Microbenchmarks for the pieces that dominate training time: the
// convolution primitives, a full embedder forward, and one adversarial
// training round on the toy configuration.

#include <benchmark/benchmark.h>

#include "faceaug/dataio.hpp"
#include "faceaug/ops.hpp"
#include "faceaug/rng.hpp"
#include "faceaug/train.hpp"

namespace {

using namespace faceaug;

Tensor random_tensor(std::vector<int> shape, Rng& rng) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal_f();
    return t;
}

void bm_conv2d_forward(benchmark::State& state) {
    const int size = static_cast<int>(state.range(0));
    Rng rng(1);
    const Tensor x = random_tensor({8, size, size, 64}, rng);
    const Tensor w = random_tensor({64, 3, 3, 64}, rng);
    for (auto _ : state) {
        Tape t(false);
        Var y = conv2d(t.input(x), t.input(w), Var{}, 1, 1);
        benchmark::DoNotOptimize(y.value().data());
    }
    state.SetItemsProcessed(state.iterations() * 8);
}
BENCHMARK(bm_conv2d_forward)->Arg(16)->Arg(32);

void bm_conv2d_backward(benchmark::State& state) {
    const int size = static_cast<int>(state.range(0));
    Rng rng(1);
    const Tensor x = random_tensor({8, size, size, 64}, rng);
    Parameter w{"w", random_tensor({64, 3, 3, 64}, rng)};
    for (auto _ : state) {
        Tape t(true);
        Var y = conv2d(t.input(x), t.leaf(w), Var{}, 1, 1);
        Var loss = sum_all(y);
        w.zero_grad();
        t.backward(loss);
        benchmark::DoNotOptimize(w.grad.data());
    }
    state.SetItemsProcessed(state.iterations() * 8);
}
BENCHMARK(bm_conv2d_backward)->Arg(16)->Arg(32);

void bm_embed_eval(benchmark::State& state) {
    Rng rng(1);
    EmbedderConfig cfg;
    cfg.in_channels = 1;
    Rng init(7);
    Embedder embedder(cfg, init);
    const Tensor x = random_tensor({16, 16, 16, 1}, rng);
    for (auto _ : state) {
        Tensor e = embedder.embed_eval(x);
        benchmark::DoNotOptimize(e.data());
    }
    state.SetItemsProcessed(state.iterations() * 16);
}
BENCHMARK(bm_embed_eval);

void bm_adversarial_round(benchmark::State& state) {
    TrainConfig cfg;
    cfg.image_size = 16;
    cfg.channels = 1;
    cfg.batch_size = 16;
    Trainer trainer(cfg);
    Rng rng(3);
    Batch batch;
    batch.images = random_tensor({16, 16, 16, 1}, rng);
    for (int i = 0; i < 16; ++i) batch.identities.push_back("id" + std::to_string(i % 4));
    for (auto _ : state) {
        RunRecord rec;
        trainer.adversarial_round(batch, rec);
        benchmark::DoNotOptimize(rec.gen_loss);
    }
}
BENCHMARK(bm_adversarial_round);

void bm_spectral_normalize(benchmark::State& state) {
    Rng rng(5);
    Parameter w{"w", random_tensor({64, 3, 3, 64}, rng)};
    SnState sn;
    for (auto _ : state) {
        Tape t(false);
        Var y = spectral_normalize(t.leaf(w), sn, 5);
        benchmark::DoNotOptimize(y.value().data());
    }
}
BENCHMARK(bm_spectral_normalize);

}  // namespace

BENCHMARK_MAIN();
