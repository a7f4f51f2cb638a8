#include <benchmark/benchmark.h>

#include <random>

#include "symadit/autoencoder.hpp"
#include "symadit/evalx.hpp"
#include "symadit/flowmatch.hpp"
#include "symadit/synth.hpp"

using namespace symadit;
using nn::Tensor;

namespace {

const SymmetryCatalog& cat() { return default_catalog(); }

Tensor rnd(int r, int c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return nn::normal_tensor(r, c, 1.0, rng);
}

AEConfig bench_ae() {
  AEConfig c = AEConfig::desk();
  c.batch_size = 32;
  c.seed = 1;
  return c;
}

}  // namespace

static void BM_MatmulRowStable(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const Tensor a = rnd(n, 128, 1), b = rnd(128, 128, 2);
  for (auto _ : state) benchmark::DoNotOptimize(nn::matmul_rowstable(a, b));
  state.SetItemsProcessed(state.iterations() * n * 128 * 128);
}
BENCHMARK(BM_MatmulRowStable)->Arg(64)->Arg(512);

static void BM_AttentionForwardBackward(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  nn::ParameterStore store;
  auto& q = store.create("q", rnd(n, 128, 3));
  auto& k = store.create("k", rnd(n, 128, 4));
  auto& v = store.create("v", rnd(n, 128, 5));
  std::vector<int> sizes(static_cast<std::size_t>(n / 8), 8);
  const auto seg = nn::Segments::from_sizes(sizes);
  for (auto _ : state) {
    nn::Graph g;
    auto out = nn::attention(g.param(q), g.param(k), g.param(v), 4, {&seg, nullptr});
    g.backward(nn::sum(out));
  }
}
BENCHMARK(BM_AttentionForwardBackward)->Arg(64)->Arg(512);

static void BM_LoadCatalog(benchmark::State& state) {
  const auto path = default_catalog_path();
  for (auto _ : state) benchmark::DoNotOptimize(load_catalog(path));
}
BENCHMARK(BM_LoadCatalog)->Unit(benchmark::kMillisecond);

static void BM_SymmetrizeSite(benchmark::State& state) {
  const auto& w = cat().wyckoff(221, 'h');
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0, 1);
  for (auto _ : state) benchmark::DoNotOptimize(symmetrize_site(w, Vec3{u(rng), u(rng), u(rng)}));
}
BENCHMARK(BM_SymmetrizeSite);

static void BM_ExpandAsu(benchmark::State& state) {
  const auto data = synthetic_dataset(cat(), 64, 7);
  std::size_t i = 0;
  for (auto _ : state) benchmark::DoNotOptimize(expand_asu(data[i++ % data.size()], cat()));
}
BENCHMARK(BM_ExpandAsu);

static void BM_StructureMatch(benchmark::State& state) {
  const auto data = synthetic_dataset(cat(), 32, 8);
  std::vector<FullCrystal> full;
  for (const auto& c : data) full.push_back(expand_asu(c, cat()).crystal);
  std::size_t i = 0;
  for (auto _ : state) {
    const auto& s = full[i++ % full.size()];
    benchmark::DoNotOptimize(structure_match(s, s));
  }
}
BENCHMARK(BM_StructureMatch);

static void BM_Wasserstein(benchmark::State& state) {
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<int> d(1, 100);
  std::vector<int> a(10000), b(10000);
  for (auto& x : a) x = d(rng);
  for (auto& x : b) x = d(rng);
  for (auto _ : state) benchmark::DoNotOptimize(wasserstein_1(a, b));
}
BENCHMARK(BM_Wasserstein)->Unit(benchmark::kMillisecond);

static void BM_AutoencoderStep(benchmark::State& state) {
  const auto data = synthetic_dataset(cat(), 32, 2024);
  Autoencoder model(bench_ae(), cat());
  std::int64_t until = 0;
  for (auto _ : state) train_autoencoder(model, data, ++until);
}
BENCHMARK(BM_AutoencoderStep)->Unit(benchmark::kMillisecond);

static void BM_DenoiserCall(benchmark::State& state) {
  FMConfig cfg = FMConfig::desk();
  FlowModel fm(cfg);
  const int crystals = static_cast<int>(state.range(0));
  std::vector<int> sizes(static_cast<std::size_t>(crystals), 4);
  const auto seg = nn::Segments::from_sizes(sizes);
  const Tensor z = rnd(seg.rows(), cfg.latent_dim, 10), sc = Tensor::Zero(seg.rows(), cfg.latent_dim);
  const std::vector<int> cond(static_cast<std::size_t>(crystals), 225);
  const auto denoise = model_denoiser(fm);
  for (auto _ : state) benchmark::DoNotOptimize(denoise(z, seg, 0.5, sc, cond));
}
BENCHMARK(BM_DenoiserCall)->Arg(16)->Arg(256)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
