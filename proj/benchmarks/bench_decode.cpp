#include <benchmark/benchmark.h>

#include <vector>

#include "viti/analysis.hpp"
#include "viti/runtime.hpp"
#include "viti/vri.hpp"

using namespace viti;

namespace {

ModelConfig toy_config() {
    ModelConfig c;
    c.vocab_size = 41;
    c.max_seq = 272;
    c.visual_scale = 100.0f;
    return c;
}

ProbeBank random_bank(const Model& m, std::uint64_t seed) {
    const auto& c = m.config();
    Rng rng(seed);
    std::vector<Probe> probes;
    for (std::uint32_t l = 0; l < c.layers; ++l) {
        for (std::uint32_t h = 0; h < c.heads; ++h) {
            Probe p;
            p.layer = l;
            p.head = h;
            for (std::size_t k = 0; k < c.head_dim; ++k) p.theta.push_back(static_cast<float>(rng.normal()));
            p.bias = 1.0f;
            p.val_accuracy = static_cast<float>(rng.uniform());
            probes.push_back(p);
        }
    }
    return ProbeBank(c.layers, c.heads, c.head_dim, m.fingerprint(), ProbeHyper{}, probes);
}

Prompt random_prompt(std::size_t len, std::uint32_t vocab, std::uint64_t seed) {
    Rng rng(seed);
    Prompt p;
    for (std::size_t i = 0; i < len; ++i) p.tokens.push_back(static_cast<int>(rng.uniform_int(0, vocab - 1)));
    p.span = {0, len / 2};
    return p;
}

constexpr std::size_t kNewTokens = 16;

void BM_DecodeGreedy(benchmark::State& state) {
    const Model m = Model::random(toy_config(), 1);
    const auto prompt = random_prompt(static_cast<std::size_t>(state.range(0)) - kNewTokens, 41, 2);
    DecodeOptions d;
    d.record_timing = false;
    for (auto _ : state) benchmark::DoNotOptimize(decode_greedy(m, prompt, kNewTokens, d));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(kNewTokens));
}

void BM_VitiGenerate(benchmark::State& state) {
    const Model m = Model::random(toy_config(), 1);
    const ProbeBank bank = random_bank(m, 3);
    const auto prompt = random_prompt(static_cast<std::size_t>(state.range(0)) - kNewTokens, 41, 2);
    InterventionConfig cfg;
    cfg.beta = static_cast<double>(state.range(1)) / 100.0;
    for (auto _ : state) benchmark::DoNotOptimize(viti_generate(m, prompt, bank, cfg, kNewTokens));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(kNewTokens));
}

void BM_MatMul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    Rng rng(5);
    Matrix a(n, n), b(n, n);
    for (float& v : a.data()) v = static_cast<float>(rng.normal());
    for (float& v : b.data()) v = static_cast<float>(rng.normal());
    for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
}

void BM_MutualInformation(benchmark::State& state) {
    Rng rng(6);
    std::vector<double> x(static_cast<std::size_t>(state.range(0))), y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        x[i] = rng.normal();
        y[i] = 0.5 * x[i] + rng.normal();
    }
    analysis::MIOptions o;
    o.resamples = 0;
    for (auto _ : state) benchmark::DoNotOptimize(analysis::mi_binned(x, y, o));
}

} // namespace

BENCHMARK(BM_DecodeGreedy)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_VitiGenerate)->Args({64, 10})->Args({256, 10})->Args({256, 100})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_MatMul)->Arg(64)->Arg(256);
BENCHMARK(BM_MutualInformation)->Arg(2000)->Arg(20000);
BENCHMARK_MAIN();
