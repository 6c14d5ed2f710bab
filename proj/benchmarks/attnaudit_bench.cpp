#include <benchmark/benchmark.h>

#include <vector>

#include "attnaudit/counterfactual.hpp"
#include "attnaudit/metrics.hpp"
#include "attnaudit/model.hpp"
#include "attnaudit/random.hpp"
#include "attnaudit/training.hpp"

namespace {

using namespace attnaudit;

constexpr std::size_t kVocab = 500;

Model desk_model(EncoderKind encoder) {
  ModelConfig c = model_preset("desk", encoder);
  c.vocab_size = kVocab;
  return init_model(c);
}

std::vector<TokenId> tokens_of_length(std::size_t n, std::uint64_t seed = 1) {
  Rng rng(seed);
  std::vector<TokenId> out(n);
  for (auto& t : out) t = rng.below(kVocab);
  return out;
}

void encoder_args(benchmark::internal::Benchmark* b) {
  for (int e = 0; e < 3; ++e) {
    for (int len : {20, 100}) b->Args({e, len});
  }
}

EncoderKind encoder_arg(const benchmark::State& state) { return static_cast<EncoderKind>(state.range(0)); }

void BM_Forward(benchmark::State& state) {
  const Model model = desk_model(encoder_arg(state));
  const auto tokens = tokens_of_length(static_cast<std::size_t>(state.range(1)));
  for (auto _ : state) benchmark::DoNotOptimize(forward(model, tokens));
  state.SetLabel(std::string(encoder_name(encoder_arg(state))));
}
BENCHMARK(BM_Forward)->Apply(encoder_args);

void BM_ForwardBackward(benchmark::State& state) {
  const Model model = desk_model(encoder_arg(state));
  const auto tokens = tokens_of_length(static_cast<std::size_t>(state.range(1)));
  ForwardOptions options;
  options.params_require_grad = true;
  for (auto _ : state) {
    ad::Graph graph;
    const ForwardGraph fg = build_forward(graph, model, tokens, {}, options);
    std::vector<ad::Var> params;
    for (const auto& [name, var] : fg.params) params.push_back(var);
    graph.backward(loss(fg.output, 1, params, 1e-5));
    benchmark::DoNotOptimize(fg.output.value());
  }
  state.SetLabel(std::string(encoder_name(encoder_arg(state))));
}
BENCHMARK(BM_ForwardBackward)->Apply(encoder_args);

std::pair<std::vector<double>, std::vector<double>> rank_inputs(std::size_t n) {
  Rng rng(7);
  std::vector<double> a(n), b(n);
  for (auto& v : a) v = rng.uniform();
  for (auto& v : b) v = static_cast<double>(rng.below(n / 4 + 1));
  return {a, b};
}

void BM_KendallBruteForce(benchmark::State& state) {
  const auto [a, b] = rank_inputs(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(kendall_tau(a, b));
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_KendallBruteForce)->RangeMultiplier(4)->Range(16, 4096)->Complexity();

void BM_KendallKnight(benchmark::State& state) {
  const auto [a, b] = rank_inputs(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(kendall_tau_fast(a, b));
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_KendallKnight)->RangeMultiplier(4)->Range(16, 4096)->Complexity();

void BM_Permutation(benchmark::State& state) {
  const Model model = desk_model(EncoderKind::kBiRNN);
  const ForwardTrace trace = forward(model, tokens_of_length(static_cast<std::size_t>(state.range(0))));
  for (auto _ : state) benchmark::DoNotOptimize(permutation_experiment(model, trace, kDefaultPermutations, 1));
}
BENCHMARK(BM_Permutation)->Arg(20)->Arg(100);

void BM_AdversarialSearch(benchmark::State& state) {
  const Model model = desk_model(EncoderKind::kBiRNN);
  const ForwardTrace trace = forward(model, tokens_of_length(static_cast<std::size_t>(state.range(0))));
  AdversarialConfig config;
  std::size_t iterations = 0;
  for (auto _ : state) {
    const AdversarialResult r = adversarial_search(model, trace, config, 1);
    iterations = r.iterations;
    benchmark::DoNotOptimize(r.eps_max_jsd);
  }
  state.counters["search_iterations"] = static_cast<double>(iterations);
}
BENCHMARK(BM_AdversarialSearch)->Arg(20)->Arg(100)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
