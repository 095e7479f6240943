// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include "dlab/datagen.hpp"
#include "dlab/distill.hpp"
#include "dlab/net.hpp"
#include "dlab/risk.hpp"
#include "dlab/rng.hpp"

namespace {

using namespace dlab;

net::ArchSpec teacher_arch() {
  net::ArchSpec arch;
  arch.window = {4, 4, 3};
  arch.feature_dim = 16;
  arch.hidden_layers = {64, 64, 64, 64, 64};
  arch.num_classes = 32;
  arch.name = "teacher";
  return arch;
}

Matrix random_inputs(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Matrix m(rows, cols);
  Rng rng(seed);
  for (double& v : m.data) v = rng.normal();
  return m;
}

void BM_ForwardBatch(benchmark::State& state) {
  const auto arch = teacher_arch();
  const auto params = net::init_params(arch, 1);
  const Matrix inputs = random_inputs(static_cast<std::size_t>(state.range(0)),
                                      static_cast<std::size_t>(arch.input_dim()), 2);
  for (auto _ : state) {
    benchmark::DoNotOptimize(net::forward_logits_batch(params, inputs));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ForwardBatch)->Arg(256)->Arg(2048);

void BM_SgdStep(benchmark::State& state) {
  const auto arch = teacher_arch();
  auto params = net::init_params(arch, 1);
  const auto batch = static_cast<std::size_t>(state.range(0));
  const Matrix inputs = random_inputs(batch, static_cast<std::size_t>(arch.input_dim()), 3);
  net::Targets targets;
  Rng rng(4);
  for (std::size_t r = 0; r < batch; ++r) {
    targets.add_hard(static_cast<std::int32_t>(rng.below(32)));
  }
  for (auto _ : state) {
    net::detail::sgd_step(params, inputs, targets, 1e-6, nullptr);
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_SgdStep)->Arg(32)->Arg(128);

void BM_CompressDecompress(benchmark::State& state) {
  Rng rng(5);
  std::vector<std::vector<double>> posteriors;
  for (int i = 0; i < 256; ++i) {
    std::vector<double> p(32);
    double sum = 0.0;
    for (double& v : p) {
      v = -std::log(1.0 - rng.uniform());
      sum += v;
    }
    for (double& v : p) v /= sum;
    posteriors.push_back(std::move(p));
  }
  for (auto _ : state) {
    for (const auto& p : posteriors) {
      benchmark::DoNotOptimize(distill::decompress(distill::compress_posterior(p, 4, 8)));
    }
  }
  state.SetItemsProcessed(state.iterations() * 256);
}
BENCHMARK(BM_CompressDecompress);

void BM_StackInputs(benchmark::State& state) {
  const Matrix frames = random_inputs(1000, 16, 6);
  const data::WindowSpec window{4, 4, 3};
  for (auto _ : state) {
    benchmark::DoNotOptimize(data::stack_inputs(frames, window));
  }
  state.SetItemsProcessed(state.iterations() * 1000);
}
BENCHMARK(BM_StackInputs);

void BM_GenerateCorpus(benchmark::State& state) {
  const auto spec = data::make_hmm(32, 16, 0.88, 0.5, 0.9, 1.1, 0.7, 1);
  for (auto _ : state) {
    benchmark::DoNotOptimize(data::generate_corpus(spec, 32, {80, 120}, 7));
  }
}
BENCHMARK(BM_GenerateCorpus);

void BM_ExhaustiveVerify(benchmark::State& state) {
  for (auto _ : state) {
    benchmark::DoNotOptimize(risk::exhaustive_verify(static_cast<int>(state.range(0))));
  }
}
BENCHMARK(BM_ExhaustiveVerify)->Arg(4)->Arg(6);

}  // namespace

BENCHMARK_MAIN();
