#include <benchmark/benchmark.h>
#include <omp.h>

#include "icl/datagen.hpp"
#include "icl/gradients.hpp"
#include "icl/net.hpp"
#include "icl/reference.hpp"

using namespace icl;

namespace {

struct Fixture {
  datagen::DataConfig data;
  net::ModelConfig model;
  std::vector<datagen::Episode> batch;

  explicit Fixture(int batch_size, net::PosEncoding pe = net::PosEncoding::APE) {
    data.seq = {8, 4, datagen::Modality::Unimodal};
    data.m1 = {1024, 64, 0.1, 0.0, 0};
    model.d_model = 64;
    model.d_mlp = 256;
    model.pe = pe;
    model.n_labels = data.L1;
    model.max_T = data.sequence_length();
    model.zero_init_classifier = false;
    datagen::Task task(data, 0);
    batch = datagen::build_batch(task, datagen::EvalMode::Train, batch_size, 0, streams::kTrainData, 0);
  }
};

// Serial per-episode reference decoder (double precision).
void BM_ReferenceForward(benchmark::State& state) {
  Fixture f(static_cast<int>(state.range(0)));
  const auto p = net::init_params(f.model, 0).cast<double>();
  for (auto _ : state)
    for (const auto& ep : f.batch) benchmark::DoNotOptimize(reference::forward(p, f.model, ep, {}));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

// Batched kernel in double precision, thread count from the second argument.
void BM_BatchForwardF64(benchmark::State& state) {
  Fixture f(static_cast<int>(state.range(0)));
  const auto p = net::init_params(f.model, 0).cast<double>();
  omp_set_num_threads(static_cast<int>(state.range(1)));
  net::BatchPass<double> pass(p, f.model);
  for (auto _ : state) benchmark::DoNotOptimize(pass.forward(f.batch, {}).data());
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_BatchForwardF32(benchmark::State& state) {
  Fixture f(static_cast<int>(state.range(0)));
  const auto p = net::init_params(f.model, 0);
  omp_set_num_threads(static_cast<int>(state.range(1)));
  net::BatchPass<float> pass(p, f.model);
  for (auto _ : state) benchmark::DoNotOptimize(pass.forward(f.batch, {}).data());
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

// One training step's loss and gradients.
void BM_LossAndGrads(benchmark::State& state) {
  Fixture f(static_cast<int>(state.range(0)), net::PosEncoding::RoPE);
  const auto p = net::init_params(f.model, 0);
  const auto mask = trainer::trainable_mask(p, trainer::Stage::UnimodalPretrain);
  omp_set_num_threads(static_cast<int>(state.range(1)));
  for (auto _ : state) benchmark::DoNotOptimize(trainer::loss_and_grads<float>(p, f.model, f.batch, mask).loss);
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void thread_args(benchmark::internal::Benchmark* b) {
  const int hw = omp_get_num_procs();
  for (int bs : {16, 64})
    for (int t = 1; t <= hw; t *= 2) b->Args({bs, t});
}

}  // namespace

BENCHMARK(BM_ReferenceForward)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_BatchForwardF64)->Apply(thread_args)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_BatchForwardF32)->Apply(thread_args)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_LossAndGrads)->Apply(thread_args)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
