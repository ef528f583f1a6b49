#include <benchmark/benchmark.h>
#include <spdlog/spdlog.h>

#include <vector>

#include "clbd/attack.hpp"
#include "clbd/cl.hpp"
#include "clbd/loss.hpp"

namespace {

clbd::LabeledDataset blobs(std::size_t per_class) { return clbd::synth_blobs(1, 2, 784, per_class, 0.2, 0.1); }

clbd::MlpModel model(std::size_t width) {
  const std::vector<std::size_t> hidden{width, width};
  clbd::MlpModel m = clbd::make_mlp(784, hidden, 1);
  clbd::add_head(m, 2, 2);
  return m;
}

void BM_ForwardBackward(benchmark::State& state) {
  const auto width = static_cast<std::size_t>(state.range(0));
  const auto m = model(width);
  const auto ds = blobs(64);
  for (auto _ : state) {
    auto r = clbd::task_loss(m, ds.x, ds.y, 0);
    benchmark::DoNotOptimize(r.loss);
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(ds.size()));
}
BENCHMARK(BM_ForwardBackward)->Arg(100)->Arg(256)->Arg(400)->Unit(benchmark::kMillisecond);

void BM_AdamStep(benchmark::State& state) {
  auto m = model(400);
  const auto g = clbd::zeros_like(m);
  clbd::AdamState st;
  for (auto _ : state) clbd::adam_step(m, g, st);
}
BENCHMARK(BM_AdamStep)->Unit(benchmark::kMillisecond);

void BM_TrainEpoch(benchmark::State& state) {
  const clbd::ClStrategy strategies[] = {clbd::Ewc{}, clbd::Lwf{}, clbd::Agem{}};
  const auto& strategy = strategies[state.range(0)];
  const auto ds = blobs(300);
  const auto [train, test] = clbd::split_per_class(ds, 256);
  const clbd::Task task{train, test, {0, 1}};
  clbd::TrainOptions o;
  o.epochs = 1;
  for (auto _ : state) {
    state.PauseTiming();
    auto m = clbd::make_mlp(784, std::vector<std::size_t>{400, 400}, 3);
    clbd::ClState st;
    // A finished first task so the strategy terms are active.
    clbd::train_task(m, task, 0, strategy, st, o);
    state.ResumeTiming();
    clbd::train_task(m, task, 1, strategy, st, o);
  }
  state.SetLabel(clbd::strategy_name(strategy));
}
BENCHMARK(BM_TrainEpoch)->DenseRange(0, 2)->Unit(benchmark::kMillisecond);

void BM_Dfm(benchmark::State& state) {
  const auto m = model(400);
  const auto ds = blobs(256);
  for (auto _ : state) benchmark::DoNotOptimize(clbd::compute_dfm(m, ds, 0).scores.data());
}
BENCHMARK(BM_Dfm)->Unit(benchmark::kMillisecond);

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_level(spdlog::level::warn);
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
