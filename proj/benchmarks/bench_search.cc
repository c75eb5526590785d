#include <benchmark/benchmark.h>

#include "hetis/parallelizer.h"
#include "hetis/profiles.h"

namespace {

using namespace hetis;

void BM_SearchDefaultCluster(benchmark::State& state) {
  const ModelSpec m = state.range(0) ? profiles::llama_70b() : profiles::llama_13b();
  const ClusterSpec c = profiles::default_cluster(m);
  const WorkloadProfile load{1024, 512, 16};
  for (auto _ : state) benchmark::DoNotOptimize(search_plan(c, m, load));
}
BENCHMARK(BM_SearchDefaultCluster)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_SplitLayers(benchmark::State& state) {
  const std::vector<double> t{1.0, 1.0 / 0.68, 1.0 / 0.126, 1.3};
  for (auto _ : state) benchmark::DoNotOptimize(split_layers(t, 80));
}
BENCHMARK(BM_SplitLayers);

}  // namespace
