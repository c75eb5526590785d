#include <benchmark/benchmark.h>

#include "hetis/profiles.h"
#include "hetis/simulator.h"
#include "hetis/workload.h"

namespace {

using namespace hetis;

void BM_Simulate(benchmark::State& state) {
  const ModelSpec m = profiles::llama_13b();
  const ClusterSpec c = profiles::a100_two_3090(m);
  const auto trace = poisson_trace(2.0, 30.0, LengthDist::parse("lognormal:6.5,0.5"),
                                   LengthDist::parse("lognormal:5.5,0.5"), 1);
  SimConfig cfg;
  cfg.policy = static_cast<Policy>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(simulate(c, m, trace, cfg));
  state.SetLabel(to_string(cfg.policy));
  state.counters["requests"] = static_cast<double>(trace.size());
}
BENCHMARK(BM_Simulate)->DenseRange(0, 2)->Unit(benchmark::kMillisecond);

}  // namespace
