#include <benchmark/benchmark.h>

#include <random>

#include "hetis/dispatcher.h"
#include "hetis/hauler.h"
#include "hetis/profiles.h"

namespace {

using namespace hetis;

// One A100 primary plus `workers` 3090 attention workers, `resident`
// decode requests already placed round-robin.
struct Stage {
  StageCosts costs;
  DispatchRound round;
  std::vector<RequestState> resident;

  Stage(int workers, int resident_count, int new_count) {
    const ModelSpec m = profiles::llama_13b();
    costs.n_heads = m.n_query_heads;
    costs.gqa_ratio = m.gqa_ratio;
    for (int i = 0; i <= workers; ++i) {
      const DeviceSpec d = profiles::device(i == 0 ? "A100" : "3090", i, 0, m);
      costs.workers.push_back({d.attn_cost, d.xfer_cost});
      round.states.push_back({i, 0, 0, 4'000'000'000, i == 0});
    }
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<int> len(100, 4000);
    const int n = static_cast<int>(round.states.size());
    for (int j = 0; j < resident_count; ++j) {
      RequestState r;
      r.id = j;
      r.context_len = len(rng);
      r.phase = Phase::kDecode;
      r.allocation.assign(static_cast<std::size_t>(n), 0);
      r.allocation[static_cast<std::size_t>(j % n)] = costs.n_heads;
      apply_allocation(round.states, r, costs.gqa_ratio, +1);
      resident.push_back(r);
    }
    round.in_flight = resident;
    for (int j = 0; j < new_count; ++j) {
      RequestState r;
      r.id = resident_count + j;
      r.context_len = len(rng);
      round.new_requests.push_back(r);
    }
  }
};

void BM_Dispatch(benchmark::State& state) {
  const Stage s(static_cast<int>(state.range(0)), 64, static_cast<int>(state.range(1)));
  for (auto _ : state) benchmark::DoNotOptimize(dispatch(s.round, s.costs));
}
BENCHMARK(BM_Dispatch)->Args({2, 1})->Args({2, 8})->Args({4, 8})->Args({8, 16});

void BM_IdealTime(benchmark::State& state) {
  const Stage s(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)), 0);
  for (auto _ : state) benchmark::DoNotOptimize(ideal_time(s.resident, s.round.states, s.costs));
}
BENCHMARK(BM_IdealTime)->Args({2, 16})->Args({2, 128})->Args({8, 128});

}  // namespace
