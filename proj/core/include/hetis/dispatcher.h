#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hetis/cluster.h"
#include "hetis/profiler.h"

namespace hetis {

using RequestId = std::int64_t;

// Dynamic load of one worker in a pipeline stage. `g` and `budget` are in
// cache units: one K or one V vector of one KV head for one token (one layer).
// A request with x query heads and context l occupies (2/r)*x*l units, so the
// capacity check reads g + added <= budget, with budget already holding the
// r*M/2 scaling.
struct DeviceState {
  DeviceId device = 0;
  std::int64_t h = 0;
  std::int64_t g = 0;
  std::int64_t budget = 0;
  bool is_primary = true;

  std::int64_t free() const { return budget - g; }
};

struct WorkerCost {
  AttentionCostParams attn;
  TransferCostParams xfer;
};

struct StageCosts {
  std::vector<WorkerCost> workers;  // parallel to the DeviceState vector
  int n_heads = 1;                  // H
  int gqa_ratio = 1;                // r
};

enum class Phase { kPrefill, kDecode, kFinished };

struct RequestState {
  RequestId id = 0;
  double arrival = 0.0;
  std::int64_t context_len = 0;
  Phase phase = Phase::kPrefill;
  std::vector<int> allocation;  // query heads per worker; empty when not placed
  std::int64_t remaining_output = 0;

  bool placed() const { return !allocation.empty(); }
};

// x[j][i]: query heads of new request j on worker i.
using HeadAllocation = std::vector<std::vector<int>>;

struct DispatchRound {
  std::vector<RequestState> new_requests;
  std::vector<RequestState> in_flight;
  std::vector<DeviceState> states;
};

struct DispatchObjective {
  std::vector<double> per_device_f;
  double objective = 0.0;
};

struct DispatchResult {
  HeadAllocation x;
  DispatchObjective objective;
  double lp_objective = 0.0;    // relaxation optimum (lower bound)
  double rounding_slack = 0.0;  // bound on objective - lp_objective
};

// Per-head cost coefficient: a for primaries, a + (2 + 2/r)*gamma for
// attention workers.
double head_coefficient(const DeviceState& state, const WorkerCost& cost, int gqa_ratio);

// f_i for a worker after adding `added_heads` heads and `added_units` cache
// units. Attention workers pay beta only while they host at least one head.
double eval_f(const DeviceState& state, const WorkerCost& cost, int gqa_ratio,
              std::int64_t added_heads, std::int64_t added_units);

// f_i with per-request additions: heads[j] query heads at context lens[j].
double eval_f(const DeviceState& state, const WorkerCost& cost, int gqa_ratio,
              std::span<const int> heads, std::span<const std::int64_t> lens);

DispatchObjective current_objective(std::span<const DeviceState> states, const StageCosts& costs);

// Cache units for `heads` query heads over `tokens` tokens.
inline std::int64_t cache_units(std::int64_t heads, std::int64_t tokens, int gqa_ratio) {
  return 2 * (heads / gqa_ratio) * tokens;
}

// Places the heads of every new request (in-flight allocations stay fixed).
// Throws Infeasible when the stage cannot host all new requests.
DispatchResult dispatch(const DispatchRound& round, const StageCosts& costs);

// The literal rounding-slack expression max_i(a_i + (2+2/r)*gamma_i) * r * |J|.
double head_only_slack(const DispatchRound& round, const StageCosts& costs);

// Applies x to the device states and records allocations on the new requests.
// Budget overflow is an InternalError.
void commit(DispatchRound& round, const HeadAllocation& x, int gqa_ratio);

// Adds one request's allocation to (sign = +1) or removes it from (sign = -1)
// the states.
void apply_allocation(std::span<DeviceState> states, const RequestState& request, int gqa_ratio,
                      int sign);

struct TokenFlag {
  RequestId request = 0;
  std::size_t worker = 0;  // first worker lacking budget
};

struct TokenOutcome {
  std::vector<RequestId> grown;
  std::vector<TokenFlag> flagged;
};

// One generated token per decoding request: context_len += 1 and each hosting
// worker's g grows by (2/r)*x. A request whose workers lack budget is left
// untouched and flagged for the hauler.
TokenOutcome on_token(std::span<DeviceState> states, std::span<RequestState> requests,
                      int gqa_ratio);

}  // namespace hetis
