#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hetis/cluster.h"
#include "hetis/dispatcher.h"

namespace hetis {

struct HaulerConfig {
  double theta = 0.5;

  void validate() const;
};

struct GroupMove {
  RequestId request = 0;
  int group = 0;
  std::size_t from = 0;  // worker position in the stage
  std::size_t to = 0;
  std::int64_t tokens = 0;
};

struct MigrationPlan {
  std::vector<GroupMove> moves;
  int reused_groups = 0;
  std::int64_t moved_bytes = 0;
};

// Group-to-worker map for a fresh allocation: worker 0 holds the lowest
// group indices, then worker 1, and so on.
std::vector<std::size_t> canonical_owners(std::span<const int> allocation, int gqa_ratio);

// Per worker, min(old, new)/r groups stay. Surplus groups leave in ascending
// group index and fill deficit workers in position order. Bytes cover
// `layers` layers (the whole model when layers <= 0).
MigrationPlan plan_migration(const RequestState& request, std::span<const std::size_t> owners,
                             std::span<const int> new_allocation, const ModelSpec& model,
                             int layers = 0);
MigrationPlan plan_migration(const RequestState& request, std::span<const int> old_allocation,
                             std::span<const int> new_allocation, const ModelSpec& model,
                             int layers = 0);

// Relaxed min-max attention time with every request re-placed and only the
// stage-wide cache budget enforced. Worker loads are rebuilt from `requests`;
// the h and g already in `states` are ignored. Throws Infeasible when the
// requests exceed the aggregate budget.
double ideal_time(std::span<const RequestState> requests, std::span<const DeviceState> states,
                  const StageCosts& costs);

// Share of f_i owed to one request's heads on worker i.
double contribution(const DeviceState& state, const WorkerCost& cost, int gqa_ratio, int heads,
                    std::int64_t context_len);

enum class HaulerStop {
  kNone,          // target reached
  kThresholdGap,  // max f still above (1 + theta) * f*
  kNoImprovement, // re-dispatch could not lower max f
  kMemory,        // no cluster slack for the victim
};

std::string to_string(HaulerStop stop);

struct RebalanceDecision {
  double ideal = 0.0;
  double current = 0.0;
  std::optional<RequestId> victim;
  std::size_t victim_index = 0;  // position in the request span
  std::vector<int> new_allocation;
  MigrationPlan migration;
  double new_objective = 0.0;
  bool changed = false;  // new_allocation differs from the old one
  HaulerStop stop = HaulerStop::kNone;
};

enum class MemoryAction { kRedispatch, kEvict };

struct MemoryDecision {
  MemoryAction action = MemoryAction::kEvict;
  RequestId victim = 0;
  std::size_t victim_index = 0;
  std::vector<int> new_allocation;  // empty on eviction
  MigrationPlan migration;
  double ideal = 0.0;  // 0 when the aggregate budget is already exhausted
  double new_objective = 0.0;
  HaulerStop stop = HaulerStop::kNone;
};

// Re-dispatching policy for one stage. Remembers the ratio left by its last
// firing so that an unchanged state does not trigger twice.
class Hauler {
 public:
  // `layers` is the number of layers whose cache a migration moves.
  Hauler(HaulerConfig cfg, ModelSpec model, int layers);

  const HaulerConfig& config() const { return cfg_; }

  // Fires when max f > (1 + theta) * f*. The victim is the request with the
  // largest contribution on the bottleneck worker; its heads are released
  // and re-dispatched over all workers. The caller applies the decision.
  // Migration group indices assume the canonical layout of the old
  // allocation.
  std::optional<RebalanceDecision> maybe_rebalance(std::span<const RequestState> requests,
                                                   std::span<const DeviceState> states,
                                                   const StageCosts& costs, double f_star);

  // Worker `exhausted` cannot hold the next token of a request. Picks the
  // latest-arrival request resident there and either re-dispatches it off
  // that worker (cluster slack exists and max f stays within
  // (1 + theta) * f*) or evicts it.
  MemoryDecision relieve_memory(std::size_t exhausted, std::span<const DeviceState> states,
                                std::span<const RequestState> requests, const StageCosts& costs,
                                std::optional<double> f_star = std::nullopt) const;

  // The caller could not apply the last decision: the stage stays at
  // `ratio` (current over ideal) and must not fire again until it rises.
  void disarm_at(double ratio) { disarm_ratio_ = ratio; }

  void reset() { disarm_ratio_.reset(); }

 private:
  HaulerConfig cfg_;
  ModelSpec model_;
  int layers_;
  std::optional<double> disarm_ratio_;
};

// Moves `request` from its current allocation to `new_allocation` in the
// states and records it on the request.
void reassign(std::span<DeviceState> states, RequestState& request,
              std::span<const int> new_allocation, int gqa_ratio);

}  // namespace hetis
