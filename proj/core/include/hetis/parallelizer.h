#pragma once

#include <string>
#include <utility>
#include <vector>

#include "hetis/cluster.h"

namespace hetis {

// One TP group of same-kind primaries holding a contiguous layer range.
struct StageGroup {
  std::vector<DeviceId> devices;
  int layer_begin = 0;
  int layer_end = 0;
  int worker_count = 0;  // primaries of this stage plus the instance's attention workers

  int layers() const { return layer_end - layer_begin; }
  int tp() const { return static_cast<int>(devices.size()); }
};

struct InstancePlan {
  std::vector<StageGroup> stages;
  std::vector<DeviceId> attention_workers;

  std::vector<DeviceId> primaries() const;
  std::vector<DeviceId> all_devices() const;
};

struct ParallelPlan {
  std::vector<InstancePlan> instances;

  int primary_count() const;
  // Throws InvalidArgument naming the first broken invariant.
  void validate(const ClusterSpec& cluster, const ModelSpec& model) const;
};

struct PlanCost {
  double total = 0.0;
  double comm = 0.0;
  double comp = 0.0;
  double stage_max = 0.0;
};

// Which part of a request's life the dense cost covers.
enum class CostPhase { kFull, kPrefill, kDecode };

struct SearchOptions {
  double delta = 0.05;
  double mem_util = 0.9;  // usable fraction of device memory
};

// Dense FLOPs of one layer for `tokens` tokens.
double layer_flops(const ModelSpec& model, double tokens);

// Compute seconds per layer of one stage under `load`, ideal TP scaling.
double stage_layer_seconds(const std::vector<DeviceId>& devices, const ClusterSpec& cluster,
                           const ModelSpec& model, const WorkloadProfile& load,
                           CostPhase phase = CostPhase::kFull);

PlanCost instance_cost(const InstancePlan& instance, const ClusterSpec& cluster,
                       const ModelSpec& model, const WorkloadProfile& load,
                       CostPhase phase = CostPhase::kFull);

// Every instance runs the full load; the plan costs as much as its slowest
// instance.
PlanCost dense_cost(const ParallelPlan& plan, const ClusterSpec& cluster, const ModelSpec& model,
                    const WorkloadProfile& load, CostPhase phase = CostPhase::kFull);

// Exact min-max contiguous split: layer counts per stage, each >= 1 and at
// most caps[k] (no cap when caps is empty). Throws Infeasible when no split
// exists.
std::vector<int> split_layers(const std::vector<double>& per_layer_seconds, int n_layers,
                              const std::vector<int>& caps = {});

// Largest layer count a stage's usable memory can hold.
int layer_capacity(const std::vector<DeviceId>& devices, const ClusterSpec& cluster,
                   const ModelSpec& model, double mem_util);

// Sets layer ranges on `stages` in order and returns the resulting max
// per-stage compute time.
double assign_layers(std::vector<StageGroup>& stages, const ClusterSpec& cluster,
                     const ModelSpec& model, const WorkloadProfile& load,
                     const SearchOptions& opts = {});

// Moves primaries into the attention pool, lowest-end first, while each
// removal raises the instance's max stage compute time by at most 1 + delta.
// Expects one stage per device kind; stages that lose every device vanish.
InstancePlan prune_attention_workers(const InstancePlan& instance, const ClusterSpec& cluster,
                                     const ModelSpec& model, const WorkloadProfile& load,
                                     const SearchOptions& opts = {});

// Total KV bytes the load needs: mean_batch x (prompt + output) tokens over
// all heads and layers.
double kv_demand_bytes(const ModelSpec& model, const WorkloadProfile& load);

struct SearchReport {
  ParallelPlan plan;
  PlanCost cost;
  int dp_degree = 1;
  int candidates = 0;
};

// Enumerates DP degrees, prunes, and searches TP x PP per stage; returns the
// cheapest candidate (ties: fewer primaries, then lower DP degree).
SearchReport search_plan(const ClusterSpec& cluster, const ModelSpec& model,
                         const WorkloadProfile& load, const SearchOptions& opts = {});

// One instance over exactly `devices`: a stage per device kind, optional
// pruning, then the TP x PP sub-search. Throws Infeasible when the
// parameters do not fit.
std::pair<InstancePlan, PlanCost> plan_instance(const std::vector<DeviceId>& devices,
                                                const ClusterSpec& cluster, const ModelSpec& model,
                                                const WorkloadProfile& load, bool prune,
                                                const SearchOptions& opts = {});

}  // namespace hetis
