#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "hetis/cluster.h"
#include "hetis/dispatcher.h"
#include "hetis/parallelizer.h"
#include "hetis/workload.h"

namespace hetis {

enum class Policy { kHetis, kPhaseSplit, kParamSplit };

std::string to_string(Policy policy);
// "hetis", "phase_split" or "param_split"; InvalidArgument otherwise.
Policy parse_policy(const std::string& name);

struct SimConfig {
  Policy policy = Policy::kHetis;
  double theta = 0.5;
  double delta = 0.05;
  int block_size = 16;
  double mem_util = 0.9;
  int max_batch = 256;                    // resident requests per instance
  std::int64_t max_prefill_tokens = 16384;  // prompt tokens per prefill iteration
  double plan_batch = 8.0;                // mean batch assumed when searching a plan
  double horizon = std::numeric_limits<double>::infinity();  // simulated seconds
  int max_relieve_steps = 64;             // memory reliefs per token before self-eviction

  void validate() const;
};

enum class RequestStatus { kCompleted, kRejected, kIncomplete };

struct RequestRecord {
  RequestId id = 0;
  TraceEntry entry;
  int instance = -1;
  double first_token = -1.0;  // seconds; -1 when never reached
  double finish = -1.0;
  double ttft = -1.0;
  double tpot = -1.0;
  int evictions = 0;
  RequestStatus status = RequestStatus::kIncomplete;
};

struct IterationSample {
  double start = 0.0;
  double elapsed = 0.0;
  int instance = 0;
  bool prefill = false;
  int batch = 0;
  std::vector<double> stage_max_f;        // per stage, seconds per layer
  std::vector<std::int64_t> attention_heads;  // per stage, heads on attention workers
};

struct RebalanceRecord {
  double time = 0.0;
  int instance = 0;
  int stage = 0;
  RequestId victim = 0;
  double ideal = 0.0;
  double before = 0.0;
  double after = 0.0;
  std::int64_t moved_bytes = 0;
  std::string stop;
  bool applied = false;
};

struct SimSummary {
  std::string policy;
  int instances = 0;
  int requests = 0;
  int completed = 0;
  int rejected = 0;
  int evictions = 0;
  int migrations = 0;
  std::int64_t moved_bytes = 0;
  std::int64_t generated_tokens = 0;
  double makespan = 0.0;
  double throughput = 0.0;  // completed requests per second
  double ttft_p50 = 0.0;
  double ttft_p95 = 0.0;
  double tpot_p50 = 0.0;
  double tpot_p95 = 0.0;
  // A block here is block_size tokens of one KV head group over all layers.
  double peak_cache_blocks = 0.0;
  double cache_capacity_blocks = 0.0;
  int rebalances = 0;
};

struct SimResult {
  SimSummary summary;
  ParallelPlan plan;  // every instance the policy ran, prefill pool first
  std::vector<RequestRecord> requests;
  std::vector<IterationSample> iterations;
  std::vector<RebalanceRecord> rebalances;
  std::vector<std::string> events;  // JSON lines, in simulated order
};

// Runs `trace` to completion (or the horizon). `plan` is used by the hetis
// policy and skips the search; the baselines build their own layouts.
// Throws Infeasible when the model does not fit.
SimResult simulate(const ClusterSpec& cluster, const ModelSpec& model,
                   const std::vector<TraceEntry>& trace, const SimConfig& config,
                   const std::optional<ParallelPlan>& plan = std::nullopt);

// Latency of one iteration: the slowest stage times the number of stages.
double iteration_seconds(const std::vector<double>& stage_seconds);

// Linear interpolation between order statistics; 0 for an empty sample.
double percentile(std::vector<double> values, double q);

std::string requests_csv(const SimResult& result);
std::string summary_json(const SimResult& result);
std::string events_jsonl(const SimResult& result);
// requests.csv, summary.json and events.jsonl inside `dir` (created).
void write_metrics(const SimResult& result, const std::string& dir);

}  // namespace hetis
