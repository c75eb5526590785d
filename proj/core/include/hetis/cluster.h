#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hetis/profiler.h"

namespace hetis {

using DeviceId = int;

struct DeviceSpec {
  DeviceId id = 0;
  std::string kind;
  std::int64_t mem_total = 0;  // bytes
  AttentionCostParams attn_cost;
  TransferCostParams xfer_cost;
  double dense_rate = 0.0;   // effective FLOP/s on prompt (prefill) tokens
  double decode_rate = 0.0;  // effective FLOP/s on decode tokens; 0 means dense_rate
  int host_id = 0;

  double effective_decode_rate() const { return decode_rate > 0.0 ? decode_rate : dense_rate; }
  void validate() const;
};

struct ModelSpec {
  std::string name;
  int n_layers = 1;
  int n_query_heads = 1;  // H
  int gqa_ratio = 1;      // r: query heads per KV head
  int head_dim = 1;
  int hidden_dim = 1;
  std::int64_t param_bytes = 1;
  std::int64_t kv_bytes_per_head_token = 2;  // one K or one V vector, one KV head, one token
  int value_bytes = 2;                       // activation element size

  int kv_groups() const { return n_query_heads / gqa_ratio; }
  double layer_param_bytes() const {
    return static_cast<double>(param_bytes) / static_cast<double>(n_layers);
  }
  void validate() const;
};

struct NetworkLink {
  double bandwidth = 1.0;  // bytes/s
  double latency = 0.0;    // seconds

  double transfer_seconds(double bytes) const { return bytes / bandwidth + latency; }
  void validate() const;
};

class ClusterSpec {
 public:
  ClusterSpec() = default;
  // `links` is a dense row-major n x n table indexed by position in `devices`.
  ClusterSpec(std::vector<DeviceSpec> devices, std::vector<NetworkLink> links);

  // Links derived from host ids: `intra` within a host, `inter` across hosts.
  static ClusterSpec from_hosts(std::vector<DeviceSpec> devices, NetworkLink intra,
                                NetworkLink inter);

  const std::vector<DeviceSpec>& devices() const { return devices_; }
  std::size_t size() const { return devices_.size(); }

  // Lookup by device id.
  const DeviceSpec& device(DeviceId id) const;
  std::size_t index_of(DeviceId id) const;
  const NetworkLink& link(DeviceId a, DeviceId b) const;

  // Slowest (lowest-bandwidth) link among all pairs in `ids`; the zero-latency
  // infinite link when fewer than two devices are given.
  NetworkLink slowest_link(const std::vector<DeviceId>& ids) const;

  void validate() const;

 private:
  std::vector<DeviceSpec> devices_;
  std::vector<NetworkLink> links_;
};

struct WorkloadProfile {
  double mean_prompt_len = 1.0;
  double mean_output_len = 1.0;
  double mean_batch = 1.0;

  void validate() const;
};

// Bytes of K+V storage for `query_heads` heads over `tokens` tokens in one
// layer. Multiply by the layer count for a whole-model footprint.
std::int64_t kv_bytes(const ModelSpec& model, std::int64_t query_heads, std::int64_t tokens);

}  // namespace hetis
