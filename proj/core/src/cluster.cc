#include "hetis/cluster.h"

#include <algorithm>
#include <limits>
#include <string>

#include "hetis/errors.h"

namespace hetis {

void DeviceSpec::validate() const {
  if (mem_total <= 0) {
    throw InvalidArgument("device " + std::to_string(id) + ": mem_total must be > 0");
  }
  if (!(dense_rate > 0.0)) {
    throw InvalidArgument("device " + std::to_string(id) + ": dense_rate must be > 0");
  }
  if (decode_rate < 0.0) {
    throw InvalidArgument("device " + std::to_string(id) + ": decode_rate must be >= 0");
  }
  attn_cost.validate();
  xfer_cost.validate();
}

void ModelSpec::validate() const {
  if (n_layers < 1 || n_query_heads < 1 || gqa_ratio < 1 || head_dim < 1 || hidden_dim < 1) {
    throw InvalidArgument("model " + name + ": all counts must be >= 1");
  }
  if (n_query_heads % gqa_ratio != 0) {
    throw InvalidArgument("model " + name + ": n_query_heads must be a multiple of gqa_ratio");
  }
  if (hidden_dim != n_query_heads * head_dim) {
    throw InvalidArgument("model " + name + ": hidden_dim must equal n_query_heads * head_dim");
  }
  if (param_bytes < 1 || kv_bytes_per_head_token < 1 || value_bytes < 1) {
    throw InvalidArgument("model " + name + ": byte sizes must be >= 1");
  }
}

void NetworkLink::validate() const {
  if (!(bandwidth > 0.0)) throw InvalidArgument("link bandwidth must be > 0");
  if (latency < 0.0) throw InvalidArgument("link latency must be >= 0");
}

void WorkloadProfile::validate() const {
  if (!(mean_prompt_len > 0.0) || !(mean_output_len > 0.0) || !(mean_batch > 0.0)) {
    throw InvalidArgument("workload profile fields must be strictly positive");
  }
}

ClusterSpec::ClusterSpec(std::vector<DeviceSpec> devices, std::vector<NetworkLink> links)
    : devices_(std::move(devices)), links_(std::move(links)) {
  validate();
}

ClusterSpec ClusterSpec::from_hosts(std::vector<DeviceSpec> devices, NetworkLink intra,
                                    NetworkLink inter) {
  const std::size_t n = devices.size();
  std::vector<NetworkLink> links(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      links[i * n + j] = devices[i].host_id == devices[j].host_id ? intra : inter;
    }
  }
  return ClusterSpec(std::move(devices), std::move(links));
}

void ClusterSpec::validate() const {
  const std::size_t n = devices_.size();
  if (links_.size() != n * n) {
    throw InvalidArgument("link table must define every device pair");
  }
  for (std::size_t i = 0; i < n; ++i) {
    devices_[i].validate();
    for (std::size_t j = i + 1; j < n; ++j) {
      if (devices_[i].id == devices_[j].id) {
        throw InvalidArgument("duplicate device id " + std::to_string(devices_[i].id));
      }
      const NetworkLink& ab = links_[i * n + j];
      const NetworkLink& ba = links_[j * n + i];
      ab.validate();
      if (ab.bandwidth != ba.bandwidth || ab.latency != ba.latency) {
        throw InvalidArgument("link table is not symmetric for devices " +
                              std::to_string(devices_[i].id) + " and " +
                              std::to_string(devices_[j].id));
      }
    }
  }
}

std::size_t ClusterSpec::index_of(DeviceId id) const {
  for (std::size_t i = 0; i < devices_.size(); ++i) {
    if (devices_[i].id == id) return i;
  }
  throw InvalidArgument("unknown device id " + std::to_string(id));
}

const DeviceSpec& ClusterSpec::device(DeviceId id) const { return devices_[index_of(id)]; }

const NetworkLink& ClusterSpec::link(DeviceId a, DeviceId b) const {
  return links_[index_of(a) * devices_.size() + index_of(b)];
}

NetworkLink ClusterSpec::slowest_link(const std::vector<DeviceId>& ids) const {
  NetworkLink worst{std::numeric_limits<double>::infinity(), 0.0};
  for (std::size_t i = 0; i < ids.size(); ++i) {
    for (std::size_t j = i + 1; j < ids.size(); ++j) {
      const NetworkLink& l = link(ids[i], ids[j]);
      if (l.bandwidth < worst.bandwidth ||
          (l.bandwidth == worst.bandwidth && l.latency > worst.latency)) {
        worst = l;
      }
    }
  }
  return worst;
}

std::int64_t kv_bytes(const ModelSpec& model, std::int64_t query_heads, std::int64_t tokens) {
  if (query_heads < 0 || tokens < 0) {
    throw InvalidArgument("kv_bytes: head and token counts must be non-negative");
  }
  if (query_heads % model.gqa_ratio != 0) {
    throw InvalidArgument("kv_bytes: query_heads must be a multiple of gqa_ratio");
  }
  return 2 * model.kv_bytes_per_head_token * tokens * (query_heads / model.gqa_ratio);
}

}  // namespace hetis
