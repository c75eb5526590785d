#pragma once

#include <string>
#include <vector>

#include "hetis/cluster.h"

namespace hetis::profiles {

// Default links: PCIe-class inside a host, 100 Gbps LAN across hosts.
NetworkLink intra_host_link();
NetworkLink inter_host_link();

// Built-in device kinds: "A100", "3090", "P100". Memory and the ratios between
// the dense rates follow the measured prefill (1 : 2.45 : 24.5) and decode
// (1 : 1.47 : 7.93) iteration times of the three cards. Attention and
// transfer parameters are per layer and scale with the model's KV vector size.
bool is_known_kind(const std::string& kind);
DeviceSpec device(const std::string& kind, DeviceId id, int host_id, const ModelSpec& model);

ModelSpec llama_13b();
ModelSpec opt_30b();
ModelSpec llama_70b();
ModelSpec opt_2_7b();
// Throws InvalidArgument for unknown names.
ModelSpec model_by_name(const std::string& name);

// Host 0: 4x A100, hosts 1-2: 2x 3090 each, host 3: 4x P100.
ClusterSpec default_cluster(const ModelSpec& model);

// One A100 on host 0 and two 3090s on host 1.
ClusterSpec a100_two_3090(const ModelSpec& model);

}  // namespace hetis::profiles
