#include "hetis/profiles.h"

#include "hetis/errors.h"

namespace hetis::profiles {
namespace {

constexpr double kGB = 1e9;

// Iteration times of OPT-2.7B (32 layers, hidden 2560) used for calibration:
// a prefill batch of 3 requests and a decode batch of 25 requests.
constexpr double kCalibLayers = 32;
constexpr double kCalibHidden = 2560;
constexpr double kCalibPrefillTokens = 3 * 512;  // assumed 512-token prompts
constexpr double kCalibDecodeTokens = 25;

double rate_from_time(double tokens, double seconds) {
  return 24.0 * tokens * kCalibHidden * kCalibHidden * kCalibLayers / seconds;
}

struct KindProfile {
  const char* kind;
  double mem_gb;
  double prefill_s;
  double decode_s;
  double hbm_bytes_per_s;  // effective bandwidth seen by decode attention
  double per_head_s;
  double fixed_s;
};

constexpr KindProfile kKinds[] = {
    {"A100", 80, 0.06, 0.0097, 1.6e12, 1.5e-7, 4e-6},
    {"3090", 24, 0.147, 0.0143, 7.5e11, 2.5e-7, 6e-6},
    {"P100", 12, 1.47, 0.077, 5.5e11, 4.0e-7, 8e-6},
};

const KindProfile* find_kind(const std::string& kind) {
  for (const auto& k : kKinds) {
    if (kind == k.kind) return &k;
  }
  return nullptr;
}

}  // namespace

NetworkLink intra_host_link() { return {25e9, 5e-6}; }
NetworkLink inter_host_link() { return {12.5e9, 50e-6}; }

bool is_known_kind(const std::string& kind) { return find_kind(kind) != nullptr; }

DeviceSpec device(const std::string& kind, DeviceId id, int host_id, const ModelSpec& model) {
  const KindProfile* k = find_kind(kind);
  if (k == nullptr) throw InvalidArgument("unknown device kind '" + kind + "'");
  const double unit_bytes = static_cast<double>(model.kv_bytes_per_head_token);
  const NetworkLink lan = inter_host_link();
  DeviceSpec d;
  d.id = id;
  d.kind = k->kind;
  d.host_id = host_id;
  d.mem_total = static_cast<std::int64_t>(k->mem_gb * kGB);
  d.dense_rate = rate_from_time(kCalibPrefillTokens, k->prefill_s);
  d.decode_rate = rate_from_time(kCalibDecodeTokens, k->decode_s);
  d.attn_cost = {k->per_head_s, unit_bytes / k->hbm_bytes_per_s, k->fixed_s};
  d.xfer_cost = {unit_bytes / lan.bandwidth, lan.latency};
  return d;
}

ModelSpec llama_13b() {
  return {"llama-13b", 40, 40, 1, 128, 5120, static_cast<std::int64_t>(26 * kGB), 256, 2};
}

ModelSpec opt_30b() {
  return {"opt-30b", 48, 56, 1, 128, 7168, static_cast<std::int64_t>(60 * kGB), 256, 2};
}

ModelSpec llama_70b() {
  return {"llama-70b", 80, 64, 8, 128, 8192, static_cast<std::int64_t>(140 * kGB), 256, 2};
}

ModelSpec opt_2_7b() {
  return {"opt-2.7b", 32, 32, 1, 80, 2560, static_cast<std::int64_t>(5.4 * kGB), 160, 2};
}

ModelSpec model_by_name(const std::string& name) {
  if (name == "llama-13b") return llama_13b();
  if (name == "opt-30b") return opt_30b();
  if (name == "llama-70b") return llama_70b();
  if (name == "opt-2.7b") return opt_2_7b();
  throw InvalidArgument("unknown model '" + name + "'");
}

ClusterSpec default_cluster(const ModelSpec& model) {
  std::vector<DeviceSpec> devs;
  int id = 0;
  for (int i = 0; i < 4; ++i) devs.push_back(device("A100", id++, 0, model));
  for (int host = 1; host <= 2; ++host) {
    for (int i = 0; i < 2; ++i) devs.push_back(device("3090", id++, host, model));
  }
  for (int i = 0; i < 4; ++i) devs.push_back(device("P100", id++, 3, model));
  return ClusterSpec::from_hosts(std::move(devs), intra_host_link(), inter_host_link());
}

ClusterSpec a100_two_3090(const ModelSpec& model) {
  std::vector<DeviceSpec> devs{device("A100", 0, 0, model), device("3090", 1, 1, model),
                               device("3090", 2, 1, model)};
  return ClusterSpec::from_hosts(std::move(devs), intra_host_link(), inter_host_link());
}

}  // namespace hetis::profiles
