#include "hetis/parallelizer.h"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <numeric>
#include <set>
#include <string>

#include "hetis/errors.h"

namespace hetis {

std::vector<DeviceId> InstancePlan::primaries() const {
  std::vector<DeviceId> out;
  for (const auto& s : stages) out.insert(out.end(), s.devices.begin(), s.devices.end());
  return out;
}

std::vector<DeviceId> InstancePlan::all_devices() const {
  std::vector<DeviceId> out = primaries();
  out.insert(out.end(), attention_workers.begin(), attention_workers.end());
  return out;
}

int ParallelPlan::primary_count() const {
  int n = 0;
  for (const auto& inst : instances) n += static_cast<int>(inst.primaries().size());
  return n;
}

void ParallelPlan::validate(const ClusterSpec& cluster, const ModelSpec& model) const {
  if (instances.empty()) throw InvalidArgument("plan has no instances");
  std::map<DeviceId, int> seen;
  for (std::size_t q = 0; q < instances.size(); ++q) {
    const InstancePlan& inst = instances[q];
    if (inst.stages.empty()) {
      throw InvalidArgument("instance " + std::to_string(q) + " has no stages");
    }
    int next = 0;
    for (const auto& st : inst.stages) {
      if (st.devices.empty()) throw InvalidArgument("stage without devices");
      if (st.layer_begin != next || st.layer_end <= st.layer_begin) {
        throw InvalidArgument("instance " + std::to_string(q) +
                              " stage layer ranges do not partition the model");
      }
      next = st.layer_end;
      if (model.n_query_heads % st.tp() != 0) {
        throw InvalidArgument("TP degree " + std::to_string(st.tp()) + " does not divide H");
      }
      const std::string& kind = cluster.device(st.devices.front()).kind;
      for (DeviceId id : st.devices) {
        if (cluster.device(id).kind != kind) {
          throw InvalidArgument("stage mixes device kinds " + kind + " and " +
                                cluster.device(id).kind);
        }
      }
    }
    if (next != model.n_layers) {
      throw InvalidArgument("instance " + std::to_string(q) + " covers " + std::to_string(next) +
                            " of " + std::to_string(model.n_layers) + " layers");
    }
    for (DeviceId id : inst.all_devices()) {
      cluster.device(id);
      if (++seen[id] > 1) {
        throw InvalidArgument("device " + std::to_string(id) + " appears more than once");
      }
    }
  }
  for (const auto& d : cluster.devices()) {
    if (seen.count(d.id) == 0) {
      throw InvalidArgument("device " + std::to_string(d.id) + " is not in the plan");
    }
  }
}

double layer_flops(const ModelSpec& model, double tokens) {
  const double h = model.hidden_dim;
  return 24.0 * tokens * h * h;
}

double stage_layer_seconds(const std::vector<DeviceId>& devices, const ClusterSpec& cluster,
                           const ModelSpec& model, const WorkloadProfile& load, CostPhase phase) {
  double prate = 0.0;
  double drate = 0.0;
  for (DeviceId id : devices) {
    const DeviceSpec& d = cluster.device(id);
    prate += d.dense_rate;
    drate += d.effective_decode_rate();
  }
  const double prefill = layer_flops(model, load.mean_batch * load.mean_prompt_len) / prate;
  const double decode = load.mean_output_len * layer_flops(model, load.mean_batch) / drate;
  switch (phase) {
    case CostPhase::kPrefill:
      return prefill;
    case CostPhase::kDecode:
      return decode;
    case CostPhase::kFull:
      break;
  }
  return prefill + decode;
}

namespace {

double ring_allreduce(double bytes, int tp, const NetworkLink& link) {
  if (tp < 2) return 0.0;
  const double steps = 2.0 * (tp - 1);
  return steps / tp * bytes / link.bandwidth + steps * link.latency;
}

NetworkLink slowest_between(const std::vector<DeviceId>& a, const std::vector<DeviceId>& b,
                            const ClusterSpec& cluster) {
  NetworkLink worst{std::numeric_limits<double>::infinity(), 0.0};
  for (DeviceId x : a) {
    for (DeviceId y : b) {
      if (x == y) continue;
      const NetworkLink& l = cluster.link(x, y);
      if (l.bandwidth < worst.bandwidth ||
          (l.bandwidth == worst.bandwidth && l.latency > worst.latency)) {
        worst = l;
      }
    }
  }
  return worst;
}

}  // namespace

PlanCost instance_cost(const InstancePlan& instance, const ClusterSpec& cluster,
                       const ModelSpec& model, const WorkloadProfile& load, CostPhase phase) {
  PlanCost cost;
  const double act = static_cast<double>(model.hidden_dim) * model.value_bytes;
  const double prefill_tokens = load.mean_batch * load.mean_prompt_len;
  const double decode_tokens = load.mean_batch;
  const bool with_prefill = phase != CostPhase::kDecode;
  const bool with_decode = phase != CostPhase::kPrefill;
  for (std::size_t k = 0; k < instance.stages.size(); ++k) {
    const StageGroup& st = instance.stages[k];
    const double comp = st.layers() * stage_layer_seconds(st.devices, cluster, model, load, phase);
    cost.comp += comp;
    cost.stage_max = std::max(cost.stage_max, comp);
    if (st.tp() > 1) {
      const NetworkLink link = cluster.slowest_link(st.devices);
      double per_layer = 0.0;
      if (with_prefill) per_layer += ring_allreduce(prefill_tokens * act, st.tp(), link);
      if (with_decode) {
        per_layer += load.mean_output_len * ring_allreduce(decode_tokens * act, st.tp(), link);
      }
      cost.comm += st.layers() * 2.0 * per_layer;
    }
    if (k + 1 < instance.stages.size()) {
      const NetworkLink link = slowest_between(st.devices, instance.stages[k + 1].devices, cluster);
      if (with_prefill) cost.comm += link.transfer_seconds(prefill_tokens * act);
      if (with_decode) {
        cost.comm += load.mean_output_len * link.transfer_seconds(decode_tokens * act);
      }
    }
  }
  cost.total = cost.comm + cost.comp;
  return cost;
}

PlanCost dense_cost(const ParallelPlan& plan, const ClusterSpec& cluster, const ModelSpec& model,
                    const WorkloadProfile& load, CostPhase phase) {
  PlanCost worst;
  bool first = true;
  for (const auto& inst : plan.instances) {
    const PlanCost c = instance_cost(inst, cluster, model, load, phase);
    if (first || c.total > worst.total) worst = c;
    first = false;
  }
  return worst;
}

std::vector<int> split_layers(const std::vector<double>& per_layer_seconds, int n_layers,
                              const std::vector<int>& caps) {
  const std::size_t s = per_layer_seconds.size();
  if (s == 0) throw InvalidArgument("split_layers: no stages");
  if (!caps.empty() && caps.size() != s) throw InvalidArgument("split_layers: caps size mismatch");
  if (static_cast<int>(s) > n_layers) {
    throw Infeasible("split_layers: " + std::to_string(s) + " stages exceed " +
                     std::to_string(n_layers) + " layers");
  }
  std::vector<int> cap(s, n_layers);
  for (std::size_t k = 0; k < s; ++k) {
    if (per_layer_seconds[k] < 0.0) throw InvalidArgument("split_layers: negative stage time");
    if (!caps.empty()) cap[k] = std::min(cap[k], caps[k]);
    if (cap[k] < 1) {
      throw Infeasible("split_layers: stage " + std::to_string(k) +
                       " cannot hold a single layer's parameters");
    }
  }
  const long total_cap = std::accumulate(cap.begin(), cap.end(), 0L);
  if (total_cap < n_layers) {
    throw Infeasible("split_layers: stages hold " + std::to_string(total_cap) + " of " +
                     std::to_string(n_layers) + " layers' parameters",
                     static_cast<double>(n_layers - total_cap));
  }

  auto count_at = [&](double t, std::size_t k) {
    const double u = per_layer_seconds[k];
    if (u == 0.0) return cap[k];
    const double m = std::floor(t / u * (1.0 + 1e-12));
    return static_cast<int>(std::min<double>(cap[k], m));
  };
  auto feasible = [&](double t) {
    long sum = 0;
    for (std::size_t k = 0; k < s; ++k) {
      const int c = count_at(t, k);
      if (c < 1) return false;
      sum += c;
    }
    return sum >= n_layers;
  };

  std::vector<double> cand;
  for (std::size_t k = 0; k < s; ++k) {
    for (int m = 1; m <= cap[k]; ++m) cand.push_back(m * per_layer_seconds[k]);
  }
  std::sort(cand.begin(), cand.end());
  cand.erase(std::unique(cand.begin(), cand.end()), cand.end());
  std::size_t lo = 0;
  std::size_t hi = cand.size() - 1;
  while (lo < hi) {
    const std::size_t mid = (lo + hi) / 2;
    if (feasible(cand[mid])) {
      hi = mid;
    } else {
      lo = mid + 1;
    }
  }
  const double t = cand[lo];
  std::vector<int> out(s);
  long sum = 0;
  for (std::size_t k = 0; k < s; ++k) {
    out[k] = count_at(t, k);
    sum += out[k];
  }
  // Trim the surplus from the most loaded stages.
  while (sum > n_layers) {
    std::size_t pick = s;
    for (std::size_t k = 0; k < s; ++k) {
      if (out[k] <= 1) continue;
      if (pick == s || out[k] * per_layer_seconds[k] >= out[pick] * per_layer_seconds[pick]) {
        pick = k;
      }
    }
    --out[pick];
    --sum;
  }
  return out;
}

int layer_capacity(const std::vector<DeviceId>& devices, const ClusterSpec& cluster,
                   const ModelSpec& model, double mem_util) {
  double mem = 0.0;
  for (DeviceId id : devices) mem += static_cast<double>(cluster.device(id).mem_total) * mem_util;
  const double layers = std::floor(mem / model.layer_param_bytes());
  return static_cast<int>(std::min<double>(layers, model.n_layers));
}

double assign_layers(std::vector<StageGroup>& stages, const ClusterSpec& cluster,
                     const ModelSpec& model, const WorkloadProfile& load,
                     const SearchOptions& opts) {
  std::vector<double> per_layer;
  std::vector<int> caps;
  for (const auto& st : stages) {
    per_layer.push_back(stage_layer_seconds(st.devices, cluster, model, load));
    caps.push_back(layer_capacity(st.devices, cluster, model, opts.mem_util));
  }
  const std::vector<int> split = split_layers(per_layer, model.n_layers, caps);
  int begin = 0;
  double worst = 0.0;
  for (std::size_t k = 0; k < stages.size(); ++k) {
    stages[k].layer_begin = begin;
    stages[k].layer_end = begin + split[k];
    begin = stages[k].layer_end;
    worst = std::max(worst, split[k] * per_layer[k]);
  }
  return worst;
}

namespace {

// Prefill-plus-decode throughput used to rank device kinds.
double capability(const DeviceSpec& d) { return d.dense_rate + d.effective_decode_rate(); }

void set_worker_counts(InstancePlan& inst) {
  for (auto& st : inst.stages) {
    st.worker_count = st.tp() + static_cast<int>(inst.attention_workers.size());
  }
}

}  // namespace

InstancePlan prune_attention_workers(const InstancePlan& instance, const ClusterSpec& cluster,
                                     const ModelSpec& model, const WorkloadProfile& load,
                                     const SearchOptions& opts) {
  if (opts.delta < 0.0) throw InvalidArgument("delta must be >= 0");
  InstancePlan cur = instance;
  double cp = assign_layers(cur.stages, cluster, model, load, opts);

  for (bool removed = true; removed;) {
    removed = false;
    std::vector<DeviceId> order = cur.primaries();
    if (order.size() <= 1) break;
    std::stable_sort(order.begin(), order.end(), [&](DeviceId a, DeviceId b) {
      const double ca = capability(cluster.device(a));
      const double cb = capability(cluster.device(b));
      if (ca != cb) return ca < cb;
      return a > b;
    });
    for (DeviceId kappa : order) {
      InstancePlan cand = cur;
      for (auto it = cand.stages.begin(); it != cand.stages.end(); ++it) {
        auto pos = std::find(it->devices.begin(), it->devices.end(), kappa);
        if (pos == it->devices.end()) continue;
        it->devices.erase(pos);
        if (it->devices.empty()) cand.stages.erase(it);
        break;
      }
      double cp_new = 0.0;
      try {
        cp_new = assign_layers(cand.stages, cluster, model, load, opts);
      } catch (const Infeasible&) {
        continue;
      }
      if (cp_new <= cp * (1.0 + opts.delta)) {
        cand.attention_workers.push_back(kappa);
        cur = std::move(cand);
        cp = cp_new;
        removed = true;
        break;
      }
    }
  }
  std::sort(cur.attention_workers.begin(), cur.attention_workers.end());
  set_worker_counts(cur);
  return cur;
}

double kv_demand_bytes(const ModelSpec& model, const WorkloadProfile& load) {
  const double tokens = load.mean_batch * (load.mean_prompt_len + load.mean_output_len);
  return 2.0 * static_cast<double>(model.kv_bytes_per_head_token) * tokens * model.kv_groups() *
         model.n_layers;
}

namespace {

struct KindGroup {
  std::string kind;
  std::vector<DeviceId> devices;  // sorted by (host, id)
};

std::vector<KindGroup> group_by_kind(const ClusterSpec& cluster,
                                     const std::vector<DeviceId>& ids) {
  std::map<std::string, KindGroup> by_kind;
  for (DeviceId id : ids) {
    const DeviceSpec& d = cluster.device(id);
    auto& g = by_kind[d.kind];
    g.kind = d.kind;
    g.devices.push_back(d.id);
  }
  std::vector<KindGroup> out;
  for (auto& [k, g] : by_kind) {
    std::sort(g.devices.begin(), g.devices.end(), [&](DeviceId a, DeviceId b) {
      const auto& da = cluster.device(a);
      const auto& db = cluster.device(b);
      if (da.host_id != db.host_id) return da.host_id < db.host_id;
      return a < b;
    });
    out.push_back(std::move(g));
  }
  std::stable_sort(out.begin(), out.end(), [&](const KindGroup& a, const KindGroup& b) {
    return capability(cluster.device(a.devices.front())) >
           capability(cluster.device(b.devices.front()));
  });
  return out;
}

std::vector<int> divisors(int n) {
  std::vector<int> out;
  for (int d = 1; d <= n; ++d) {
    if (n % d == 0) out.push_back(d);
  }
  return out;
}

bool cheaper(double a, double b) { return a < b * (1.0 - 1e-12); }

// Best TP x PP layout for the stages of one pruned instance.
std::optional<std::pair<InstancePlan, PlanCost>> best_layout(const InstancePlan& pruned,
                                                             const ClusterSpec& cluster,
                                                             const ModelSpec& model,
                                                             const WorkloadProfile& load,
                                                             const SearchOptions& opts) {
  std::vector<std::vector<int>> tp_options;
  for (const auto& st : pruned.stages) {
    std::vector<int> opts_k;
    for (int tp : divisors(st.tp())) {
      if (model.n_query_heads % tp == 0 && st.tp() / tp <= model.n_layers) opts_k.push_back(tp);
    }
    if (opts_k.empty()) return std::nullopt;
    tp_options.push_back(std::move(opts_k));
  }
  std::optional<std::pair<InstancePlan, PlanCost>> best;
  std::vector<std::size_t> pick(tp_options.size(), 0);
  for (;;) {
    InstancePlan cand;
    cand.attention_workers = pruned.attention_workers;
    for (std::size_t k = 0; k < pruned.stages.size(); ++k) {
      const auto& devs = pruned.stages[k].devices;
      const int tp = tp_options[k][pick[k]];
      for (std::size_t off = 0; off < devs.size(); off += tp) {
        StageGroup g;
        g.devices.assign(devs.begin() + static_cast<long>(off),
                         devs.begin() + static_cast<long>(off) + tp);
        cand.stages.push_back(std::move(g));
      }
    }
    bool ok = static_cast<int>(cand.stages.size()) <= model.n_layers;
    if (ok) {
      try {
        assign_layers(cand.stages, cluster, model, load, opts);
      } catch (const Infeasible&) {
        ok = false;
      }
    }
    if (ok) {
      set_worker_counts(cand);
      const PlanCost c = instance_cost(cand, cluster, model, load);
      if (!best || cheaper(c.total, best->second.total)) best.emplace(std::move(cand), c);
    }
    std::size_t k = 0;
    while (k < pick.size() && ++pick[k] == tp_options[k].size()) pick[k++] = 0;
    if (k == pick.size()) break;
  }
  return best;
}

}  // namespace

SearchReport search_plan(const ClusterSpec& cluster, const ModelSpec& model,
                         const WorkloadProfile& load, const SearchOptions& opts) {
  cluster.validate();
  model.validate();
  load.validate();
  if (opts.delta < 0.0) throw InvalidArgument("delta must be >= 0");
  if (!(opts.mem_util > 0.0 && opts.mem_util <= 1.0)) {
    throw InvalidArgument("mem_util must be in (0, 1]");
  }
  if (cluster.size() == 0) throw InvalidArgument("cluster has no devices");

  std::vector<DeviceId> all;
  for (const auto& d : cluster.devices()) all.push_back(d.id);
  const std::vector<KindGroup> kinds = group_by_kind(cluster, all);
  int g = 0;
  for (const auto& k : kinds) g = std::gcd(g, static_cast<int>(k.devices.size()));

  std::set<std::string> reasons;
  std::optional<SearchReport> best;
  int candidates = 0;
  for (int dp : divisors(g)) {
    ParallelPlan plan;
    bool ok = true;
    for (int q = 0; q < dp && ok; ++q) {
      InstancePlan inst;
      double mem = 0.0;
      for (const auto& k : kinds) {
        const int share = static_cast<int>(k.devices.size()) / dp;
        StageGroup st;
        st.devices.assign(k.devices.begin() + q * share, k.devices.begin() + (q + 1) * share);
        for (DeviceId id : st.devices) {
          mem += static_cast<double>(cluster.device(id).mem_total) * opts.mem_util;
        }
        inst.stages.push_back(std::move(st));
      }
      const double kv_room = mem - static_cast<double>(model.param_bytes);
      if (kv_room < kv_demand_bytes(model, load)) {
        reasons.insert("KV capacity: instances of a " + std::to_string(dp) +
                       "-way split leave " + std::to_string(kv_room) +
                       " bytes after parameters, load needs " +
                       std::to_string(kv_demand_bytes(model, load)));
        ok = false;
        break;
      }
      InstancePlan pruned;
      try {
        pruned = prune_attention_workers(inst, cluster, model, load, opts);
      } catch (const Infeasible& e) {
        reasons.insert(std::string("parameters: ") + e.what());
        ok = false;
        break;
      }
      auto layout = best_layout(pruned, cluster, model, load, opts);
      if (!layout) {
        reasons.insert("no TP x PP layout satisfies the head and layer constraints");
        ok = false;
        break;
      }
      plan.instances.push_back(std::move(layout->first));
    }
    if (!ok) continue;
    ++candidates;
    SearchReport rep;
    rep.plan = std::move(plan);
    rep.cost = dense_cost(rep.plan, cluster, model, load);
    rep.dp_degree = dp;
    if (!best || cheaper(rep.cost.total, best->cost.total) ||
        (!cheaper(best->cost.total, rep.cost.total) &&
         rep.plan.primary_count() < best->plan.primary_count())) {
      best = std::move(rep);
    }
  }
  if (!best) {
    std::string msg = "no feasible parallel plan";
    for (const auto& r : reasons) msg += "; " + r;
    throw Infeasible(msg);
  }
  best->candidates = candidates;
  best->plan.validate(cluster, model);
  return *best;
}

std::pair<InstancePlan, PlanCost> plan_instance(const std::vector<DeviceId>& devices,
                                                const ClusterSpec& cluster, const ModelSpec& model,
                                                const WorkloadProfile& load, bool prune,
                                                const SearchOptions& opts) {
  if (devices.empty()) throw InvalidArgument("plan_instance: no devices");
  InstancePlan inst;
  for (const auto& k : group_by_kind(cluster, devices)) {
    StageGroup st;
    st.devices = k.devices;
    inst.stages.push_back(std::move(st));
  }
  if (prune) {
    inst = prune_attention_workers(inst, cluster, model, load, opts);
  } else {
    assign_layers(inst.stages, cluster, model, load, opts);
  }
  auto layout = best_layout(inst, cluster, model, load, opts);
  if (!layout) throw Infeasible("no TP x PP layout satisfies the head and layer constraints");
  return std::move(*layout);
}

}  // namespace hetis
