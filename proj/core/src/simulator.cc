#include "hetis/simulator.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <map>
#include <queue>
#include <set>

#include <json.hpp>

#include "hetis/config_io.h"
#include "hetis/errors.h"
#include "hetis/hauler.h"
#include "hetis/kvcache.h"

namespace hetis {

using nlohmann::json;

std::string to_string(Policy policy) {
  switch (policy) {
    case Policy::kHetis:
      return "hetis";
    case Policy::kPhaseSplit:
      return "phase_split";
    case Policy::kParamSplit:
      return "param_split";
  }
  return "hetis";
}

Policy parse_policy(const std::string& name) {
  if (name == "hetis") return Policy::kHetis;
  if (name == "phase_split") return Policy::kPhaseSplit;
  if (name == "param_split") return Policy::kParamSplit;
  throw InvalidArgument("unknown policy '" + name + "' (hetis, phase_split, param_split)");
}

void SimConfig::validate() const {
  if (!(theta >= 0.0)) throw InvalidArgument("theta must be >= 0");
  if (!(delta >= 0.0)) throw InvalidArgument("delta must be >= 0");
  if (block_size < 1) throw InvalidArgument("block size must be >= 1");
  if (!(mem_util > 0.0 && mem_util <= 1.0)) throw InvalidArgument("mem_util must be in (0, 1]");
  if (max_batch < 1) throw InvalidArgument("max batch must be >= 1");
  if (max_prefill_tokens < 1) throw InvalidArgument("max prefill tokens must be >= 1");
  if (!(plan_batch > 0.0)) throw InvalidArgument("plan batch must be > 0");
  if (!(horizon > 0.0)) throw InvalidArgument("horizon must be > 0");
  if (max_relieve_steps < 1) throw InvalidArgument("max relieve steps must be >= 1");
}

double iteration_seconds(const std::vector<double>& stage_seconds) {
  if (stage_seconds.empty()) return 0.0;
  return static_cast<double>(stage_seconds.size()) *
         *std::max_element(stage_seconds.begin(), stage_seconds.end());
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

namespace {

enum class Role { kMixed, kPrefill, kDecode };

struct Slot {
  DeviceId device = 0;
  bool primary = true;
  BlockLedger ledger;
};

struct StageRt {
  StageGroup group;
  int layers = 1;
  std::vector<Slot> slots;
  std::vector<DeviceState> states;
  StageCosts costs;
  std::vector<RequestState> reqs;  // resident requests in arrival order
  std::map<RequestId, std::vector<std::size_t>> owners;  // head group -> slot
  std::vector<int> static_alloc;  // baselines only
  std::optional<Hauler> hauler;
  double prefill_rate = 0.0;
  double decode_rate = 0.0;
  NetworkLink tp_link;
  NetworkLink next_link;  // to the following stage

  std::size_t find(RequestId id) const {
    for (std::size_t k = 0; k < reqs.size(); ++k) {
      if (reqs[k].id == id) return k;
    }
    return reqs.size();
  }
  void sync_budgets() {
    for (std::size_t i = 0; i < slots.size(); ++i) {
      states[i].budget = slots[i].ledger.budget_units(states[i].g);
    }
  }
};

struct InstanceRt {
  Role role = Role::kMixed;
  std::vector<StageRt> stages;
  std::deque<std::size_t> waiting;
  std::set<std::size_t> decode;  // request indices; index order is arrival order
  std::set<std::size_t> resident;
  bool busy = false;
  bool prefill_iter = false;
  std::vector<std::size_t> batch;
  bool wake_pending = false;
};

enum class ReqState { kPending, kWaiting, kPrefill, kHandoff, kTransit, kDecode, kDone, kRejected };

struct Req {
  TraceEntry e;
  RequestId id = 0;
  int instance = -1;  // where its cache lives (or will be admitted)
  std::int64_t generated = 0;
  double first_token = -1.0;
  double finish = -1.0;
  int evictions = 0;
  double blocked_until = 0.0;
  ReqState state = ReqState::kPending;
};

enum class EventKind { kArrival, kIterationDone, kMigrationDone, kWake };

struct Event {
  double time = 0.0;
  std::uint64_t seq = 0;
  EventKind kind = EventKind::kArrival;
  int instance = 0;
  std::size_t req = 0;

  bool operator>(const Event& o) const {
    if (time != o.time) return time > o.time;
    return seq > o.seq;
  }
};

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

// Head groups split in proportion to `weights` by largest remainder; ties
// go to the lower position.
std::vector<int> proportional_groups(const std::vector<double>& weights, int groups) {
  double total = 0.0;
  for (double w : weights) total += w;
  std::vector<int> out(weights.size(), 0);
  std::vector<std::pair<double, std::size_t>> rem;
  int given = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double share = groups * weights[i] / total;
    out[i] = static_cast<int>(std::floor(share));
    given += out[i];
    rem.emplace_back(share - out[i], i);
  }
  std::stable_sort(rem.begin(), rem.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; given < groups; ++k, ++given) ++out[rem[k % rem.size()].second];
  return out;
}

class Engine {
 public:
  Engine(const ClusterSpec& cluster, const ModelSpec& model, const std::vector<TraceEntry>& trace,
         const SimConfig& cfg)
      : cluster_(cluster), model_(model), cfg_(cfg) {
    for (std::size_t k = 0; k < trace.size(); ++k) {
      Req r;
      r.e = trace[k];
      r.id = static_cast<RequestId>(k);
      reqs_.push_back(r);
    }
    r_ = model.gqa_ratio;
    groups_ = model.kv_groups();
    act_bytes_ = static_cast<double>(model.hidden_dim) * model.value_bytes;
  }

  void add_instance(const InstancePlan& plan, Role role) {
    plan_.instances.push_back(plan);
    InstanceRt inst;
    inst.role = role;
    const bool dynamic = cfg_.policy == Policy::kHetis;
    const auto n_stages = plan.stages.size();
    // Usable bytes of every primary after its share of the stage parameters.
    std::vector<double> own_room(n_stages, 0.0);
    for (std::size_t k = 0; k < n_stages; ++k) {
      const StageGroup& st = plan.stages[k];
      const double params = model_.layer_param_bytes() * st.layers() / st.tp();
      for (DeviceId id : st.devices) {
        const double room =
            static_cast<double>(cluster_.device(id).mem_total) * cfg_.mem_util - params;
        if (room <= 0.0) {
          throw Infeasible("model does not fit: device " + std::to_string(id) +
                           " cannot hold layers " + std::to_string(st.layer_begin) + "-" +
                           std::to_string(st.layer_end));
        }
        own_room[k] += room;
      }
    }
    const std::vector<double> aw_share = attention_shares(plan, own_room);

    for (std::size_t k = 0; k < n_stages; ++k) {
      const StageGroup& st = plan.stages[k];
      StageRt s;
      s.group = st;
      s.layers = st.layers();
      const double params = model_.layer_param_bytes() * st.layers() / st.tp();
      for (DeviceId id : st.devices) {
        const DeviceSpec& d = cluster_.device(id);
        const double room = static_cast<double>(d.mem_total) * cfg_.mem_util - params;
        add_slot(s, d, true, static_cast<std::int64_t>(room));
        s.prefill_rate += d.dense_rate;
        s.decode_rate += d.effective_decode_rate();
      }
      for (DeviceId id : plan.attention_workers) {
        const DeviceSpec& d = cluster_.device(id);
        add_slot(s, d, false,
                 static_cast<std::int64_t>(aw_share[k] / plan.attention_workers.size()));
      }
      s.costs.n_heads = model_.n_query_heads;
      s.costs.gqa_ratio = r_;
      s.tp_link = cluster_.slowest_link(st.devices);
      s.next_link = k + 1 < n_stages
                        ? slowest_between(st.devices, plan.stages[k + 1].devices, cluster_)
                        : NetworkLink{std::numeric_limits<double>::infinity(), 0.0};
      if (dynamic) {
        s.hauler.emplace(HaulerConfig{cfg_.theta}, model_, s.layers);
      } else {
        std::vector<double> w;
        for (DeviceId id : st.devices) w.push_back(cluster_.device(id).dense_rate);
        s.static_alloc = proportional_groups(w, groups_);
        for (int& x : s.static_alloc) x *= r_;
      }
      s.sync_budgets();
      inst.stages.push_back(std::move(s));
    }
    instances_.push_back(std::move(inst));
  }

  SimResult run() {
    for (std::size_t k = 0; k < reqs_.size(); ++k) {
      push({reqs_[k].e.arrival_s, 0, EventKind::kArrival, 0, k});
    }
    for (const auto& inst : instances_) {
      for (const auto& st : inst.stages) {
        for (const auto& sl : st.slots) {
          capacity_ += weight(st) * static_cast<double>(sl.ledger.total_blocks());
        }
      }
    }
    while (!events_.empty()) {
      const Event ev = events_.top();
      if (ev.time > cfg_.horizon) break;
      events_.pop();
      now_ = ev.time;
      switch (ev.kind) {
        case EventKind::kArrival:
          on_arrival(ev.req);
          break;
        case EventKind::kIterationDone:
          on_iteration_done(ev.instance);
          break;
        case EventKind::kMigrationDone:
          on_migration_done(ev.instance, ev.req);
          break;
        case EventKind::kWake:
          instances_[static_cast<std::size_t>(ev.instance)].wake_pending = false;
          try_start(ev.instance);
          break;
      }
    }
    return finish_result();
  }

 private:
  // Attention-worker bytes given to each stage so that the per-layer room of
  // the stages is as even as possible.
  std::vector<double> attention_shares(const InstancePlan& plan,
                                       const std::vector<double>& own_room) const {
    std::vector<double> share(plan.stages.size(), 0.0);
    double pool = 0.0;
    for (DeviceId id : plan.attention_workers) {
      pool += static_cast<double>(cluster_.device(id).mem_total) * cfg_.mem_util;
    }
    if (pool <= 0.0) return share;
    auto given = [&](double t) {
      double sum = 0.0;
      for (std::size_t k = 0; k < share.size(); ++k) {
        sum += std::max(0.0, t * plan.stages[k].layers() - own_room[k]);
      }
      return sum;
    };
    double lo = 0.0;
    double hi = 1.0;
    while (given(hi) < pool) hi *= 2.0;
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      (given(mid) < pool ? lo : hi) = mid;
    }
    double sum = 0.0;
    for (std::size_t k = 0; k < share.size(); ++k) {
      share[k] = std::max(0.0, hi * plan.stages[k].layers() - own_room[k]);
      sum += share[k];
    }
    for (double& s : share) s *= pool / sum;
    return share;
  }

  void add_slot(StageRt& s, const DeviceSpec& d, bool primary, std::int64_t bytes) {
    Slot slot;
    slot.device = d.id;
    slot.primary = primary;
    slot.ledger = BlockLedger(
        d.id, BlockLedger::blocks_for_bytes(bytes, model_, s.layers, cfg_.block_size),
        cfg_.block_size);
    s.slots.push_back(std::move(slot));
    DeviceState st;
    st.device = d.id;
    st.is_primary = primary;
    s.states.push_back(st);
    s.costs.workers.push_back({d.attn_cost, d.xfer_cost});
  }

  double weight(const StageRt& st) const {
    return static_cast<double>(st.layers) / static_cast<double>(model_.n_layers);
  }

  void push(Event ev) {
    ev.seq = seq_++;
    events_.push(ev);
  }

  void emit(json j) {
    j["t"] = now_;
    log_.push_back(j.dump());
  }

  // ---- placement ----------------------------------------------------------

  std::int64_t context_of(const Req& r) const { return r.e.prompt_tokens + r.generated; }

  // Whether a request of `tokens` tokens fits an otherwise empty instance.
  bool fits_alone(const InstanceRt& inst, std::int64_t tokens) const {
    const std::int64_t per_group = BlockLedger::blocks_for_tokens(tokens, cfg_.block_size);
    for (const StageRt& st : inst.stages) {
      if (st.static_alloc.empty()) {
        std::int64_t groups = 0;
        for (const Slot& sl : st.slots) groups += sl.ledger.total_blocks() / per_group;
        if (groups < groups_) return false;
      } else {
        for (std::size_t i = 0; i < st.slots.size(); ++i) {
          if (st.static_alloc[i] / r_ * per_group > st.slots[i].ledger.total_blocks()) {
            return false;
          }
        }
      }
    }
    return true;
  }

  std::vector<int> slot_groups(const std::vector<std::size_t>& owners, std::size_t slot) const {
    std::vector<int> out;
    for (std::size_t g = 0; g < owners.size(); ++g) {
      if (owners[g] == slot) out.push_back(static_cast<int>(g));
    }
    return out;
  }

  // Records `alloc` for request `idx` in one stage and reserves its blocks.
  void place(StageRt& st, std::size_t idx, const std::vector<int>& alloc, std::int64_t tokens) {
    RequestState rs;
    rs.id = reqs_[idx].id;
    rs.arrival = reqs_[idx].e.arrival_s;
    rs.context_len = tokens;
    rs.phase = Phase::kDecode;
    rs.remaining_output = reqs_[idx].e.output_tokens - reqs_[idx].generated;
    rs.allocation = alloc;
    const std::vector<std::size_t> owners = canonical_owners(alloc, r_);
    for (std::size_t i = 0; i < st.slots.size(); ++i) {
      if (alloc[i] == 0) continue;
      const auto groups = slot_groups(owners, i);
      if (!st.slots[i].ledger.reserve(rs.id, groups, tokens).ok) {
        throw InternalError("block ledger rejected a placement the budget allowed");
      }
    }
    apply_allocation(st.states, rs, r_, +1);
    st.owners[rs.id] = owners;
    auto pos = std::lower_bound(st.reqs.begin(), st.reqs.end(), rs.id,
                                [](const RequestState& a, RequestId id) { return a.id < id; });
    st.reqs.insert(pos, std::move(rs));
    st.sync_budgets();
  }

  void release(InstanceRt& inst, std::size_t idx) {
    const RequestId id = reqs_[idx].id;
    for (StageRt& st : inst.stages) {
      const std::size_t k = st.find(id);
      if (k == st.reqs.size()) continue;
      for (Slot& sl : st.slots) sl.ledger.free(id);
      apply_allocation(st.states, st.reqs[k], r_, -1);
      st.reqs.erase(st.reqs.begin() + static_cast<long>(k));
      st.owners.erase(id);
      st.sync_budgets();
    }
    inst.resident.erase(idx);
    inst.decode.erase(idx);
  }

  // Static placement: every stage's fixed split, all or nothing.
  bool static_fits(const InstanceRt& inst, const std::vector<std::int64_t>& tokens) const {
    for (const StageRt& st : inst.stages) {
      for (std::size_t i = 0; i < st.slots.size(); ++i) {
        std::int64_t need = 0;
        for (std::int64_t t : tokens) {
          need += st.static_alloc[i] / r_ * BlockLedger::blocks_for_tokens(t, cfg_.block_size);
        }
        if (need > st.slots[i].ledger.free_blocks()) return false;
      }
    }
    return true;
  }

  // Dispatches `batch` in every stage; empty when some stage cannot host it.
  std::optional<std::vector<HeadAllocation>> dynamic_place(
      InstanceRt& inst, const std::vector<std::size_t>& batch) {
    std::vector<HeadAllocation> out;
    std::vector<json> logs;
    for (std::size_t k = 0; k < inst.stages.size(); ++k) {
      StageRt& st = inst.stages[k];
      DispatchRound round;
      round.states = st.states;
      for (std::size_t idx : batch) {
        RequestState rs;
        rs.id = reqs_[idx].id;
        rs.arrival = reqs_[idx].e.arrival_s;
        const std::int64_t l = context_of(reqs_[idx]);
        rs.context_len = BlockLedger::blocks_for_tokens(l, cfg_.block_size) * cfg_.block_size;
        round.new_requests.push_back(rs);
      }
      DispatchResult res;
      try {
        res = dispatch(round, st.costs);
      } catch (const Infeasible&) {
        return std::nullopt;
      }
      json ids = json::array();
      for (std::size_t idx : batch) ids.push_back(reqs_[idx].id);
      logs.push_back({{"type", "dispatch"},
                      {"instance", &inst - instances_.data()},
                      {"stage", k},
                      {"requests", ids},
                      {"x", res.x},
                      {"objective", res.objective.objective},
                      {"lp_objective", res.lp_objective},
                      {"rounding_slack", res.rounding_slack}});
      out.push_back(std::move(res.x));
    }
    for (auto& j : logs) emit(std::move(j));
    return out;
  }

  // ---- iterations ---------------------------------------------------------

  std::size_t pick_instance(Role want) const {
    std::size_t best = instances_.size();
    std::size_t best_load = 0;
    for (std::size_t q = 0; q < instances_.size(); ++q) {
      if (instances_[q].role != want) continue;
      const std::size_t load = instances_[q].waiting.size() + instances_[q].resident.size();
      if (best == instances_.size() || load < best_load) {
        best = q;
        best_load = load;
      }
    }
    return best;
  }

  void on_arrival(std::size_t idx) {
    Req& r = reqs_[idx];
    const Role entry = cfg_.policy == Policy::kPhaseSplit ? Role::kPrefill : Role::kMixed;
    const std::size_t q = pick_instance(entry);
    const std::int64_t total = r.e.prompt_tokens + r.e.output_tokens;
    bool fits = fits_alone(instances_[q], r.e.prompt_tokens + 1);
    if (entry == Role::kPrefill) {
      const std::size_t d = pick_instance(Role::kDecode);
      fits = fits && fits_alone(instances_[d], total);
    } else {
      fits = fits && fits_alone(instances_[q], total);
    }
    if (!fits) {
      r.state = ReqState::kRejected;
      emit({{"type", "reject"}, {"request", r.id}, {"tokens", total}});
      return;
    }
    r.instance = static_cast<int>(q);
    r.state = ReqState::kWaiting;
    instances_[q].waiting.push_back(idx);
    try_start(static_cast<int>(q));
  }

  std::vector<std::size_t> admit(InstanceRt& inst) {
    std::vector<std::size_t> cand;
    std::int64_t tokens = 0;
    std::size_t resident = inst.resident.size();
    if (inst.role == Role::kPrefill) resident = 0;
    for (std::size_t idx : inst.waiting) {
      const std::int64_t l = context_of(reqs_[idx]);
      if (!cand.empty() && tokens + l > cfg_.max_prefill_tokens) break;
      if (inst.role == Role::kMixed && resident + cand.size() >= static_cast<std::size_t>(cfg_.max_batch)) {
        break;
      }
      cand.push_back(idx);
      tokens += l;
    }
    if (cand.empty()) return cand;

    std::vector<HeadAllocation> dyn;
    if (inst.stages.front().static_alloc.empty()) {
      // Trim to what the aggregate free blocks could hold, then dispatch and
      // drop from the back until every stage accepts.
      for (const StageRt& st : inst.stages) {
        std::int64_t free = 0;
        for (const Slot& sl : st.slots) free += sl.ledger.free_blocks();
        std::int64_t need = 0;
        std::size_t keep = 0;
        for (std::size_t idx : cand) {
          need += groups_ * BlockLedger::blocks_for_tokens(context_of(reqs_[idx]), cfg_.block_size);
          if (need > free) break;
          ++keep;
        }
        cand.resize(std::min(cand.size(), keep));
      }
      while (!cand.empty()) {
        auto placed = dynamic_place(inst, cand);
        if (placed) {
          dyn = std::move(*placed);
          break;
        }
        cand.pop_back();
      }
    } else {
      std::vector<std::int64_t> lens;
      std::size_t keep = 0;
      for (std::size_t idx : cand) {
        lens.push_back(context_of(reqs_[idx]));
        if (!static_fits(inst, lens)) break;
        ++keep;
      }
      cand.resize(keep);
    }
    for (std::size_t j = 0; j < cand.size(); ++j) {
      const std::size_t idx = cand[j];
      const std::int64_t l = context_of(reqs_[idx]);
      for (std::size_t k = 0; k < inst.stages.size(); ++k) {
        StageRt& st = inst.stages[k];
        place(st, idx, dyn.empty() ? st.static_alloc : dyn[k][j], l);
      }
      inst.resident.insert(idx);
      inst.waiting.pop_front();
      reqs_[idx].state = ReqState::kPrefill;
    }
    return cand;
  }

  double prefill_stage_seconds(const StageRt& st, const std::vector<std::size_t>& batch) const {
    double tokens = 0.0;
    double attn = 0.0;
    for (std::size_t idx : batch) {
      const double l = static_cast<double>(context_of(reqs_[idx]));
      tokens += l;
      attn += 4.0 * l * l * model_.hidden_dim;
    }
    const double L = st.layers;
    double t = L * (layer_flops(model_, tokens) + attn) / st.prefill_rate;
    t += 2.0 * L * ring_allreduce(tokens * act_bytes_, st.group.tp(), st.tp_link);
    if (std::isfinite(st.next_link.bandwidth)) t += st.next_link.transfer_seconds(tokens * act_bytes_);
    // Fresh cache shipped from the primaries to the attention workers.
    double ship = 0.0;
    for (std::size_t i = 0; i < st.slots.size(); ++i) {
      if (st.slots[i].primary) continue;
      double units = 0.0;
      for (std::size_t idx : batch) {
        const std::size_t k = st.find(reqs_[idx].id);
        if (k == st.reqs.size()) continue;
        units += static_cast<double>(
            cache_units(st.reqs[k].allocation[i], st.reqs[k].context_len, r_));
      }
      if (units <= 0.0) continue;
      const double bytes = units * static_cast<double>(model_.kv_bytes_per_head_token) * L;
      ship = std::max(ship, cluster_.link(st.group.devices.front(), st.slots[i].device)
                                .transfer_seconds(bytes));
    }
    return t + ship;
  }

  double max_f(const StageRt& st) const {
    return current_objective(st.states, st.costs).objective;
  }

  double decode_stage_seconds(const StageRt& st, std::size_t batch) const {
    const double b = static_cast<double>(batch);
    const double L = st.layers;
    double t = L * layer_flops(model_, b) / st.decode_rate + L * max_f(st);
    t += 2.0 * L * ring_allreduce(b * act_bytes_, st.group.tp(), st.tp_link);
    if (std::isfinite(st.next_link.bandwidth)) t += st.next_link.transfer_seconds(b * act_bytes_);
    return t;
  }

  void sample(int q, double elapsed) {
    const InstanceRt& inst = instances_[static_cast<std::size_t>(q)];
    IterationSample s;
    s.start = now_;
    s.elapsed = elapsed;
    s.instance = q;
    s.prefill = inst.prefill_iter;
    s.batch = static_cast<int>(inst.batch.size());
    json occ = json::array();
    for (std::size_t k = 0; k < inst.stages.size(); ++k) {
      const StageRt& st = inst.stages[k];
      s.stage_max_f.push_back(max_f(st));
      std::int64_t aw = 0;
      for (std::size_t i = 0; i < st.states.size(); ++i) {
        if (!st.states[i].is_primary) aw += st.states[i].h;
        occ.push_back({k, st.slots[i].device, st.slots[i].ledger.used_blocks(),
                       st.slots[i].ledger.free_blocks()});
      }
      s.attention_heads.push_back(aw);
    }
    emit({{"type", "iteration"},
          {"instance", q},
          {"phase", s.prefill ? "prefill" : "decode"},
          {"batch", s.batch},
          {"elapsed", elapsed},
          {"max_f", s.stage_max_f},
          {"attention_heads", s.attention_heads},
          {"occupancy", occ}});
    samples_.push_back(std::move(s));
  }

  void try_start(int q) {
    InstanceRt& inst = instances_[static_cast<std::size_t>(q)];
    if (inst.busy) return;
    inst.batch.clear();
    if (inst.role != Role::kDecode && !inst.waiting.empty()) {
      inst.batch = admit(inst);
      track_peak();
    }
    if (!inst.batch.empty()) {
      inst.prefill_iter = true;
      std::vector<double> per_stage;
      for (const StageRt& st : inst.stages) per_stage.push_back(prefill_stage_seconds(st, inst.batch));
      start(q, iteration_seconds(per_stage));
      return;
    }
    double wake = std::numeric_limits<double>::infinity();
    for (std::size_t idx : inst.decode) {
      if (reqs_[idx].blocked_until > now_) {
        wake = std::min(wake, reqs_[idx].blocked_until);
        continue;
      }
      inst.batch.push_back(idx);
      if (inst.batch.size() >= static_cast<std::size_t>(cfg_.max_batch)) break;
    }
    if (inst.batch.empty()) {
      if (std::isfinite(wake) && !inst.wake_pending) {
        inst.wake_pending = true;
        push({wake, 0, EventKind::kWake, q, 0});
      }
      return;
    }
    inst.prefill_iter = false;
    std::vector<double> per_stage;
    for (const StageRt& st : inst.stages) {
      per_stage.push_back(decode_stage_seconds(st, inst.batch.size()));
    }
    start(q, iteration_seconds(per_stage));
  }

  void start(int q, double elapsed) {
    InstanceRt& inst = instances_[static_cast<std::size_t>(q)];
    inst.busy = true;
    sample(q, elapsed);
    push({now_ + elapsed, 0, EventKind::kIterationDone, q, 0});
  }

  void finish_request(InstanceRt& inst, std::size_t idx) {
    release(inst, idx);
    reqs_[idx].finish = now_;
    reqs_[idx].state = ReqState::kDone;
  }

  void on_iteration_done(int q) {
    InstanceRt& inst = instances_[static_cast<std::size_t>(q)];
    inst.busy = false;
    const std::vector<std::size_t> batch = inst.batch;
    if (inst.prefill_iter) {
      for (std::size_t idx : batch) {
        Req& r = reqs_[idx];
        r.generated += 1;
        generated_ += 1;
        if (r.first_token < 0.0) r.first_token = now_;
        if (r.generated >= r.e.output_tokens) {
          finish_request(inst, idx);
        } else if (inst.role == Role::kPrefill) {
          r.state = ReqState::kHandoff;
          handoff_.push_back(idx);
        } else {
          r.state = ReqState::kDecode;
          inst.decode.insert(idx);
        }
      }
      if (inst.role == Role::kPrefill) try_handoff();
    } else {
      for (std::size_t idx : batch) {
        Req& r = reqs_[idx];
        if (r.state != ReqState::kDecode || r.instance != q) continue;  // evicted meanwhile
        r.generated += 1;
        generated_ += 1;
        if (r.generated >= r.e.output_tokens) {
          finish_request(inst, idx);
          continue;
        }
        grow(q, idx);
      }
      track_peak();
      if (cfg_.policy == Policy::kHetis) rebalance(q);
      if (cfg_.policy == Policy::kPhaseSplit) try_handoff();
    }
    track_peak();
    try_start(q);
  }

  // ---- growth, eviction, re-dispatch --------------------------------------

  // First (stage, slot) whose ledger cannot take the next token of `id`.
  std::optional<std::pair<std::size_t, std::size_t>> growth_blocker(const InstanceRt& inst,
                                                                    RequestId id) const {
    for (std::size_t k = 0; k < inst.stages.size(); ++k) {
      const StageRt& st = inst.stages[k];
      for (std::size_t i = 0; i < st.slots.size(); ++i) {
        const BlockLedger& led = st.slots[i].ledger;
        std::int64_t need = 0;
        for (int g : led.groups_of(id)) {
          if (led.tokens(id, g) % cfg_.block_size == 0) ++need;
        }
        if (need > led.free_blocks()) return std::make_pair(k, i);
      }
    }
    return std::nullopt;
  }

  void grow(int q, std::size_t idx) {
    InstanceRt& inst = instances_[static_cast<std::size_t>(q)];
    const RequestId id = reqs_[idx].id;
    for (int step = 0; step < cfg_.max_relieve_steps; ++step) {
      const auto blocker = growth_blocker(inst, id);
      if (!blocker) {
        for (StageRt& st : inst.stages) {
          const std::size_t k = st.find(id);
          for (Slot& sl : st.slots) {
            if (sl.ledger.resident(id) && !sl.ledger.append_token(id).ok) {
              throw InternalError("block ledger growth failed after a successful check");
            }
          }
          RequestState& rs = st.reqs[k];
          for (std::size_t i = 0; i < st.states.size(); ++i) {
            st.states[i].g += cache_units(rs.allocation[i], 1, r_);
          }
          rs.context_len += 1;
          rs.remaining_output = reqs_[idx].e.output_tokens - reqs_[idx].generated;
          st.sync_budgets();
        }
        return;
      }
      const auto [k, slot] = *blocker;
      StageRt& st = inst.stages[k];
      std::size_t victim = 0;
      if (st.hauler) {
        const MemoryDecision d = st.hauler->relieve_memory(slot, st.states, st.reqs, st.costs);
        victim = static_cast<std::size_t>(d.victim);
        bool moved = false;
        if (d.action == MemoryAction::kRedispatch) moved = move_request(q, k, victim, d.new_allocation);
        emit({{"type", "relieve"},
              {"instance", q},
              {"stage", k},
              {"device", st.slots[slot].device},
              {"victim", d.victim},
              {"action", moved ? "redispatch" : "evict"},
              {"ideal", d.ideal},
              {"new_objective", d.new_objective},
              {"stop", moved ? to_string(d.stop) : to_string(HaulerStop::kMemory)}});
        if (moved) continue;
      } else {
        // Latest arrival among the requests holding blocks on this slot.
        const BlockLedger& led = st.slots[slot].ledger;
        bool found = false;
        for (auto it = st.reqs.rbegin(); it != st.reqs.rend(); ++it) {
          if (led.resident(it->id)) {
            victim = static_cast<std::size_t>(it->id);
            found = true;
            break;
          }
        }
        if (!found) throw InternalError("no request holds blocks on an exhausted device");
      }
      evict(q, victim);
      if (victim == idx) return;
    }
    evict(q, idx);
  }

  void evict(int q, std::size_t idx) {
    InstanceRt& inst = instances_[static_cast<std::size_t>(q)];
    const bool alone = inst.resident.size() == 1;
    release(inst, idx);
    Req& r = reqs_[idx];
    if (r.state == ReqState::kTransit) {
      // Still held by the prefill pool; the pending arrival becomes a no-op.
      release(instances_[static_cast<std::size_t>(r.instance)], idx);
    }
    r.evictions += 1;
    ++evictions_;
    emit({{"type", "evict"}, {"instance", q}, {"request", r.id}, {"generated", r.generated}});
    if (alone) {
      // Nothing else to make room for it: it can never finish here.
      r.state = ReqState::kRejected;
      emit({{"type", "reject"}, {"request", r.id}, {"tokens", context_of(r)}});
      return;
    }
    const Role entry = cfg_.policy == Policy::kPhaseSplit ? Role::kPrefill : Role::kMixed;
    const std::size_t target = entry == inst.role ? static_cast<std::size_t>(q) : pick_instance(entry);
    r.instance = static_cast<int>(target);
    r.state = ReqState::kWaiting;
    instances_[target].waiting.push_front(idx);
    if (target != static_cast<std::size_t>(q)) try_start(static_cast<int>(target));
  }

  // Moves request `idx` of stage k to `alloc` if the destination ledgers can
  // take every moved group. Returns false (nothing changed) otherwise.
  bool move_request(int q, std::size_t k, std::size_t idx, const std::vector<int>& alloc) {
    StageRt& st = instances_[static_cast<std::size_t>(q)].stages[k];
    const RequestId id = reqs_[idx].id;
    const std::size_t pos = st.find(id);
    RequestState& rs = st.reqs[pos];
    const MigrationPlan plan = plan_migration(rs, st.owners[id], alloc, model_, st.layers);
    std::map<std::size_t, std::int64_t> need;
    for (const GroupMove& m : plan.moves) {
      need[m.to] += BlockLedger::blocks_for_tokens(
          st.slots[m.from].ledger.tokens(id, m.group), cfg_.block_size);
    }
    for (const auto& [to, blocks] : need) {
      if (blocks > st.slots[to].ledger.free_blocks()) return false;
    }
    std::map<std::pair<std::size_t, std::size_t>, double> bytes;
    const double per_token = 2.0 * static_cast<double>(model_.kv_bytes_per_head_token) * st.layers;
    for (const GroupMove& m : plan.moves) {
      const std::int64_t tokens = st.slots[m.from].ledger.tokens(id, m.group);
      const int group = m.group;
      if (!migrate(st.slots[m.from].ledger, st.slots[m.to].ledger, id,
                   std::span<const int>(&group, 1), tokens)
               .ok) {
        throw InternalError("block migration failed after a successful check");
      }
      st.owners[id][static_cast<std::size_t>(m.group)] = m.to;
      bytes[{m.from, m.to}] += per_token * static_cast<double>(tokens);
    }
    reassign(st.states, rs, alloc, r_);
    st.sync_budgets();
    double done = now_;
    for (const auto& [pair, b] : bytes) {
      const NetworkLink& link = cluster_.link(st.slots[pair.first].device, st.slots[pair.second].device);
      done = std::max(done, now_ + link.transfer_seconds(b));
    }
    if (!plan.moves.empty()) {
      ++migrations_;
      moved_bytes_ += plan.moved_bytes;
      reqs_[idx].blocked_until = std::max(reqs_[idx].blocked_until, done);
      push({done, 0, EventKind::kMigrationDone, q, idx});
    }
    return true;
  }

  void rebalance(int q) {
    InstanceRt& inst = instances_[static_cast<std::size_t>(q)];
    for (std::size_t k = 0; k < inst.stages.size(); ++k) {
      StageRt& st = inst.stages[k];
      if (st.reqs.empty() || st.slots.size() < 2) continue;
      double f_star = 0.0;
      try {
        f_star = ideal_time(st.reqs, st.states, st.costs);
      } catch (const Infeasible&) {
        continue;
      }
      const auto d = st.hauler->maybe_rebalance(st.reqs, st.states, st.costs, f_star);
      if (!d) continue;
      RebalanceRecord rec;
      rec.time = now_;
      rec.instance = q;
      rec.stage = static_cast<int>(k);
      rec.victim = d->victim.value_or(-1);
      rec.ideal = d->ideal;
      rec.before = d->current;
      rec.after = d->current;
      rec.stop = to_string(d->stop);
      if (d->changed && d->victim) {
        const auto idx = static_cast<std::size_t>(*d->victim);
        const std::int64_t before_bytes = moved_bytes_;
        if (move_request(q, k, idx, d->new_allocation)) {
          rec.applied = true;
          rec.after = max_f(st);
          rec.moved_bytes = moved_bytes_ - before_bytes;
        } else {
          rec.stop = to_string(HaulerStop::kMemory);
          st.hauler->disarm_at(d->current / d->ideal);
        }
      }
      emit({{"type", "rebalance"},
            {"instance", q},
            {"stage", k},
            {"victim", rec.victim},
            {"ideal", rec.ideal},
            {"before", rec.before},
            {"after", rec.after},
            {"moved_bytes", rec.moved_bytes},
            {"applied", rec.applied},
            {"stop", rec.stop}});
      rebalances_.push_back(rec);
    }
  }

  // ---- phase split hand-off -----------------------------------------------

  void try_handoff() {
    while (!handoff_.empty()) {
      const std::size_t idx = handoff_.front();
      const std::size_t d = pick_instance(Role::kDecode);
      InstanceRt& dst = instances_[d];
      const std::int64_t l = context_of(reqs_[idx]);
      if (dst.resident.size() >= static_cast<std::size_t>(cfg_.max_batch) ||
          !static_fits(dst, {l})) {
        return;
      }
      handoff_.pop_front();
      for (StageRt& st : dst.stages) place(st, idx, st.static_alloc, l);
      dst.resident.insert(idx);
      const double bytes = static_cast<double>(kv_bytes(model_, model_.n_query_heads, l)) *
                           model_.n_layers;
      const auto src = static_cast<std::size_t>(reqs_[idx].instance);
      const NetworkLink link = slowest_between(plan_.instances[src].all_devices(),
                                               plan_.instances[d].all_devices(), cluster_);
      link_free_ = std::max(link_free_, now_) + link.transfer_seconds(bytes);
      ++migrations_;
      moved_bytes_ += static_cast<std::int64_t>(bytes);
      reqs_[idx].state = ReqState::kTransit;
      reqs_[idx].blocked_until = link_free_;
      emit({{"type", "handoff"}, {"request", reqs_[idx].id}, {"bytes", bytes}, {"done", link_free_}});
      push({link_free_, 0, EventKind::kMigrationDone, static_cast<int>(d), idx});
      track_peak();
    }
  }

  void on_migration_done(int q, std::size_t idx) {
    Req& r = reqs_[idx];
    if (r.state == ReqState::kTransit) {
      InstanceRt& src = instances_[static_cast<std::size_t>(r.instance)];
      release(src, idx);
      r.instance = q;
      r.state = ReqState::kDecode;
      instances_[static_cast<std::size_t>(q)].decode.insert(idx);
      try_start(static_cast<int>(&src - instances_.data()));
    }
    try_start(q);
  }

  // ---- results ------------------------------------------------------------

  void track_peak() {
    double used = 0.0;
    for (const auto& inst : instances_) {
      for (const auto& st : inst.stages) {
        double blocks = 0.0;
        for (const auto& sl : st.slots) blocks += static_cast<double>(sl.ledger.used_blocks());
        used += weight(st) * blocks;
      }
    }
    peak_ = std::max(peak_, used);
  }

  SimResult finish_result() {
    SimResult out;
    out.plan = plan_;
    out.iterations = std::move(samples_);
    out.rebalances = std::move(rebalances_);
    out.events = std::move(log_);
    SimSummary& s = out.summary;
    s.policy = to_string(cfg_.policy);
    s.instances = static_cast<int>(instances_.size());
    s.requests = static_cast<int>(reqs_.size());
    std::vector<double> ttft;
    std::vector<double> tpot;
    for (const Req& r : reqs_) {
      RequestRecord rec;
      rec.id = r.id;
      rec.entry = r.e;
      rec.instance = r.instance;
      rec.first_token = r.first_token;
      rec.finish = r.finish;
      rec.evictions = r.evictions;
      if (r.first_token >= 0.0) rec.ttft = r.first_token - r.e.arrival_s;
      if (r.state == ReqState::kDone) {
        rec.status = RequestStatus::kCompleted;
        rec.tpot = r.e.output_tokens > 1
                       ? (r.finish - r.first_token) / static_cast<double>(r.e.output_tokens - 1)
                       : 0.0;
        ++s.completed;
        ttft.push_back(rec.ttft);
        tpot.push_back(rec.tpot);
        s.makespan = std::max(s.makespan, r.finish);
      } else if (r.state == ReqState::kRejected) {
        rec.status = RequestStatus::kRejected;
        ++s.rejected;
      }
      out.requests.push_back(rec);
    }
    s.evictions = evictions_;
    s.migrations = migrations_;
    s.moved_bytes = moved_bytes_;
    s.generated_tokens = generated_;
    s.throughput = s.makespan > 0.0 ? s.completed / s.makespan : 0.0;
    s.ttft_p50 = percentile(ttft, 0.5);
    s.ttft_p95 = percentile(ttft, 0.95);
    s.tpot_p50 = percentile(tpot, 0.5);
    s.tpot_p95 = percentile(tpot, 0.95);
    s.peak_cache_blocks = peak_;
    s.cache_capacity_blocks = capacity_;
    for (const auto& rec : out.rebalances) s.rebalances += rec.applied ? 1 : 0;
    return out;
  }

  const ClusterSpec& cluster_;
  const ModelSpec& model_;
  SimConfig cfg_;
  int r_ = 1;
  int groups_ = 1;
  double act_bytes_ = 0.0;
  ParallelPlan plan_;
  std::vector<Req> reqs_;
  std::vector<InstanceRt> instances_;
  std::deque<std::size_t> handoff_;
  double link_free_ = 0.0;
  std::priority_queue<Event, std::vector<Event>, std::greater<>> events_;
  std::uint64_t seq_ = 0;
  double now_ = 0.0;
  double peak_ = 0.0;
  double capacity_ = 0.0;
  int evictions_ = 0;
  int migrations_ = 0;
  std::int64_t moved_bytes_ = 0;
  std::int64_t generated_ = 0;
  std::vector<IterationSample> samples_;
  std::vector<RebalanceRecord> rebalances_;
  std::vector<std::string> log_;
};

double capability(const DeviceSpec& d) { return d.dense_rate + d.effective_decode_rate(); }

}  // namespace

SimResult simulate(const ClusterSpec& cluster, const ModelSpec& model,
                   const std::vector<TraceEntry>& trace, const SimConfig& config,
                   const std::optional<ParallelPlan>& plan) {
  config.validate();
  cluster.validate();
  model.validate();
  if (cluster.size() == 0) throw InvalidArgument("cluster has no devices");
  SearchOptions opts;
  opts.delta = config.delta;
  opts.mem_util = config.mem_util;
  WorkloadProfile load;
  if (!trace.empty()) load = profile_of(trace, config.plan_batch);

  Engine engine(cluster, model, trace, config);
  std::vector<DeviceId> all;
  for (const auto& d : cluster.devices()) all.push_back(d.id);

  switch (config.policy) {
    case Policy::kHetis: {
      ParallelPlan p;
      if (plan) {
        p = *plan;
      } else {
        p = search_plan(cluster, model, load, opts).plan;
      }
      p.validate(cluster, model);
      for (const auto& inst : p.instances) engine.add_instance(inst, Role::kMixed);
      break;
    }
    case Policy::kParamSplit:
      engine.add_instance(plan_instance(all, cluster, model, load, false, opts).first, Role::kMixed);
      break;
    case Policy::kPhaseSplit: {
      // Prefill pool: the fewest devices of the strongest kind that hold the
      // parameters; everything else decodes.
      std::vector<DeviceId> top;
      for (const auto& d : cluster.devices()) {
        if (top.empty() || capability(d) > capability(cluster.device(top.front()))) {
          top.assign(1, d.id);
        } else if (capability(d) == capability(cluster.device(top.front()))) {
          top.push_back(d.id);
        }
      }
      std::optional<InstancePlan> prefill;
      std::optional<InstancePlan> decode;
      for (std::size_t n = 1; n <= top.size() && !decode; ++n) {
        const std::vector<DeviceId> pre(top.begin(), top.begin() + static_cast<long>(n));
        std::vector<DeviceId> rest;
        for (DeviceId id : all) {
          if (std::find(pre.begin(), pre.end(), id) == pre.end()) rest.push_back(id);
        }
        if (rest.empty()) break;
        try {
          auto a = plan_instance(pre, cluster, model, load, false, opts).first;
          auto b = plan_instance(rest, cluster, model, load, false, opts).first;
          prefill = std::move(a);
          decode = std::move(b);
        } catch (const Infeasible&) {
        }
      }
      if (!decode) {
        throw Infeasible("phase_split: no split of the cluster holds the model in both pools");
      }
      engine.add_instance(*prefill, Role::kPrefill);
      engine.add_instance(*decode, Role::kDecode);
      break;
    }
  }
  return engine.run();
}

namespace {

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string status_name(RequestStatus s) {
  switch (s) {
    case RequestStatus::kCompleted:
      return "completed";
    case RequestStatus::kRejected:
      return "rejected";
    case RequestStatus::kIncomplete:
      return "incomplete";
  }
  return "incomplete";
}

}  // namespace

std::string requests_csv(const SimResult& result) {
  std::string out =
      "id,arrival_s,prompt_tokens,output_tokens,instance,first_token_s,finish_s,ttft_s,tpot_s,"
      "evictions,status\n";
  for (const auto& r : result.requests) {
    out += std::to_string(r.id) + ',' + num(r.entry.arrival_s) + ',' +
           std::to_string(r.entry.prompt_tokens) + ',' + std::to_string(r.entry.output_tokens) +
           ',' + std::to_string(r.instance) + ',' + num(r.first_token) + ',' + num(r.finish) +
           ',' + num(r.ttft) + ',' + num(r.tpot) + ',' + std::to_string(r.evictions) + ',' +
           status_name(r.status) + '\n';
  }
  return out;
}

std::string summary_json(const SimResult& result) {
  const SimSummary& s = result.summary;
  json j = {{"policy", s.policy},
            {"instances", s.instances},
            {"requests", s.requests},
            {"completed", s.completed},
            {"rejected", s.rejected},
            {"evictions", s.evictions},
            {"migrations", s.migrations},
            {"moved_bytes", s.moved_bytes},
            {"generated_tokens", s.generated_tokens},
            {"makespan_s", s.makespan},
            {"throughput_rps", s.throughput},
            {"ttft_p50_s", s.ttft_p50},
            {"ttft_p95_s", s.ttft_p95},
            {"tpot_p50_s", s.tpot_p50},
            {"tpot_p95_s", s.tpot_p95},
            {"peak_cache_blocks", s.peak_cache_blocks},
            {"cache_capacity_blocks", s.cache_capacity_blocks},
            {"rebalances", s.rebalances}};
  return j.dump(2) + "\n";
}

std::string events_jsonl(const SimResult& result) {
  std::string out;
  for (const auto& line : result.events) {
    out += line;
    out += '\n';
  }
  return out;
}

void write_metrics(const SimResult& result, const std::string& dir) {
  write_text_file(dir + "/requests.csv", requests_csv(result));
  write_text_file(dir + "/summary.json", summary_json(result));
  write_text_file(dir + "/events.jsonl", events_jsonl(result));
}

}  // namespace hetis
