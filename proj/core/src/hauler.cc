#include "hetis/hauler.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <utility>

#include "hetis/errors.h"

namespace hetis {

void HaulerConfig::validate() const {
  if (!(theta > 0.0)) throw InvalidArgument("theta must be > 0");
}

std::string to_string(HaulerStop stop) {
  switch (stop) {
    case HaulerStop::kNone:
      return "none";
    case HaulerStop::kThresholdGap:
      return "threshold_gap";
    case HaulerStop::kNoImprovement:
      return "no_improvement";
    case HaulerStop::kMemory:
      return "memory";
  }
  return "unknown";
}

std::vector<std::size_t> canonical_owners(std::span<const int> allocation, int gqa_ratio) {
  std::vector<std::size_t> owners;
  for (std::size_t i = 0; i < allocation.size(); ++i) {
    if (allocation[i] < 0 || allocation[i] % gqa_ratio != 0) {
      throw InvalidArgument("allocation entries must be non-negative multiples of r");
    }
    for (int k = 0; k < allocation[i] / gqa_ratio; ++k) owners.push_back(i);
  }
  return owners;
}

MigrationPlan plan_migration(const RequestState& request, std::span<const std::size_t> owners,
                             std::span<const int> new_allocation, const ModelSpec& model,
                             int layers) {
  const int r = model.gqa_ratio;
  const std::size_t n = new_allocation.size();
  std::vector<int> have(n, 0);
  for (std::size_t w : owners) {
    if (w >= n) throw InvalidArgument("plan_migration: owner outside the worker range");
    ++have[w];
  }
  std::vector<int> want(n, 0);
  int new_groups = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (new_allocation[i] < 0 || new_allocation[i] % r != 0) {
      throw InvalidArgument("plan_migration: entries must be non-negative multiples of r");
    }
    want[i] = new_allocation[i] / r;
    new_groups += want[i];
  }
  if (new_groups != static_cast<int>(owners.size())) {
    throw InvalidArgument("plan_migration: old and new allocations hold different head counts");
  }

  MigrationPlan plan;
  std::vector<int> surplus(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    plan.reused_groups += std::min(have[i], want[i]);
    surplus[i] = have[i] - want[i];
  }
  std::size_t dst = 0;
  auto next_deficit = [&]() {
    while (dst < n && surplus[dst] >= 0) ++dst;
  };
  next_deficit();
  for (std::size_t g = 0; g < owners.size(); ++g) {
    const std::size_t src = owners[g];
    if (surplus[src] <= 0) continue;
    if (dst >= n) throw InternalError("plan_migration: surplus without deficit");
    plan.moves.push_back({request.id, static_cast<int>(g), src, dst, request.context_len});
    --surplus[src];
    ++surplus[dst];
    next_deficit();
  }
  const int span_layers = layers > 0 ? layers : model.n_layers;
  plan.moved_bytes = static_cast<std::int64_t>(plan.moves.size()) * request.context_len * 2 *
                     model.kv_bytes_per_head_token * span_layers;
  return plan;
}

MigrationPlan plan_migration(const RequestState& request, std::span<const int> old_allocation,
                             std::span<const int> new_allocation, const ModelSpec& model,
                             int layers) {
  if (old_allocation.size() != new_allocation.size()) {
    throw InvalidArgument("plan_migration: allocation widths differ");
  }
  const std::vector<std::size_t> owners = canonical_owners(old_allocation, model.gqa_ratio);
  return plan_migration(request, owners, new_allocation, model, layers);
}

double contribution(const DeviceState& state, const WorkerCost& cost, int gqa_ratio, int heads,
                    std::int64_t context_len) {
  return head_coefficient(state, cost, gqa_ratio) * heads +
         cost.attn.b * static_cast<double>(cache_units(heads, context_len, gqa_ratio));
}

namespace {

struct Lane {
  double per_head = 0.0;   // seconds per head, independent of length
  double per_token = 0.0;  // seconds per head per context token
  double fixed = 0.0;      // c
  double open_cost = 0.0;  // beta once any head lands
};

// True when every request's heads fit under time z. Lanes are visited in
// ascending per_token/per_head order and requests in descending length, so a
// lane that is relatively cheap on long contexts takes the longest ones.
bool fits_under(double z, const std::vector<Lane>& lanes, const std::vector<std::size_t>& order,
                const std::vector<double>& lens_desc, double heads) {
  std::vector<double> cap(lanes.size());
  std::vector<bool> open(lanes.size());
  for (std::size_t i = 0; i < lanes.size(); ++i) {
    open[i] = z >= lanes[i].fixed + lanes[i].open_cost;
    cap[i] = open[i] ? z - lanes[i].fixed - lanes[i].open_cost : 0.0;
  }
  std::size_t p = 0;
  for (double l : lens_desc) {
    double left = heads;
    while (left > 0.0) {
      while (p < order.size() && !open[order[p]]) ++p;
      if (p == order.size()) {
        if (left > heads * 1e-12) return false;
        break;
      }
      const Lane& lane = lanes[order[p]];
      const double w = lane.per_head + lane.per_token * l;
      if (w <= 0.0) {
        left = 0.0;
        break;
      }
      const double take = std::min(left, cap[order[p]] / w);
      left -= take;
      cap[order[p]] -= take * w;
      if (left > 0.0) ++p;
    }
  }
  return true;
}

}  // namespace

double ideal_time(std::span<const RequestState> requests, std::span<const DeviceState> states,
                  const StageCosts& costs) {
  if (costs.workers.size() != states.size()) {
    throw InvalidArgument("ideal_time: cost and state vectors differ in size");
  }
  if (states.empty()) throw InvalidArgument("ideal_time: stage has no workers");
  const int r = costs.gqa_ratio;
  const double heads = costs.n_heads;

  std::int64_t budget = 0;
  for (const auto& s : states) budget += s.budget;
  std::int64_t need = 0;
  std::vector<double> lens;
  for (const auto& req : requests) {
    if (req.phase == Phase::kFinished) continue;
    need += cache_units(costs.n_heads, req.context_len, r);
    lens.push_back(static_cast<double>(req.context_len));
  }
  if (need > budget) {
    throw Infeasible("ideal_time: requests need " + std::to_string(need) +
                         " cache units, stage holds " + std::to_string(budget),
                     static_cast<double>(need - budget));
  }
  std::sort(lens.begin(), lens.end(), std::greater<>());

  std::vector<Lane> lanes(states.size());
  double lo = 0.0;
  for (std::size_t i = 0; i < states.size(); ++i) {
    DeviceState idle = states[i];
    idle.h = 0;
    idle.g = 0;
    lanes[i].per_head = head_coefficient(idle, costs.workers[i], r);
    lanes[i].per_token = costs.workers[i].attn.b * 2.0 / r;
    lanes[i].fixed = costs.workers[i].attn.c;
    lanes[i].open_cost = states[i].is_primary ? 0.0 : costs.workers[i].xfer.beta;
    lo = std::max(lo, lanes[i].fixed);
  }
  if (lens.empty()) return lo;

  std::vector<std::size_t> order(lanes.size());
  std::iota(order.begin(), order.end(), 0);
  auto theta = [&](std::size_t i) {
    const Lane& l = lanes[i];
    if (l.per_head > 0.0) return l.per_token / l.per_head;
    return l.per_token > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
  };
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return theta(a) < theta(b); });

  if (fits_under(lo, lanes, order, lens, heads)) return lo;
  // Everything on one lane is always feasible.
  double hi = std::numeric_limits<double>::infinity();
  for (const Lane& l : lanes) {
    double z = l.fixed + l.open_cost;
    for (double len : lens) z += heads * (l.per_head + l.per_token * len);
    hi = std::min(hi, std::max(z, lo));
  }
  for (int iter = 0; iter < 200 && hi - lo > 1e-14 * hi; ++iter) {
    const double mid = 0.5 * (lo + hi);
    if (fits_under(mid, lanes, order, lens, heads)) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  return hi;
}

Hauler::Hauler(HaulerConfig cfg, ModelSpec model, int layers)
    : cfg_(cfg), model_(std::move(model)), layers_(layers) {
  cfg_.validate();
  model_.validate();
  if (layers_ < 1) throw InvalidArgument("hauler: layers must be >= 1");
}

std::optional<RebalanceDecision> Hauler::maybe_rebalance(std::span<const RequestState> requests,
                                                         std::span<const DeviceState> states,
                                                         const StageCosts& costs, double f_star) {
  if (!(f_star > 0.0)) return std::nullopt;
  const DispatchObjective now = current_objective(states, costs);
  const double ratio = now.objective / f_star;
  if (ratio <= 1.0 + cfg_.theta) {
    disarm_ratio_.reset();
    return std::nullopt;
  }
  if (disarm_ratio_ && ratio <= *disarm_ratio_ * (1.0 + 1e-9)) return std::nullopt;

  const std::size_t bottleneck = static_cast<std::size_t>(
      std::max_element(now.per_device_f.begin(), now.per_device_f.end()) -
      now.per_device_f.begin());
  const int r = costs.gqa_ratio;
  std::size_t victim = requests.size();
  double best = -1.0;
  for (std::size_t j = 0; j < requests.size(); ++j) {
    const RequestState& req = requests[j];
    if (!req.placed() || req.phase == Phase::kFinished) continue;
    const int x = req.allocation[bottleneck];
    if (x == 0) continue;
    const double c = contribution(states[bottleneck], costs.workers[bottleneck], r, x,
                                  req.context_len);
    if (c > best) {
      best = c;
      victim = j;
    }
  }
  if (victim == requests.size()) {
    disarm_ratio_ = ratio;
    return std::nullopt;
  }

  RebalanceDecision d;
  d.ideal = f_star;
  d.current = now.objective;
  d.victim = requests[victim].id;
  d.victim_index = victim;

  DispatchRound round;
  round.states.assign(states.begin(), states.end());
  apply_allocation(round.states, requests[victim], r, -1);
  RequestState moved = requests[victim];
  moved.allocation.clear();
  round.new_requests.push_back(moved);
  const DispatchResult res = dispatch(round, costs);

  const std::vector<int>& old = requests[victim].allocation;
  if (res.objective.objective < now.objective * (1.0 - 1e-12) && res.x[0] != old) {
    d.new_allocation = res.x[0];
    d.new_objective = res.objective.objective;
    d.changed = true;
    d.stop = d.new_objective <= (1.0 + cfg_.theta) * f_star ? HaulerStop::kNone
                                                             : HaulerStop::kThresholdGap;
    d.migration = plan_migration(requests[victim], old, d.new_allocation, model_, layers_);
  } else {
    d.new_allocation = old;
    d.new_objective = now.objective;
    d.stop = HaulerStop::kNoImprovement;
  }
  const double post = d.new_objective / f_star;
  if (post > 1.0 + cfg_.theta) {
    disarm_ratio_ = post;
  } else {
    disarm_ratio_.reset();
  }
  return d;
}

MemoryDecision Hauler::relieve_memory(std::size_t exhausted, std::span<const DeviceState> states,
                                      std::span<const RequestState> requests,
                                      const StageCosts& costs,
                                      std::optional<double> f_star) const {
  if (exhausted >= states.size()) throw InvalidArgument("relieve_memory: worker out of range");
  const int r = costs.gqa_ratio;
  std::size_t victim = requests.size();
  for (std::size_t j = 0; j < requests.size(); ++j) {
    const RequestState& req = requests[j];
    if (!req.placed() || req.phase == Phase::kFinished || req.allocation[exhausted] == 0) continue;
    if (victim == requests.size() || req.arrival > requests[victim].arrival ||
        (req.arrival == requests[victim].arrival && req.id > requests[victim].id)) {
      victim = j;
    }
  }
  if (victim == requests.size()) {
    throw InternalError("relieve_memory: worker " + std::to_string(states[exhausted].device) +
                        " hosts no request");
  }

  MemoryDecision d;
  d.victim = requests[victim].id;
  d.victim_index = victim;
  d.action = MemoryAction::kEvict;

  std::int64_t used = 0;
  std::int64_t budget = 0;
  for (const auto& s : states) {
    used += s.g;
    budget += s.budget;
  }
  if (used >= budget) {
    d.stop = HaulerStop::kMemory;
    return d;
  }
  if (f_star) {
    d.ideal = *f_star;
  } else {
    try {
      d.ideal = ideal_time(requests, states, costs);
    } catch (const Infeasible&) {
      d.stop = HaulerStop::kMemory;
      return d;
    }
  }

  // Re-place the victim away from the exhausted worker with room for its
  // next token.
  DispatchRound round;
  round.states.assign(states.begin(), states.end());
  apply_allocation(round.states, requests[victim], r, -1);
  round.states[exhausted].budget = round.states[exhausted].g;
  RequestState grown = requests[victim];
  grown.allocation.clear();
  grown.context_len += 1;
  round.new_requests.push_back(grown);
  DispatchResult res;
  try {
    res = dispatch(round, costs);
  } catch (const Infeasible&) {
    d.stop = HaulerStop::kMemory;
    return d;
  }

  std::vector<DeviceState> after(states.begin(), states.end());
  RequestState placed = requests[victim];
  reassign(after, placed, res.x[0], r);
  d.new_objective = current_objective(after, costs).objective;
  if (d.new_objective > (1.0 + cfg_.theta) * d.ideal) {
    d.stop = HaulerStop::kThresholdGap;
    return d;
  }
  d.action = MemoryAction::kRedispatch;
  d.new_allocation = res.x[0];
  d.migration =
      plan_migration(requests[victim], requests[victim].allocation, d.new_allocation, model_,
                     layers_);
  return d;
}

void reassign(std::span<DeviceState> states, RequestState& request,
              std::span<const int> new_allocation, int gqa_ratio) {
  if (new_allocation.size() != states.size()) {
    throw InternalError("reassign: allocation width does not match worker count");
  }
  apply_allocation(states, request, gqa_ratio, -1);
  request.allocation.assign(new_allocation.begin(), new_allocation.end());
  apply_allocation(states, request, gqa_ratio, +1);
}

}  // namespace hetis
