#include "hetis/dispatcher.h"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>

#include "hetis/errors.h"
#include "hetis/lp.h"

namespace hetis {

double head_coefficient(const DeviceState& state, const WorkerCost& cost, int gqa_ratio) {
  if (state.is_primary) return cost.attn.a;
  return cost.attn.a + transfer_units_per_head(gqa_ratio) * cost.xfer.gamma;
}

double eval_f(const DeviceState& state, const WorkerCost& cost, int gqa_ratio,
              std::int64_t added_heads, std::int64_t added_units) {
  const auto heads = static_cast<double>(state.h + added_heads);
  const auto units = static_cast<double>(state.g + added_units);
  double f = head_coefficient(state, cost, gqa_ratio) * heads + cost.attn.b * units + cost.attn.c;
  if (!state.is_primary && state.h + added_heads > 0) f += cost.xfer.beta;
  return f;
}

double eval_f(const DeviceState& state, const WorkerCost& cost, int gqa_ratio,
              std::span<const int> heads, std::span<const std::int64_t> lens) {
  if (heads.size() != lens.size()) throw InvalidArgument("eval_f: heads/lens size mismatch");
  std::int64_t added_heads = 0;
  std::int64_t added_units = 0;
  for (std::size_t j = 0; j < heads.size(); ++j) {
    if (heads[j] % gqa_ratio != 0) {
      throw InvalidArgument("eval_f: head counts must be multiples of the gqa ratio");
    }
    added_heads += heads[j];
    added_units += cache_units(heads[j], lens[j], gqa_ratio);
  }
  return eval_f(state, cost, gqa_ratio, added_heads, added_units);
}

DispatchObjective current_objective(std::span<const DeviceState> states, const StageCosts& costs) {
  DispatchObjective out;
  out.per_device_f.reserve(states.size());
  for (std::size_t i = 0; i < states.size(); ++i) {
    out.per_device_f.push_back(eval_f(states[i], costs.workers[i], costs.gqa_ratio, 0, 0));
  }
  out.objective = out.per_device_f.empty()
                      ? 0.0
                      : *std::max_element(out.per_device_f.begin(), out.per_device_f.end());
  return out;
}

namespace {

constexpr double kRelTol = 1e-12;

// Integral placement in head groups (multiples of r) with incremental f.
class GroupPlacement {
 public:
  GroupPlacement(const std::vector<DeviceState>& states, const StageCosts& costs,
                 const std::vector<std::int64_t>& lens)
      : states_(&states),
        costs_(&costs),
        lens_(&lens),
        r_(costs.gqa_ratio),
        y_(lens.size(), std::vector<int>(states.size(), 0)),
        heads_(states.size(), 0),
        units_(states.size(), 0) {}

  std::size_t n_dev() const { return states_->size(); }
  std::size_t n_req() const { return lens_->size(); }

  int groups(std::size_t j, std::size_t i) const { return y_[j][i]; }

  void add(std::size_t j, std::size_t i, int delta) {
    y_[j][i] += delta;
    heads_[i] += static_cast<std::int64_t>(delta) * r_;
    units_[i] += 2 * static_cast<std::int64_t>(delta) * (*lens_)[j];
  }

  std::int64_t group_units(std::size_t j) const { return 2 * (*lens_)[j]; }

  std::int64_t over_budget(std::size_t i) const { return units_[i] - (*states_)[i].free(); }
  bool fits(std::size_t i, std::int64_t extra_units) const {
    return units_[i] + extra_units <= (*states_)[i].free();
  }

  double f(std::size_t i) const { return f_with(i, 0, 0); }
  double f_with(std::size_t i, std::int64_t d_heads, std::int64_t d_units) const {
    return eval_f((*states_)[i], costs_->workers[i], r_, heads_[i] + d_heads, units_[i] + d_units);
  }

  std::vector<double> all_f() const {
    std::vector<double> out(n_dev());
    for (std::size_t i = 0; i < n_dev(); ++i) out[i] = f(i);
    return out;
  }

  double objective() const {
    double m = 0.0;
    for (std::size_t i = 0; i < n_dev(); ++i) m = std::max(m, f(i));
    return m;
  }

  HeadAllocation heads_matrix() const {
    HeadAllocation x(n_req(), std::vector<int>(n_dev(), 0));
    for (std::size_t j = 0; j < n_req(); ++j) {
      for (std::size_t i = 0; i < n_dev(); ++i) x[j][i] = y_[j][i] * r_;
    }
    return x;
  }

 private:
  const std::vector<DeviceState>* states_;
  const StageCosts* costs_;
  const std::vector<std::int64_t>* lens_;
  int r_;
  std::vector<std::vector<int>> y_;
  std::vector<std::int64_t> heads_;
  std::vector<std::int64_t> units_;
};

// Descending-sorted f vector comparison: true when `a` is strictly better.
bool lex_better(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end(), std::greater<>());
  std::sort(b.begin(), b.end(), std::greater<>());
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double tol = kRelTol * std::max({1e-300, std::abs(a[k]), std::abs(b[k])});
    if (a[k] < b[k] - tol) return true;
    if (a[k] > b[k] + tol) return false;
  }
  return false;
}

struct LpOutcome {
  bool feasible = false;
  double objective = std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> y;  // [request][device] groups
  std::vector<bool> open;
};

// Continuous relaxation for a fixed set of usable workers. Idle attention
// workers in `usable` are charged beta.
LpOutcome solve_relaxation(const std::vector<DeviceState>& states, const StageCosts& costs,
                           const std::vector<std::int64_t>& lens, const std::vector<bool>& usable,
                           double time_scale) {
  const std::size_t n = states.size();
  const std::size_t nj = lens.size();
  const int r = costs.gqa_ratio;
  const int groups = costs.n_heads / r;

  std::vector<std::size_t> dev_index;  // usable devices
  for (std::size_t i = 0; i < n; ++i) {
    if (usable[i]) dev_index.push_back(i);
  }
  LpOutcome out;
  out.open = usable;
  if (dev_index.empty()) return out;

  const std::size_t nu = dev_index.size();
  const std::size_t z = nu * nj;
  auto var = [&](std::size_t k, std::size_t j) { return k * nj + j; };
  lp::LinearProgram program(z + 1);
  program.set_cost(z, 1.0);

  double floor_f = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double base = eval_f(states[i], costs.workers[i], r, 0, 0);
    if (!usable[i]) floor_f = std::max(floor_f, base);
  }
  if (floor_f > 0.0) {
    program.add_row({{{z, 1.0}}, lp::Sense::kGreaterEqual, floor_f / time_scale});
  }
  for (std::size_t k = 0; k < nu; ++k) {
    const std::size_t i = dev_index[k];
    const DeviceState& s = states[i];
    const WorkerCost& w = costs.workers[i];
    const double coeff = head_coefficient(s, w, r);
    double base = eval_f(s, w, r, 0, 0);
    if (!s.is_primary && s.h == 0) base += w.xfer.beta;
    lp::Row time_row;
    lp::Row budget_row;
    for (std::size_t j = 0; j < nj; ++j) {
      const double unit = 2.0 * static_cast<double>(lens[j]);
      time_row.terms.emplace_back(var(k, j), (coeff * r + w.attn.b * unit) / time_scale);
      budget_row.terms.emplace_back(var(k, j), unit);
    }
    time_row.terms.emplace_back(z, -1.0);
    time_row.sense = lp::Sense::kLessEqual;
    time_row.rhs = -base / time_scale;
    program.add_row(std::move(time_row));
    budget_row.sense = lp::Sense::kLessEqual;
    budget_row.rhs = static_cast<double>(s.free());
    program.add_row(std::move(budget_row));
  }
  for (std::size_t j = 0; j < nj; ++j) {
    lp::Row row;
    for (std::size_t k = 0; k < nu; ++k) row.terms.emplace_back(var(k, j), 1.0);
    row.sense = lp::Sense::kEqual;
    row.rhs = groups;
    program.add_row(std::move(row));
  }

  const lp::Solution sol = lp::solve(program);
  if (sol.status != lp::Status::kOptimal) return out;
  out.feasible = true;
  out.objective = sol.x[z] * time_scale;
  out.y.assign(nj, std::vector<double>(n, 0.0));
  for (std::size_t k = 0; k < nu; ++k) {
    for (std::size_t j = 0; j < nj; ++j) out.y[j][dev_index[k]] = sol.x[var(k, j)];
  }
  return out;
}

LpOutcome best_relaxation(const std::vector<DeviceState>& states, const StageCosts& costs,
                          const std::vector<std::int64_t>& lens, double time_scale) {
  const std::size_t n = states.size();
  std::vector<bool> usable(n, true);
  std::vector<std::size_t> optional;  // idle attention workers with a fixed charge
  for (std::size_t i = 0; i < n; ++i) {
    if (!states[i].is_primary && states[i].h == 0 && costs.workers[i].xfer.beta > 0.0) {
      optional.push_back(i);
    }
  }
  auto better = [](const LpOutcome& a, const LpOutcome& b) {
    if (!a.feasible) return false;
    if (!b.feasible) return true;
    return a.objective < b.objective * (1.0 - kRelTol);
  };

  LpOutcome best;
  constexpr std::size_t kExhaustiveLimit = 6;
  if (optional.size() <= kExhaustiveLimit) {
    const std::size_t combos = std::size_t{1} << optional.size();
    for (std::size_t mask = 0; mask < combos; ++mask) {
      for (std::size_t k = 0; k < optional.size(); ++k) usable[optional[k]] = (mask >> k) & 1U;
      LpOutcome cand = solve_relaxation(states, costs, lens, usable, time_scale);
      if (better(cand, best)) best = std::move(cand);
    }
    return best;
  }
  // Greedy opening: start closed, open the worker that helps most, repeat.
  for (std::size_t i : optional) usable[i] = false;
  best = solve_relaxation(states, costs, lens, usable, time_scale);
  for (;;) {
    LpOutcome round_best;
    std::size_t pick = n;
    for (std::size_t i : optional) {
      if (usable[i]) continue;
      usable[i] = true;
      LpOutcome cand = solve_relaxation(states, costs, lens, usable, time_scale);
      usable[i] = false;
      if (better(cand, round_best)) {
        round_best = std::move(cand);
        pick = i;
      }
    }
    if (pick == n || !better(round_best, best)) break;
    usable[pick] = true;
    best = std::move(round_best);
  }
  return best;
}

// Largest-remainder apportionment of each request's groups.
void round_relaxation(const LpOutcome& relaxed, int groups, GroupPlacement& placement) {
  const std::size_t n = placement.n_dev();
  for (std::size_t j = 0; j < placement.n_req(); ++j) {
    std::vector<double> frac(n, 0.0);
    int assigned = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double v = std::max(0.0, relaxed.y[j][i]);
      auto whole = static_cast<int>(std::floor(v + 1e-9));
      whole = std::min(whole, groups - assigned);
      frac[i] = v - whole;
      if (whole > 0) placement.add(j, i, whole);
      assigned += whole;
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return frac[a] > frac[b] + 1e-12; });
    for (std::size_t k = 0; assigned < groups; k = (k + 1) % n) {
      placement.add(j, order[k], 1);
      ++assigned;
    }
  }
}

// Longest request first; every group goes to the worker with the smallest
// resulting f that still has budget.
bool greedy_place(int groups, int r, GroupPlacement& placement) {
  std::vector<std::size_t> order(placement.n_req());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return placement.group_units(a) > placement.group_units(b);
  });
  for (std::size_t j : order) {
    const std::int64_t du = placement.group_units(j);
    for (int k = 0; k < groups; ++k) {
      std::size_t pick = placement.n_dev();
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < placement.n_dev(); ++i) {
        if (!placement.fits(i, du)) continue;
        const double after = placement.f_with(i, r, du);
        if (after < best) {
          best = after;
          pick = i;
        }
      }
      if (pick == placement.n_dev()) return false;
      placement.add(j, pick, 1);
    }
  }
  return true;
}

double max_after(const std::vector<double>& f) { return *std::max_element(f.begin(), f.end()); }

std::int64_t total_overflow(const GroupPlacement& p) {
  std::int64_t sum = 0;
  for (std::size_t i = 0; i < p.n_dev(); ++i) sum += std::max<std::int64_t>(0, p.over_budget(i));
  return sum;
}

// Drives total budget overflow to zero with single-group moves and pairwise
// swaps, preferring the move that removes the most overflow and then the one
// with the smallest resulting max f.
bool repair_budgets(int r, GroupPlacement& p) {
  const std::size_t n = p.n_dev();
  const std::size_t nj = p.n_req();
  auto excess_after = [&](std::size_t i, std::int64_t du) {
    return std::max<std::int64_t>(0, p.over_budget(i) + du);
  };
  for (std::size_t guard = 0; guard < 100000; ++guard) {
    if (total_overflow(p) == 0) return true;
    const std::vector<double> base = p.all_f();
    std::int64_t best_gain = 0;
    double best_max = std::numeric_limits<double>::infinity();
    int kind = 0;  // 1 move, 2 swap
    std::size_t bj = 0, bj2 = 0, bi = 0, bk = 0;
    auto consider = [&](std::int64_t gain, double m, int k, std::size_t j, std::size_t j2,
                        std::size_t i, std::size_t dst) {
      if (gain > best_gain || (gain == best_gain && gain > 0 && m < best_max)) {
        best_gain = gain;
        best_max = m;
        kind = k;
        bj = j;
        bj2 = j2;
        bi = i;
        bk = dst;
      }
    };
    for (std::size_t i = 0; i < n; ++i) {
      if (p.over_budget(i) <= 0) continue;
      for (std::size_t j = 0; j < nj; ++j) {
        if (p.groups(j, i) == 0) continue;
        const std::int64_t du = p.group_units(j);
        for (std::size_t k = 0; k < n; ++k) {
          if (k == i) continue;
          const std::int64_t before = excess_after(i, 0) + excess_after(k, 0);
          const std::int64_t after = excess_after(i, -du) + excess_after(k, du);
          std::vector<double> f = base;
          f[i] = p.f_with(i, -r, -du);
          f[k] = p.f_with(k, r, du);
          consider(before - after, max_after(f), 1, j, 0, i, k);
        }
        for (std::size_t j2 = 0; j2 < nj; ++j2) {
          const std::int64_t delta = du - p.group_units(j2);
          if (delta <= 0) continue;
          for (std::size_t k = 0; k < n; ++k) {
            if (k == i || p.groups(j2, k) == 0) continue;
            const std::int64_t before = excess_after(i, 0) + excess_after(k, 0);
            const std::int64_t after = excess_after(i, -delta) + excess_after(k, delta);
            std::vector<double> f = base;
            f[i] = p.f_with(i, 0, -delta);
            f[k] = p.f_with(k, 0, delta);
            consider(before - after, max_after(f), 2, j, j2, i, k);
          }
        }
      }
    }
    if (kind == 0) return false;
    p.add(bj, bi, -1);
    p.add(bj, bk, 1);
    if (kind == 2) {
      p.add(bj2, bk, -1);
      p.add(bj2, bi, 1);
    }
  }
  return false;
}

// Best-fit decreasing packing of every group, ignoring f: a feasibility-first
// start for tight budgets.
bool pack_place(int groups, GroupPlacement& p) {
  std::vector<std::size_t> order(p.n_req());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return p.group_units(a) > p.group_units(b);
  });
  for (std::size_t j : order) {
    const std::int64_t du = p.group_units(j);
    for (int k = 0; k < groups; ++k) {
      std::size_t pick = p.n_dev();
      std::int64_t tightest = std::numeric_limits<std::int64_t>::max();
      for (std::size_t i = 0; i < p.n_dev(); ++i) {
        if (!p.fits(i, du)) continue;
        const std::int64_t left = -p.over_budget(i) - du;
        if (left < tightest) {
          tightest = left;
          pick = i;
        }
      }
      if (pick == p.n_dev()) return false;
      p.add(j, pick, 1);
    }
  }
  return true;
}

// Depth-first packing of every group, largest first, trying workers in order
// of resulting f. Prunes on aggregate free space and on workers with equal
// remaining space. Gives up after `node_limit` nodes.
bool search_pack(int groups, int r, GroupPlacement& p, std::size_t node_limit) {
  std::vector<std::size_t> items;
  for (std::size_t j = 0; j < p.n_req(); ++j) {
    for (int k = 0; k < groups; ++k) items.push_back(j);
  }
  std::stable_sort(items.begin(), items.end(), [&](std::size_t a, std::size_t b) {
    return p.group_units(a) > p.group_units(b);
  });
  std::vector<std::int64_t> suffix(items.size() + 1, 0);
  for (std::size_t q = items.size(); q-- > 0;) suffix[q] = suffix[q + 1] + p.group_units(items[q]);
  std::size_t nodes = 0;
  std::function<bool(std::size_t)> rec = [&](std::size_t q) {
    if (q == items.size()) return true;
    if (++nodes > node_limit) return false;
    std::int64_t room = 0;
    for (std::size_t i = 0; i < p.n_dev(); ++i) room += std::max<std::int64_t>(0, -p.over_budget(i));
    if (room < suffix[q]) return false;
    const std::size_t j = items[q];
    const std::int64_t du = p.group_units(j);
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < p.n_dev(); ++i) {
      if (p.fits(i, du)) order.push_back(i);
    }
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return p.f_with(a, r, du) < p.f_with(b, r, du);
    });
    std::vector<std::int64_t> tried;
    for (std::size_t i : order) {
      const std::int64_t left = -p.over_budget(i);
      if (std::find(tried.begin(), tried.end(), left) != tried.end()) continue;
      tried.push_back(left);
      p.add(j, i, 1);
      if (rec(q + 1)) return true;
      p.add(j, i, -1);
    }
    return false;
  };
  return rec(0);
}

// Removes every group of the given requests and re-places them one group at
// a time, longest request first, on the worker with the smallest resulting
// f. Restores the old placement and returns false unless the result is
// feasible and lexicographically better.
bool reinsert(int r, GroupPlacement& p, std::span<const std::size_t> reqs) {
  const std::size_t n = p.n_dev();
  const std::vector<double> before = p.all_f();
  std::vector<std::vector<int>> saved;
  for (std::size_t j : reqs) {
    std::vector<int> row(n);
    for (std::size_t i = 0; i < n; ++i) {
      row[i] = p.groups(j, i);
      if (row[i] > 0) p.add(j, i, -row[i]);
    }
    saved.push_back(std::move(row));
  }
  std::vector<std::size_t> order(reqs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return p.group_units(reqs[a]) > p.group_units(reqs[b]);
  });
  bool ok = true;
  for (std::size_t q : order) {
    const std::size_t j = reqs[q];
    const std::int64_t du = p.group_units(j);
    int total = 0;
    for (int v : saved[q]) total += v;
    for (int k = 0; k < total && ok; ++k) {
      std::size_t pick = n;
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < n; ++i) {
        if (!p.fits(i, du)) continue;
        const double after = p.f_with(i, r, du);
        if (after < best) {
          best = after;
          pick = i;
        }
      }
      if (pick == n) {
        ok = false;
      } else {
        p.add(j, pick, 1);
      }
    }
  }
  if (ok && lex_better(p.all_f(), before)) return true;
  for (std::size_t q = 0; q < reqs.size(); ++q) {
    const std::size_t j = reqs[q];
    for (std::size_t i = 0; i < n; ++i) {
      const int cur = p.groups(j, i);
      if (cur != saved[q][i]) p.add(j, i, saved[q][i] - cur);
    }
  }
  return false;
}

// Best-improvement local search over single-group moves and pairwise swaps
// on the descending-sorted vector of f values, with one- and two-request
// reinsertion to escape local minima.
void improve(int r, GroupPlacement& p) {
  const std::size_t n = p.n_dev();
  const std::size_t nj = p.n_req();
  const bool try_swaps = nj * nj * n * n <= 200000;
  const bool try_pairs = nj * nj <= 400;
  for (std::size_t iter = 0; iter < 100000; ++iter) {
    const std::vector<double> cur = p.all_f();
    std::vector<double> best_vec = cur;
    bool found = false;
    std::size_t mj = 0, mi = 0, mk = 0;
    for (std::size_t j = 0; j < nj; ++j) {
      const std::int64_t du = p.group_units(j);
      for (std::size_t i = 0; i < n; ++i) {
        if (p.groups(j, i) == 0) continue;
        for (std::size_t k = 0; k < n; ++k) {
          if (k == i || !p.fits(k, du)) continue;
          std::vector<double> v = cur;
          v[i] = p.f_with(i, -r, -du);
          v[k] = p.f_with(k, r, du);
          if (lex_better(v, best_vec)) {
            best_vec = std::move(v);
            found = true;
            mj = j;
            mi = i;
            mk = k;
          }
        }
      }
    }
    if (found) {
      p.add(mj, mi, -1);
      p.add(mj, mk, 1);
      continue;
    }
    if (try_swaps) {
      std::size_t sj2 = 0;
      for (std::size_t j = 0; j < nj; ++j) {
        for (std::size_t j2 = 0; j2 < nj; ++j2) {
          if (j2 == j || p.group_units(j) == p.group_units(j2)) continue;
          const std::int64_t delta = p.group_units(j) - p.group_units(j2);
          for (std::size_t i = 0; i < n; ++i) {
            if (p.groups(j, i) == 0) continue;
            for (std::size_t k = 0; k < n; ++k) {
              if (k == i || p.groups(j2, k) == 0) continue;
              // j: i -> k, j2: k -> i. Heads unchanged on both workers.
              if (!p.fits(k, delta) || !p.fits(i, -delta)) continue;
              std::vector<double> v = cur;
              v[i] = p.f_with(i, 0, -delta);
              v[k] = p.f_with(k, 0, delta);
              if (lex_better(v, best_vec)) {
                best_vec = std::move(v);
                found = true;
                mj = j;
                sj2 = j2;
                mi = i;
                mk = k;
              }
            }
          }
        }
      }
      if (found) {
        p.add(mj, mi, -1);
        p.add(mj, mk, 1);
        p.add(sj2, mk, -1);
        p.add(sj2, mi, 1);
        continue;
      }
    }
    bool moved = false;
    for (std::size_t j = 0; j < nj && !moved; ++j) {
      const std::size_t one[] = {j};
      moved = reinsert(r, p, one);
    }
    for (std::size_t j = 0; j < nj && try_pairs && !moved; ++j) {
      for (std::size_t j2 = j + 1; j2 < nj && !moved; ++j2) {
        const std::size_t two[] = {j, j2};
        moved = reinsert(r, p, two);
      }
    }
    if (!moved) return;
  }
}

void check_round(const DispatchRound& round, const StageCosts& costs) {
  if (costs.workers.size() != round.states.size()) {
    throw InvalidArgument("dispatch: cost and state vectors differ in size");
  }
  if (costs.gqa_ratio < 1 || costs.n_heads < 1 || costs.n_heads % costs.gqa_ratio != 0) {
    throw InvalidArgument("dispatch: H must be a positive multiple of r");
  }
  for (const auto& req : round.new_requests) {
    if (req.context_len < 0) throw InvalidArgument("dispatch: negative context length");
    for (const auto& other : round.in_flight) {
      if (other.id == req.id) {
        throw InvalidArgument("dispatch: request " + std::to_string(req.id) +
                              " is both new and in flight");
      }
    }
  }
}

}  // namespace

double head_only_slack(const DispatchRound& round, const StageCosts& costs) {
  double worst = 0.0;
  for (std::size_t i = 0; i < round.states.size(); ++i) {
    worst = std::max(worst, head_coefficient(round.states[i], costs.workers[i], costs.gqa_ratio));
  }
  return worst * costs.gqa_ratio * static_cast<double>(round.new_requests.size());
}

DispatchResult dispatch(const DispatchRound& round, const StageCosts& costs) {
  check_round(round, costs);
  const std::vector<DeviceState>& states = round.states;
  const std::size_t n = states.size();
  const int r = costs.gqa_ratio;
  const int groups = costs.n_heads / r;

  DispatchResult result;
  if (round.new_requests.empty()) {
    result.objective = current_objective(states, costs);
    result.lp_objective = result.objective.objective;
    return result;
  }
  if (n == 0) throw Infeasible("dispatch: stage has no workers");

  std::vector<std::int64_t> lens;
  lens.reserve(round.new_requests.size());
  for (const auto& req : round.new_requests) lens.push_back(req.context_len);

  std::int64_t total_budget = 0;
  std::int64_t total_free = 0;
  for (const auto& s : states) {
    total_budget += s.budget;
    total_free += std::max<std::int64_t>(0, s.free());
  }
  std::int64_t need = 0;
  for (std::size_t j = 0; j < lens.size(); ++j) {
    const std::int64_t units = 2 * lens[j] * groups;
    if (units > total_budget) {
      throw Infeasible("request " + std::to_string(round.new_requests[j].id) + " needs " +
                           std::to_string(units) + " cache units but the stage holds " +
                           std::to_string(total_budget),
                       static_cast<double>(units - total_budget));
    }
    need += units;
  }
  if (need > total_free) {
    throw Infeasible("new requests need " + std::to_string(need) + " cache units, " +
                         std::to_string(total_free) + " free (shortfall " +
                         std::to_string(need - total_free) + ")",
                     static_cast<double>(need - total_free));
  }

  double time_scale = 0.0;
  double worst_beta = 0.0;
  double slack = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double coeff = head_coefficient(states[i], costs.workers[i], r);
    double per_device = 0.0;
    for (std::int64_t l : lens) {
      const double w = coeff * r + costs.workers[i].attn.b * 2.0 * static_cast<double>(l);
      per_device += w;
      time_scale = std::max(time_scale, w * groups);
    }
    slack = std::max(slack, per_device);
    time_scale = std::max(time_scale, eval_f(states[i], costs.workers[i], r, 0, 0));
    if (!states[i].is_primary && states[i].h == 0) {
      worst_beta = std::max(worst_beta, costs.workers[i].xfer.beta);
    }
  }
  if (!(time_scale > 0.0)) time_scale = 1.0;

  const LpOutcome relaxed = best_relaxation(states, costs, lens, time_scale);
  if (!relaxed.feasible) {
    throw Infeasible("dispatch: per-worker budgets cannot host the new requests");
  }

  GroupPlacement from_lp(states, costs, lens);
  round_relaxation(relaxed, groups, from_lp);
  const bool lp_ok = repair_budgets(r, from_lp);
  if (lp_ok) improve(r, from_lp);

  GroupPlacement from_greedy(states, costs, lens);
  bool greedy_ok = greedy_place(groups, r, from_greedy);
  if (!greedy_ok) {
    from_greedy = GroupPlacement(states, costs, lens);
    greedy_ok = pack_place(groups, from_greedy);
  }
  if (!greedy_ok && !lp_ok) {
    from_greedy = GroupPlacement(states, costs, lens);
    greedy_ok = search_pack(groups, r, from_greedy, 200000);
  }
  if (greedy_ok) improve(r, from_greedy);

  const GroupPlacement* chosen = nullptr;
  if (lp_ok && greedy_ok) {
    chosen = lex_better(from_greedy.all_f(), from_lp.all_f()) ? &from_greedy : &from_lp;
  } else if (lp_ok) {
    chosen = &from_lp;
  } else if (greedy_ok) {
    chosen = &from_greedy;
  } else {
    throw Infeasible("dispatch: no integral head placement fits the per-worker budgets");
  }

  result.x = chosen->heads_matrix();
  result.objective.per_device_f = chosen->all_f();
  result.objective.objective = chosen->objective();
  result.lp_objective = relaxed.objective;
  result.rounding_slack = slack + worst_beta;
  return result;
}

void apply_allocation(std::span<DeviceState> states, const RequestState& request, int gqa_ratio,
                      int sign) {
  if (request.allocation.empty()) return;
  if (request.allocation.size() != states.size()) {
    throw InternalError("allocation size does not match the worker count");
  }
  for (std::size_t i = 0; i < states.size(); ++i) {
    const int x = request.allocation[i];
    states[i].h += sign * x;
    states[i].g += sign * cache_units(x, request.context_len, gqa_ratio);
    if (states[i].h < 0 || states[i].g < 0) {
      throw InternalError("release of request " + std::to_string(request.id) +
                          " drove worker state negative");
    }
  }
}

void commit(DispatchRound& round, const HeadAllocation& x, int gqa_ratio) {
  if (x.size() != round.new_requests.size()) {
    throw InternalError("commit: allocation rows do not match new requests");
  }
  for (std::size_t j = 0; j < x.size(); ++j) {
    if (x[j].size() != round.states.size()) {
      throw InternalError("commit: allocation width does not match worker count");
    }
    for (int heads : x[j]) {
      if (heads < 0 || heads % gqa_ratio != 0) {
        throw InternalError("commit: head counts must be non-negative multiples of r");
      }
    }
    RequestState& req = round.new_requests[j];
    req.allocation = x[j];
    apply_allocation(round.states, req, gqa_ratio, +1);
  }
  for (const auto& s : round.states) {
    if (s.g > s.budget) {
      throw InternalError("commit: worker " + std::to_string(s.device) + " exceeds its budget");
    }
  }
}

TokenOutcome on_token(std::span<DeviceState> states, std::span<RequestState> requests,
                      int gqa_ratio) {
  TokenOutcome out;
  for (auto& req : requests) {
    if (req.phase != Phase::kDecode || !req.placed()) continue;
    if (req.allocation.size() != states.size()) {
      throw InternalError("on_token: allocation width does not match worker count");
    }
    std::size_t short_worker = states.size();
    for (std::size_t i = 0; i < states.size(); ++i) {
      const std::int64_t growth = cache_units(req.allocation[i], 1, gqa_ratio);
      if (growth > 0 && states[i].g + growth > states[i].budget) {
        short_worker = i;
        break;
      }
    }
    if (short_worker != states.size()) {
      out.flagged.push_back({req.id, short_worker});
      continue;
    }
    for (std::size_t i = 0; i < states.size(); ++i) {
      states[i].g += cache_units(req.allocation[i], 1, gqa_ratio);
    }
    ++req.context_len;
    out.grown.push_back(req.id);
  }
  return out;
}

}  // namespace hetis
