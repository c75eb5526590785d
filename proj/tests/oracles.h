#pragma once

// Independent reference computations used only by tests. Nothing here calls
// into the code paths it checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <vector>

namespace oracle {

struct Worker {
  bool primary = true;
  double a = 0, b = 0, c = 0, gamma = 0, beta = 0;
  std::int64_t h = 0, g = 0, budget = 0;
};

struct Instance {
  std::vector<Worker> workers;
  std::vector<std::int64_t> lens;
  int n_heads = 1;
  int r = 1;
};

inline double worker_time(const Worker& w, int r, double heads, double units) {
  const double per_head = w.primary ? w.a : w.a + (2.0 + 2.0 / r) * w.gamma;
  double t = per_head * heads + w.b * units + w.c;
  if (!w.primary && heads > 0) t += w.beta;
  return t;
}

// Calls fn(parts) for every composition of `total` into `n` non-negative parts.
inline void for_each_composition(int total, std::size_t n,
                                 const std::function<void(const std::vector<int>&)>& fn) {
  std::vector<int> parts(n, 0);
  std::function<void(std::size_t, int)> rec = [&](std::size_t k, int left) {
    if (k + 1 == n) {
      parts[k] = left;
      fn(parts);
      return;
    }
    for (int v = 0; v <= left; ++v) {
      parts[k] = v;
      rec(k + 1, left - v);
    }
  };
  if (n > 0) rec(0, total);
}

// Best integral min-max objective over every allocation of each request's
// H/r head groups, with per-worker budgets. nullopt when nothing fits.
inline std::optional<double> exhaustive_dispatch(const Instance& inst) {
  const std::size_t n = inst.workers.size();
  const int groups = inst.n_heads / inst.r;
  std::vector<std::vector<int>> comps;
  for_each_composition(groups, n, [&](const std::vector<int>& p) { comps.push_back(p); });

  std::optional<double> best;
  std::vector<std::size_t> choice(inst.lens.size(), 0);
  std::function<void(std::size_t)> rec = [&](std::size_t j) {
    if (j == inst.lens.size()) {
      double worst = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        double heads = 0, units = 0;
        for (std::size_t q = 0; q < inst.lens.size(); ++q) {
          const int gcount = comps[choice[q]][i];
          heads += gcount * inst.r;
          units += 2.0 * gcount * static_cast<double>(inst.lens[q]);
        }
        const Worker& w = inst.workers[i];
        if (static_cast<double>(w.g) + units > static_cast<double>(w.budget)) return;
        worst = std::max(worst, worker_time(w, inst.r, static_cast<double>(w.h) + heads,
                                            static_cast<double>(w.g) + units));
      }
      if (!best || worst < *best) best = worst;
      return;
    }
    for (std::size_t k = 0; k < comps.size(); ++k) {
      choice[j] = k;
      rec(j + 1);
    }
  };
  rec(0);
  return best;
}

// Relaxed ideal time by grid search: every request's heads split
// continuously (step H/steps) across workers starting from empty workers,
// only the aggregate budget enforced. Upper-bounds the true relaxed optimum
// by at most the grid resolution.
inline double grid_ideal_time(const Instance& inst, int steps) {
  const std::size_t n = inst.workers.size();
  std::vector<std::vector<int>> comps;
  for_each_composition(steps, n, [&](const std::vector<int>& p) { comps.push_back(p); });
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> choice(inst.lens.size(), 0);
  std::function<void(std::size_t)> rec = [&](std::size_t j) {
    if (j == inst.lens.size()) {
      double worst = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        double heads = 0, units = 0;
        for (std::size_t q = 0; q < inst.lens.size(); ++q) {
          const double share = inst.n_heads * static_cast<double>(comps[choice[q]][i]) / steps;
          heads += share;
          units += 2.0 / inst.r * share * static_cast<double>(inst.lens[q]);
        }
        Worker w = inst.workers[i];
        worst = std::max(worst, worker_time(w, inst.r, heads, units));
      }
      best = std::min(best, worst);
      return;
    }
    for (std::size_t k = 0; k < comps.size(); ++k) {
      choice[j] = k;
      rec(j + 1);
    }
  };
  rec(0);
  return best;
}

// Minimum achievable max stage time over all contiguous splits of `layers`
// into stages with at least one layer each and an optional cap per stage.
inline double exhaustive_stage_max(const std::vector<double>& per_layer, int layers,
                                   const std::vector<int>& caps = {}) {
  const std::size_t s = per_layer.size();
  double best = std::numeric_limits<double>::infinity();
  std::vector<int> split(s, 0);
  std::function<void(std::size_t, int)> rec = [&](std::size_t k, int left) {
    if (k + 1 == s) {
      if (left < 1) return;
      if (!caps.empty() && left > caps[k]) return;
      split[k] = left;
      double worst = 0.0;
      for (std::size_t q = 0; q < s; ++q) worst = std::max(worst, split[q] * per_layer[q]);
      best = std::min(best, worst);
      return;
    }
    for (int v = 1; v <= left - static_cast<int>(s - k - 1); ++v) {
      if (!caps.empty() && v > caps[k]) break;
      split[k] = v;
      rec(k + 1, left - v);
    }
  };
  if (s > 0 && static_cast<int>(s) <= layers) rec(0, layers);
  return best;
}

// Head groups that must move between two allocations of one request: the
// size of the set difference between old and new group-to-device maps when
// each device keeps as many of its groups as it can.
inline int moved_groups_set_difference(const std::vector<int>& old_heads,
                                       const std::vector<int>& new_heads, int r) {
  std::multiset<std::size_t> old_slots, new_slots;
  for (std::size_t i = 0; i < old_heads.size(); ++i) {
    for (int k = 0; k < old_heads[i] / r; ++k) old_slots.insert(i);
    for (int k = 0; k < new_heads[i] / r; ++k) new_slots.insert(i);
  }
  // Multiset intersection counts groups that can stay put.
  int kept = 0;
  auto it_new = new_slots;
  for (std::size_t dev : old_slots) {
    auto found = it_new.find(dev);
    if (found != it_new.end()) {
      ++kept;
      it_new.erase(found);
    }
  }
  return static_cast<int>(old_slots.size()) - kept;
}

}  // namespace oracle
