#pragma once

// Simulation setups shared by the unit suites and the acceptance binary.

#include <algorithm>
#include <string>
#include <vector>

#include "hetis/profiles.h"
#include "hetis/simulator.h"
#include "hetis/workload.h"

namespace testing_support {

// One A100 primary holding every layer, the two 3090s as attention workers.
inline hetis::ParallelPlan a100_with_attention_workers(const hetis::ClusterSpec& c,
                                                       const hetis::ModelSpec& m) {
  hetis::InstancePlan ip;
  hetis::StageGroup st;
  st.devices = {c.devices()[0].id};
  st.layer_begin = 0;
  st.layer_end = m.n_layers;
  for (const auto& d : c.devices()) {
    if (d.id != st.devices[0]) ip.attention_workers.push_back(d.id);
  }
  st.worker_count = 1 + static_cast<int>(ip.attention_workers.size());
  ip.stages = {st};
  hetis::ParallelPlan p;
  p.instances = {ip};
  return p;
}

// Rate climbing 0 -> peak -> 0 on the A100 + 2x3090 cluster.
struct RampRun {
  hetis::ModelSpec model = hetis::profiles::llama_13b();
  hetis::ClusterSpec cluster = hetis::profiles::a100_two_3090(model);
  double peak = 2.5;
  double ramp = 60.0;
  double hold = 30.0;

  hetis::SimResult run(std::uint64_t seed = 3) const {
    const auto trace = hetis::piecewise_trace(hetis::ramp_profile(peak, ramp, hold, 10),
                                              hetis::LengthDist::parse("lognormal:6.5,0.5"),
                                              hetis::LengthDist::parse("lognormal:5.5,0.5"), seed);
    hetis::SimConfig cfg;
    return hetis::simulate(cluster, model, trace, cfg, a100_with_attention_workers(cluster, model));
  }
};

// Decode-heavy load on the default 12-device cluster with the 70B preset.
struct CapacityRun {
  double rate = 0.5;
  double duration = 1200.0;
  std::string prompt = "lognormal:7.5,0.4";
  std::string output = "lognormal:7.2,0.3";
  std::uint64_t seed = 1;

  hetis::SimResult run(hetis::Policy policy) const {
    const hetis::ModelSpec m = hetis::profiles::llama_70b();
    const hetis::ClusterSpec c = hetis::profiles::default_cluster(m);
    const auto trace = hetis::poisson_trace(rate, duration, hetis::LengthDist::parse(prompt),
                                            hetis::LengthDist::parse(output), seed);
    hetis::SimConfig cfg;
    cfg.policy = policy;
    return hetis::simulate(c, m, trace, cfg);
  }
};

struct RebalanceAudit {
  int records = 0;
  int applied = 0;
  int satisfied = 0;       // after <= (1 + theta) * ideal
  int stopped = 0;         // a stop condition was logged instead
  int unexplained = 0;     // neither
  int thrash = 0;          // fired again on the same stage with nothing changed
};

// Every trigger either meets the target or names why it stopped, and no
// stage fires twice in a row at the same ratio without a state change.
inline RebalanceAudit audit_rebalances(const hetis::SimResult& r, double theta) {
  RebalanceAudit a;
  for (std::size_t k = 0; k < r.rebalances.size(); ++k) {
    const auto& rec = r.rebalances[k];
    ++a.records;
    if (rec.applied) ++a.applied;
    const double result = rec.applied ? rec.after : rec.before;
    if (result <= (1.0 + theta) * rec.ideal * (1.0 + 1e-9)) {
      ++a.satisfied;
    } else if (rec.stop == "memory" || rec.stop == "threshold_gap" ||
               rec.stop == "no_improvement") {
      ++a.stopped;
    } else {
      ++a.unexplained;
    }
    // Thrash: fired on the very next decode iteration of the same stage
    // without the ratio rising above where the previous firing left it.
    for (std::size_t q = k; q-- > 0;) {
      const auto& prev = r.rebalances[q];
      if (prev.instance != rec.instance || prev.stage != rec.stage) continue;
      // Samples are in start order.
      const auto lo = std::lower_bound(r.iterations.begin(), r.iterations.end(), prev.time,
                                       [](const hetis::IterationSample& s, double t) { return s.start < t; });
      int between = 0;
      for (auto it = lo; it != r.iterations.end() && it->start < rec.time; ++it) {
        if (it->instance == rec.instance && !it->prefill) ++between;
      }
      const double left = (prev.applied ? prev.after : prev.before) / prev.ideal;
      if (between == 1 && left > 1.0 + theta && rec.before / rec.ideal <= left * (1.0 + 1e-9)) ++a.thrash;
      break;
    }
  }
  return a;
}

// Metrics files as text, in the order write_metrics writes them.
inline std::string metrics_text(const hetis::SimResult& r) {
  return hetis::requests_csv(r) + "\n--\n" + hetis::summary_json(r) + "\n--\n" + hetis::events_jsonl(r);
}

}  // namespace testing_support
