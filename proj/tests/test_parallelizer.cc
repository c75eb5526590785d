#include <gtest/gtest.h>

#include <limits>
#include <random>

#include "hetis/errors.h"
#include "hetis/parallelizer.h"
#include "hetis/profiles.h"
#include "oracles.h"

namespace hetis {
namespace {

const NetworkLink kIdealLink{std::numeric_limits<double>::infinity(), 0.0};

ClusterSpec cluster_of(const std::vector<std::string>& kinds, const ModelSpec& m,
                       NetworkLink link = profiles::intra_host_link()) {
  std::vector<DeviceSpec> d;
  for (std::size_t i = 0; i < kinds.size(); ++i) d.push_back(profiles::device(kinds[i], static_cast<int>(i), 0, m));
  return ClusterSpec::from_hosts(d, link, link);
}

StageGroup stage(std::vector<DeviceId> devs, int b, int e) {
  StageGroup s;
  s.devices = std::move(devs);
  s.layer_begin = b;
  s.layer_end = e;
  return s;
}

const WorkloadProfile kLoad{512, 128, 8};

TEST(DenseCost, SingleDeviceHasNoCommunication) {
  const ModelSpec m = profiles::llama_13b();
  const ClusterSpec c = cluster_of({"A100"}, m);
  ParallelPlan p;
  p.instances.push_back({{stage({0}, 0, m.n_layers)}, {}});
  const PlanCost cost = dense_cost(p, c, m, kLoad);
  EXPECT_EQ(cost.comm, 0.0);
  EXPECT_DOUBLE_EQ(cost.total, cost.comp);
}

TEST(DenseCost, PerfectTensorParallelScaling) {
  const ModelSpec m = profiles::llama_13b();
  const ClusterSpec c = cluster_of({"A100", "A100"}, m, kIdealLink);
  ParallelPlan one, two;
  one.instances.push_back({{stage({0}, 0, m.n_layers)}, {}});
  two.instances.push_back({{stage({0, 1}, 0, m.n_layers)}, {}});
  const PlanCost a = dense_cost(one, c, m, kLoad);
  const PlanCost b = dense_cost(two, c, m, kLoad);
  EXPECT_NEAR(b.comp, a.comp / 2, 1e-12 * a.comp);
  EXPECT_EQ(b.comm, 0.0);
}

TEST(DenseCost, SlowStageDominatesPrefill) {
  const ModelSpec m = profiles::llama_70b();
  const ClusterSpec c = cluster_of({"A100", "P100"}, m);
  ParallelPlan p;
  p.instances.push_back({{stage({0}, 0, 40), stage({1}, 40, 80)}, {}});
  const PlanCost cost = dense_cost(p, c, m, kLoad, CostPhase::kPrefill);
  const double a100 = 40 * stage_layer_seconds({0}, c, m, kLoad, CostPhase::kPrefill);
  const double p100 = 40 * stage_layer_seconds({1}, c, m, kLoad, CostPhase::kPrefill);
  EXPECT_DOUBLE_EQ(cost.stage_max, p100);
  EXPECT_NEAR(p100 / a100, 24.5, 1e-9);
}

TEST(SplitLayers, EqualRatesSplitEvenly) {
  EXPECT_EQ(split_layers({1.0, 1.0}, 80), (std::vector<int>{40, 40}));
}

TEST(SplitLayers, ProportionalToRate) {
  // Rates 3:1 mean per-layer times 1:3.
  EXPECT_EQ(split_layers({1.0, 3.0}, 80), (std::vector<int>{60, 20}));
}

TEST(SplitLayers, CalibratedThreeKinds) {
  const std::vector<double> t{1.0, 1.0 / 0.68, 1.0 / 0.126};
  const auto split = split_layers(t, 80);
  double worst = 0.0;
  int sum = 0;
  for (std::size_t k = 0; k < 3; ++k) {
    worst = std::max(worst, split[k] * t[k]);
    sum += split[k];
  }
  EXPECT_EQ(sum, 80);
  EXPECT_DOUBLE_EQ(worst, oracle::exhaustive_stage_max(t, 80));
}

TEST(SplitLayers, MoreStagesThanLayersIsInfeasible) {
  EXPECT_THROW(split_layers({1, 1, 1}, 2), Infeasible);
}

TEST(SplitLayers, CapsBind) {
  const auto split = split_layers({1.0, 3.0}, 80, {30, 80});
  EXPECT_EQ(split, (std::vector<int>{30, 50}));
  EXPECT_THROW(split_layers({1.0, 3.0}, 80, {30, 30}), Infeasible);
}

TEST(SplitLayers, MatchesExhaustiveEnumeration) {
  std::mt19937_64 rng(13);
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  for (int k = 0; k < 60; ++k) {
    const int s = pick(1, 4);
    const int layers = pick(s, s == 4 ? 40 : 100);
    std::vector<double> t;
    std::vector<int> caps;
    for (int q = 0; q < s; ++q) {
      t.push_back(std::uniform_real_distribution<double>(0.1, 10.0)(rng));
      caps.push_back(pick(1, layers));
    }
    if (k % 2 == 0) caps.clear();
    const double want = oracle::exhaustive_stage_max(t, layers, caps);
    if (!std::isfinite(want)) {
      EXPECT_THROW(split_layers(t, layers, caps), Infeasible);
      continue;
    }
    const auto split = split_layers(t, layers, caps);
    double worst = 0.0;
    int sum = 0;
    for (int q = 0; q < s; ++q) {
      worst = std::max(worst, split[static_cast<std::size_t>(q)] * t[static_cast<std::size_t>(q)]);
      sum += split[static_cast<std::size_t>(q)];
    }
    EXPECT_EQ(sum, layers);
    EXPECT_DOUBLE_EQ(worst, want) << k;
  }
}

TEST(AssignLayers, ContiguousRangesCoverTheModel) {
  const ModelSpec m = profiles::llama_70b();
  const ClusterSpec c = profiles::default_cluster(m);
  std::vector<StageGroup> stages{stage({0, 1, 2, 3}, 0, 0), stage({4, 5, 6, 7}, 0, 0),
                                 stage({8, 9, 10, 11}, 0, 0)};
  const double worst = assign_layers(stages, c, m, kLoad);
  EXPECT_EQ(stages.front().layer_begin, 0);
  EXPECT_EQ(stages.back().layer_end, m.n_layers);
  for (std::size_t k = 1; k < stages.size(); ++k) EXPECT_EQ(stages[k].layer_begin, stages[k - 1].layer_end);
  EXPECT_GT(worst, 0.0);
}

ClusterSpec custom_rates(const std::vector<double>& rates, const ModelSpec& m) {
  std::vector<DeviceSpec> d;
  for (std::size_t i = 0; i < rates.size(); ++i) {
    DeviceSpec s = profiles::device("A100", static_cast<int>(i), 0, m);
    s.dense_rate = rates[i];
    s.decode_rate = rates[i];
    d.push_back(s);
  }
  return ClusterSpec::from_hosts(d, kIdealLink, kIdealLink);
}

TEST(Prune, NegligibleDeviceIsRemoved) {
  const ModelSpec m = profiles::llama_13b();
  const ClusterSpec c = custom_rates({1e14, 1e-3}, m);
  InstancePlan inst{{stage({0, 1}, 0, 0)}, {}};
  SearchOptions opts;
  const InstancePlan out = prune_attention_workers(inst, c, m, kLoad, opts);
  EXPECT_EQ(out.attention_workers, std::vector<DeviceId>{1});
  // C_p is unchanged up to rounding.
  std::vector<StageGroup> before = inst.stages, after = out.stages;
  const double a = assign_layers(before, c, m, kLoad);
  const double b = assign_layers(after, c, m, kLoad);
  EXPECT_NEAR(b / a, 1.0, 1e-12);
}

TEST(Prune, TenPercentRiseIsKept) {
  const ModelSpec m = profiles::llama_13b();
  const ClusterSpec c = custom_rates({10e12, 1e12}, m);
  InstancePlan inst{{stage({0, 1}, 0, 0)}, {}};
  const InstancePlan out = prune_attention_workers(inst, c, m, kLoad, {0.05, 0.9});
  EXPECT_TRUE(out.attention_workers.empty());
  // With a looser tolerance the same device goes.
  const InstancePlan loose = prune_attention_workers(inst, c, m, kLoad, {0.2, 0.9});
  EXPECT_EQ(loose.attention_workers, std::vector<DeviceId>{1});
}

TEST(Prune, CalibratedKindsDropP100KeepA100And3090) {
  const ModelSpec m = profiles::llama_13b();
  const ClusterSpec c = cluster_of({"A100", "3090", "P100"}, m);
  InstancePlan inst{{stage({0}, 0, 0), stage({1}, 0, 0), stage({2}, 0, 0)}, {}};
  const InstancePlan out = prune_attention_workers(inst, c, m, kLoad);
  EXPECT_EQ(out.attention_workers, std::vector<DeviceId>{2});
  const auto prim = out.primaries();
  EXPECT_NE(std::find(prim.begin(), prim.end(), 0), prim.end());
  EXPECT_NE(std::find(prim.begin(), prim.end(), 1), prim.end());
}

TEST(Prune, ZeroCapacityRemovalNeverMovesCp) {
  std::mt19937_64 rng(19);
  const ModelSpec m = profiles::llama_13b();
  for (int k = 0; k < 30; ++k) {
    std::vector<double> rates;
    const int n = std::uniform_int_distribution<int>(1, 4)(rng);
    for (int i = 0; i < n; ++i) rates.push_back(std::uniform_real_distribution<double>(1e12, 3e14)(rng));
    rates.push_back(1e-6);
    const ClusterSpec c = custom_rates(rates, m);
    std::vector<DeviceId> ids;
    for (int i = 0; i <= n; ++i) ids.push_back(i);
    std::vector<StageGroup> with{stage(ids, 0, 0)};
    ids.pop_back();
    std::vector<StageGroup> without{stage(ids, 0, 0)};
    const double a = assign_layers(with, c, m, kLoad);
    const double b = assign_layers(without, c, m, kLoad);
    EXPECT_NEAR(b, a, a * 1e-12);
  }
}

TEST(Search, SingleGpuIsTrivial) {
  const ModelSpec m = profiles::llama_13b();
  const ClusterSpec c = cluster_of({"A100"}, m);
  const SearchReport rep = search_plan(c, m, kLoad);
  ASSERT_EQ(rep.plan.instances.size(), 1u);
  ASSERT_EQ(rep.plan.instances[0].stages.size(), 1u);
  EXPECT_EQ(rep.plan.instances[0].stages[0].devices, std::vector<DeviceId>{0});
  EXPECT_TRUE(rep.plan.instances[0].attention_workers.empty());
  EXPECT_EQ(rep.cost.comm, 0.0);
}

TEST(Search, PicksTheCheaperOfDataAndTensorParallel) {
  const ModelSpec m = profiles::llama_13b();
  // A slow link makes the all-reduce cost more than TP saves; an ideal one
  // makes TP free.
  for (const NetworkLink link : {NetworkLink{1e8, 1e-4}, kIdealLink}) {
    const ClusterSpec c = cluster_of({"A100", "A100"}, m, link);
    const SearchReport rep = search_plan(c, m, kLoad);
    ParallelPlan dp, tp;
    dp.instances.push_back({{stage({0}, 0, m.n_layers)}, {}});
    dp.instances.push_back({{stage({1}, 0, m.n_layers)}, {}});
    tp.instances.push_back({{stage({0, 1}, 0, m.n_layers)}, {}});
    const double cdp = dense_cost(dp, c, m, kLoad).total;
    const double ctp = dense_cost(tp, c, m, kLoad).total;
    EXPECT_DOUBLE_EQ(rep.cost.total, std::min(cdp, ctp));
    EXPECT_EQ(rep.dp_degree, cdp < ctp ? 2 : 1);
    if (link.bandwidth < 1e9) {
      EXPECT_EQ(rep.dp_degree, 2);
    } else {
      EXPECT_EQ(rep.dp_degree, 1);
    }
  }
}

TEST(Search, DefaultClusterUsesP100sAsAttentionWorkers) {
  const ModelSpec m = profiles::llama_70b();
  const ClusterSpec c = profiles::default_cluster(m);
  const SearchReport rep = search_plan(c, m, kLoad);
  ASSERT_EQ(rep.plan.instances.size(), 1u);
  std::vector<DeviceId> attn = rep.plan.instances[0].attention_workers;
  for (DeviceId id : attn) EXPECT_EQ(c.device(id).kind, "P100");
  EXPECT_EQ(attn.size(), 4u);
  for (DeviceId id : rep.plan.instances[0].primaries()) EXPECT_NE(c.device(id).kind, "P100");
  EXPECT_NO_THROW(rep.plan.validate(c, m));
}

TEST(Search, ModelTooLargeIsInfeasible) {
  const ModelSpec m = profiles::llama_70b();
  const ClusterSpec c = cluster_of({"3090"}, m);
  try {
    search_plan(c, m, kLoad);
    FAIL() << "expected Infeasible";
  } catch (const Infeasible& e) {
    EXPECT_NE(std::string(e.what()).find("no feasible parallel plan"), std::string::npos);
  }
}

TEST(Search, PlansAreValidOnRandomSubclusters) {
  const ModelSpec m = profiles::llama_13b();
  std::mt19937_64 rng(2);
  const std::vector<std::string> kinds{"A100", "3090", "P100"};
  for (int k = 0; k < 10; ++k) {
    std::vector<std::string> pick;
    const int n = std::uniform_int_distribution<int>(1, 5)(rng);
    for (int i = 0; i < n; ++i) pick.push_back(kinds[std::uniform_int_distribution<std::size_t>(0, 2)(rng)]);
    const ClusterSpec c = cluster_of(pick, m);
    try {
      const SearchReport rep = search_plan(c, m, kLoad);
      EXPECT_NO_THROW(rep.plan.validate(c, m));
      EXPECT_GE(rep.candidates, 1);
    } catch (const Infeasible&) {
      // A cluster of small cards may not hold the model.
    }
  }
}

TEST(PlanValidate, RejectsBrokenPlans) {
  const ModelSpec m = profiles::llama_13b();
  const ClusterSpec c = cluster_of({"A100", "3090"}, m);
  ParallelPlan gap;
  gap.instances.push_back({{stage({0}, 0, 20), stage({1}, 21, 40)}, {}});
  EXPECT_THROW(gap.validate(c, m), InvalidArgument);
  ParallelPlan missing;
  missing.instances.push_back({{stage({0}, 0, 40)}, {}});
  EXPECT_THROW(missing.validate(c, m), InvalidArgument);
  ParallelPlan mixed;
  mixed.instances.push_back({{stage({0, 1}, 0, 40)}, {}});
  EXPECT_THROW(mixed.validate(c, m), InvalidArgument);
}

}  // namespace
}  // namespace hetis
