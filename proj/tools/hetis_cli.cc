#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hetis/config_io.h"
#include "hetis/errors.h"
#include "hetis/parallelizer.h"
#include "hetis/profiler.h"
#include "hetis/profiles.h"
#include "hetis/simulator.h"
#include "hetis/workload.h"

namespace {

using namespace hetis;

int exit_code(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::kInvalidArgument:
      return 2;
    case ErrorCategory::kNotFound:
      return 3;
    case ErrorCategory::kParse:
      return 4;
    case ErrorCategory::kInfeasible:
      return 5;
    case ErrorCategory::kFitFailure:
      return 6;
    case ErrorCategory::kInternal:
      return 70;
  }
  return 70;
}

struct Inputs {
  std::string cluster = "default";
  std::string model;
};

// A preset name or a JSON file. Falls back to the model embedded in the
// cluster file when --model is absent.
ModelSpec load_model(const Inputs& in) {
  if (!in.model.empty()) {
    if (std::filesystem::exists(in.model)) return parse_model(read_text_file(in.model, "model"));
    try {
      return profiles::model_by_name(in.model);
    } catch (const InvalidArgument&) {
      throw NotFound("model not found: " + in.model +
                     " (not a file and not one of llama-13b, opt-30b, llama-70b, opt-2.7b)");
    }
  }
  if (in.cluster != "default" && in.cluster != "a100-3090") {
    if (auto m = embedded_model(read_text_file(in.cluster, "cluster"))) return *m;
  }
  throw InvalidArgument("no model: pass --model or embed one in the cluster file");
}

ClusterSpec load_cluster(const Inputs& in, const ModelSpec& model) {
  if (in.cluster == "default") return profiles::default_cluster(model);
  if (in.cluster == "a100-3090") return profiles::a100_two_3090(model);
  return parse_cluster(read_text_file(in.cluster, "cluster"), model);
}

struct WorkloadArgs {
  std::string trace;
  double rate = 0.0;
  double duration = 60.0;
  std::string prompt_dist = "lognormal:6.5,0.5";
  std::string output_dist = "lognormal:5.0,0.5";
  std::uint64_t seed = 0;
};

std::vector<TraceEntry> load_workload(const WorkloadArgs& w) {
  if (!w.trace.empty()) {
    auto trace = load_trace(w.trace);
    if (trace.empty()) throw InvalidArgument("trace " + w.trace + " has no requests");
    return trace;
  }
  if (!(w.rate > 0.0)) throw InvalidArgument("pass --trace, or --rate > 0 with --duration");
  return poisson_trace(w.rate, w.duration, LengthDist::parse(w.prompt_dist),
                       LengthDist::parse(w.output_dist), w.seed);
}

struct SimArgs {
  Inputs in;
  WorkloadArgs work;
  std::string policy = "hetis";
  std::string out;
  std::string plan;
  SimConfig cfg;
};

void add_common(CLI::App* cmd, Inputs& in) {
  cmd->add_option("--cluster", in.cluster,
                  "cluster JSON file, or the built-ins 'default' and 'a100-3090'")
      ->capture_default_str();
  cmd->add_option("--model", in.model, "model JSON file or preset name");
}

void add_sim(CLI::App* cmd, SimArgs& a) {
  add_common(cmd, a.in);
  cmd->add_option("--trace", a.work.trace, "JSON-lines trace (arrival_s, prompt_tokens, output_tokens)");
  cmd->add_option("--rate", a.work.rate, "Poisson arrival rate, requests/s");
  cmd->add_option("--duration", a.work.duration, "arrival window, seconds")->capture_default_str();
  cmd->add_option("--prompt-dist", a.work.prompt_dist, "const:N | uniform:LO,HI | lognormal:MU,SIGMA")
      ->capture_default_str();
  cmd->add_option("--output-dist", a.work.output_dist, "same forms as --prompt-dist")
      ->capture_default_str();
  cmd->add_option("--seed", a.work.seed, "seed for generated arrivals")->capture_default_str();
  cmd->add_option("--out", a.out, "output directory")->required();
  cmd->add_option("--delta", a.cfg.delta, "pruning tolerance")->capture_default_str();
  cmd->add_option("--theta", a.cfg.theta, "re-dispatch threshold")->capture_default_str();
  cmd->add_option("--block-size", a.cfg.block_size, "tokens per cache block")->capture_default_str();
  cmd->add_option("--max-batch", a.cfg.max_batch, "resident requests per instance")
      ->capture_default_str();
  cmd->add_option("--horizon", a.cfg.horizon, "stop after this many simulated seconds");
  cmd->add_option("--plan", a.plan, "plan JSON from 'hetis search' (hetis policy; skips the search)");
}

std::optional<ParallelPlan> load_plan(const std::string& path) {
  if (path.empty()) return std::nullopt;
  return parse_plan(read_text_file(path, "plan"));
}

std::string summary_line(const SimSummary& s) {
  auto f = [](double v) {
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
  };
  return s.policy + ',' + std::to_string(s.requests) + ',' + std::to_string(s.completed) + ',' +
         std::to_string(s.rejected) + ',' + f(s.throughput) + ',' + f(s.ttft_p50) + ',' +
         f(s.ttft_p95) + ',' + f(s.tpot_p50) + ',' + f(s.tpot_p95) + ',' +
         f(s.peak_cache_blocks) + ',' + f(s.cache_capacity_blocks) + ',' +
         std::to_string(s.evictions) + ',' + std::to_string(s.migrations) + ',' +
         std::to_string(s.moved_bytes) + '\n';
}

const char* kSummaryHeader =
    "policy,requests,completed,rejected,throughput_rps,ttft_p50_s,ttft_p95_s,tpot_p50_s,"
    "tpot_p95_s,peak_cache_blocks,cache_capacity_blocks,evictions,migrations,moved_bytes\n";

int run(int argc, char** argv) {
  CLI::App app{"Head-wise attention scheduling for heterogeneous GPU clusters"};
  app.require_subcommand(1);

  Inputs search_in;
  WorkloadProfile load{512, 128, 8};
  SearchOptions search_opts;
  std::string search_out;
  auto* search = app.add_subcommand("search", "search a parallel plan and print it as JSON");
  add_common(search, search_in);
  search->add_option("--prompt-len", load.mean_prompt_len, "mean prompt tokens")->capture_default_str();
  search->add_option("--output-len", load.mean_output_len, "mean output tokens")->capture_default_str();
  search->add_option("--batch", load.mean_batch, "mean concurrent requests")->capture_default_str();
  search->add_option("--delta", search_opts.delta, "pruning tolerance")->capture_default_str();
  search->add_option("--out", search_out, "write the plan here instead of stdout");

  SimArgs sim;
  auto* simulate_cmd = app.add_subcommand("simulate", "run one policy and write metrics");
  add_sim(simulate_cmd, sim);
  simulate_cmd->add_option("--policy", sim.policy, "hetis | phase_split | param_split")
      ->capture_default_str();

  SimArgs cmp;
  auto* compare = app.add_subcommand("compare", "run all three policies side by side");
  add_sim(compare, cmp);

  std::string samples_path;
  std::string fit_out;
  auto* fit = app.add_subcommand("fit", "fit attention and transfer cost parameters");
  fit->add_option("--samples", samples_path, "JSON with attention[] {h, g, seconds} and transfer[] {d, seconds}")
      ->required();
  fit->add_option("--out", fit_out, "write the parameters here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  if (*search) {
    const ModelSpec model = load_model(search_in);
    const ClusterSpec cluster = load_cluster(search_in, model);
    const SearchReport rep = search_plan(cluster, model, load, search_opts);
    const std::string text = plan_to_json(rep);
    if (search_out.empty()) {
      std::cout << text;
    } else {
      write_text_file(search_out, text);
    }
    return 0;
  }
  if (*fit) {
    const FitSamples s = parse_fit_samples(read_text_file(samples_path, "samples"));
    std::optional<AttentionCostParams> attn;
    std::optional<TransferCostParams> xfer;
    if (!s.attention.empty()) attn = fit_attention(s.attention);
    if (!s.transfer.empty()) xfer = fit_transfer(s.transfer);
    const std::string text = fitted_params_to_json(attn, xfer);
    if (fit_out.empty()) {
      std::cout << text;
    } else {
      write_text_file(fit_out, text);
    }
    return 0;
  }
  if (*simulate_cmd) {
    sim.cfg.policy = parse_policy(sim.policy);
    const ModelSpec model = load_model(sim.in);
    const ClusterSpec cluster = load_cluster(sim.in, model);
    const auto trace = load_workload(sim.work);
    const SimResult res = simulate(cluster, model, trace, sim.cfg, load_plan(sim.plan));
    write_metrics(res, sim.out);
    std::cout << kSummaryHeader << summary_line(res.summary);
    return 0;
  }
  if (*compare) {
    const ModelSpec model = load_model(cmp.in);
    const ClusterSpec cluster = load_cluster(cmp.in, model);
    const auto trace = load_workload(cmp.work);
    const auto plan = load_plan(cmp.plan);
    std::string table = kSummaryHeader;
    for (Policy p : {Policy::kHetis, Policy::kParamSplit, Policy::kPhaseSplit}) {
      SimConfig cfg = cmp.cfg;
      cfg.policy = p;
      const SimResult res =
          simulate(cluster, model, trace, cfg, p == Policy::kHetis ? plan : std::nullopt);
      write_metrics(res, cmp.out + "/" + to_string(p));
      table += summary_line(res.summary);
    }
    write_text_file(cmp.out + "/compare.csv", table);
    std::cout << table;
    return 0;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const hetis::Error& e) {
    std::cerr << "hetis: " << hetis::to_string(e.category()) << ": " << e.what() << '\n';
    return exit_code(e.category());
  } catch (const std::exception& e) {
    std::cerr << "hetis: internal: " << e.what() << '\n';
    return 70;
  }
}
