#pragma once

#include <optional>
#include <string>

#include "hetis/cluster.h"
#include "hetis/parallelizer.h"
#include "hetis/profiler.h"

namespace hetis {

// Whole file as text. A missing file is a NotFound error reading
// "<what> not found: <path>".
std::string read_text_file(const std::string& path, const std::string& what);
void write_text_file(const std::string& path, const std::string& text);

// Model object: either {"preset": "llama-70b"} or every ModelSpec field.
// Accepts a document whose top level is the model or holds it under "model".
ModelSpec parse_model(const std::string& json_text);
std::string model_to_json(const ModelSpec& model);

// The "model" object embedded in a cluster document, if any.
std::optional<ModelSpec> embedded_model(const std::string& cluster_json);

// Cluster document with devices[] and optional links[] and link_defaults.
// Devices of a built-in kind may omit every field but id, kind and host_id;
// their defaults are derived for `model`. Pairs missing from links[] use the
// intra- or inter-host default.
ClusterSpec parse_cluster(const std::string& json_text, const ModelSpec& model);
std::string cluster_to_json(const ClusterSpec& cluster, const ModelSpec* model = nullptr);

std::string plan_to_json(const SearchReport& report);
ParallelPlan parse_plan(const std::string& json_text);

struct FitSamples {
  std::vector<AttentionSample> attention;
  std::vector<TransferSample> transfer;
};
FitSamples parse_fit_samples(const std::string& json_text);
// Either part may be absent when its samples were absent.
std::string fitted_params_to_json(const std::optional<AttentionCostParams>& attn,
                                  const std::optional<TransferCostParams>& xfer);

}  // namespace hetis
