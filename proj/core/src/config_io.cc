#include "hetis/config_io.h"

#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include <json.hpp>

#include "hetis/errors.h"
#include "hetis/profiles.h"

namespace hetis {

using nlohmann::json;

namespace {

json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(what + ": " + e.what());
  }
}

template <typename T>
T field(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw ParseError(where + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ParseError(where + ": field '" + key + "': " + e.what());
  }
}

template <typename T>
T field_or(const json& j, const char* key, T fallback, const std::string& where) {
  return j.contains(key) ? field<T>(j, key, where) : fallback;
}

NetworkLink parse_link(const json& j, const std::string& where) {
  NetworkLink l;
  l.bandwidth = field<double>(j, "bandwidth_Bps", where);
  l.latency = field<double>(j, "latency_s", where);
  return l;
}

json link_json(const NetworkLink& l) { return {{"bandwidth_Bps", l.bandwidth}, {"latency_s", l.latency}}; }

ModelSpec model_from_object(const json& j) {
  const std::string where = "model";
  if (!j.is_object()) throw ParseError("model must be a JSON object");
  if (j.contains("preset")) {
    const auto name = field<std::string>(j, "preset", where);
    try {
      return profiles::model_by_name(name);
    } catch (const InvalidArgument& e) {
      throw ParseError(e.what());
    }
  }
  ModelSpec m;
  m.name = field_or<std::string>(j, "name", "custom", where);
  m.n_layers = field<int>(j, "n_layers", where);
  m.n_query_heads = field<int>(j, "n_query_heads", where);
  m.gqa_ratio = field_or<int>(j, "gqa_ratio", 1, where);
  m.head_dim = field<int>(j, "head_dim", where);
  m.hidden_dim = field_or<int>(j, "hidden_dim", m.n_query_heads * m.head_dim, where);
  m.param_bytes = field<std::int64_t>(j, "param_bytes", where);
  m.kv_bytes_per_head_token =
      field_or<std::int64_t>(j, "kv_bytes_per_head_token", 2LL * m.head_dim, where);
  m.value_bytes = field_or<int>(j, "value_bytes", 2, where);
  m.validate();
  return m;
}

}  // namespace

std::string read_text_file(const std::string& path, const std::string& what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFound(what + " not found: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidArgument("cannot write " + path);
  out << text;
}

ModelSpec parse_model(const std::string& json_text) {
  const json j = parse_json(json_text, "model");
  if (j.is_object() && j.contains("model")) return model_from_object(j.at("model"));
  return model_from_object(j);
}

std::string model_to_json(const ModelSpec& m) {
  json j = {{"name", m.name},
            {"n_layers", m.n_layers},
            {"n_query_heads", m.n_query_heads},
            {"gqa_ratio", m.gqa_ratio},
            {"head_dim", m.head_dim},
            {"hidden_dim", m.hidden_dim},
            {"param_bytes", m.param_bytes},
            {"kv_bytes_per_head_token", m.kv_bytes_per_head_token},
            {"value_bytes", m.value_bytes}};
  return j.dump(2) + "\n";
}

std::optional<ModelSpec> embedded_model(const std::string& cluster_json) {
  const json j = parse_json(cluster_json, "cluster");
  if (!j.is_object() || !j.contains("model")) return std::nullopt;
  return model_from_object(j.at("model"));
}

ClusterSpec parse_cluster(const std::string& json_text, const ModelSpec& model) {
  const json j = parse_json(json_text, "cluster");
  if (!j.is_object() || !j.contains("devices") || !j.at("devices").is_array()) {
    throw ParseError("cluster: expected an object with a devices[] array");
  }
  NetworkLink intra = profiles::intra_host_link();
  NetworkLink inter = profiles::inter_host_link();
  if (j.contains("link_defaults")) {
    const json& d = j.at("link_defaults");
    if (d.contains("intra_host")) intra = parse_link(d.at("intra_host"), "link_defaults.intra_host");
    if (d.contains("inter_host")) inter = parse_link(d.at("inter_host"), "link_defaults.inter_host");
  }

  std::vector<DeviceSpec> devices;
  for (std::size_t k = 0; k < j.at("devices").size(); ++k) {
    const json& dj = j.at("devices")[k];
    const std::string where = "devices[" + std::to_string(k) + "]";
    const auto kind = field<std::string>(dj, "kind", where);
    const auto id = field<DeviceId>(dj, "id", where);
    const auto host = field_or<int>(dj, "host_id", 0, where);
    DeviceSpec d;
    if (profiles::is_known_kind(kind)) d = profiles::device(kind, id, host, model);
    d.id = id;
    d.kind = kind;
    d.host_id = host;
    const bool known = profiles::is_known_kind(kind);
    auto num = [&](const json& obj, const char* key, double fallback, const std::string& w) {
      return known ? field_or<double>(obj, key, fallback, w) : field<double>(obj, key, w);
    };
    d.mem_total = static_cast<std::int64_t>(
        num(dj, "mem_total_bytes", static_cast<double>(d.mem_total), where));
    d.dense_rate = num(dj, "dense_rate_flops", d.dense_rate, where);
    d.decode_rate = field_or<double>(dj, "decode_rate_flops", d.decode_rate, where);
    const json attn = dj.contains("attn") ? dj.at("attn") : json::object();
    const json xfer = dj.contains("xfer") ? dj.at("xfer") : json::object();
    d.attn_cost.a = num(attn, "a_s", d.attn_cost.a, where + ".attn");
    d.attn_cost.b = num(attn, "b_s", d.attn_cost.b, where + ".attn");
    d.attn_cost.c = num(attn, "c_s", d.attn_cost.c, where + ".attn");
    d.xfer_cost.gamma = num(xfer, "gamma_s", d.xfer_cost.gamma, where + ".xfer");
    d.xfer_cost.beta = num(xfer, "beta_s", d.xfer_cost.beta, where + ".xfer");
    devices.push_back(d);
  }

  const std::size_t n = devices.size();
  std::map<DeviceId, std::size_t> pos;
  for (std::size_t i = 0; i < n; ++i) pos[devices[i].id] = i;
  std::vector<NetworkLink> links(n * n);
  std::vector<bool> given(n * n, false);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = 0; b < n; ++b) {
      if (a == b) {
        links[a * n + b] = {std::numeric_limits<double>::infinity(), 0.0};
      } else {
        links[a * n + b] = devices[a].host_id == devices[b].host_id ? intra : inter;
      }
    }
  }
  if (j.contains("links")) {
    for (std::size_t k = 0; k < j.at("links").size(); ++k) {
      const json& lj = j.at("links")[k];
      const std::string where = "links[" + std::to_string(k) + "]";
      const auto a = field<DeviceId>(lj, "a", where);
      const auto b = field<DeviceId>(lj, "b", where);
      if (pos.count(a) == 0 || pos.count(b) == 0) {
        throw ParseError(where + ": unknown device id");
      }
      const NetworkLink l = parse_link(lj, where);
      const std::size_t ia = pos[a];
      const std::size_t ib = pos[b];
      for (auto [x, y] : {std::pair{ia, ib}, std::pair{ib, ia}}) {
        if (given[x * n + y] && (links[x * n + y].bandwidth != l.bandwidth ||
                                 links[x * n + y].latency != l.latency)) {
          throw InvalidArgument(where + ": conflicting entries make the link table asymmetric");
        }
        links[x * n + y] = l;
        given[x * n + y] = true;
      }
    }
  }
  ClusterSpec cluster(std::move(devices), std::move(links));
  return cluster;
}

std::string cluster_to_json(const ClusterSpec& cluster, const ModelSpec* model) {
  json j;
  if (model != nullptr) j["model"] = json::parse(model_to_json(*model));
  json devs = json::array();
  for (const auto& d : cluster.devices()) {
    devs.push_back({{"id", d.id},
                    {"kind", d.kind},
                    {"host_id", d.host_id},
                    {"mem_total_bytes", d.mem_total},
                    {"dense_rate_flops", d.dense_rate},
                    {"decode_rate_flops", d.effective_decode_rate()},
                    {"attn", {{"a_s", d.attn_cost.a}, {"b_s", d.attn_cost.b}, {"c_s", d.attn_cost.c}}},
                    {"xfer", {{"gamma_s", d.xfer_cost.gamma}, {"beta_s", d.xfer_cost.beta}}}});
  }
  j["devices"] = devs;
  json links = json::array();
  const auto& ds = cluster.devices();
  for (std::size_t a = 0; a < ds.size(); ++a) {
    for (std::size_t b = a + 1; b < ds.size(); ++b) {
      json l = link_json(cluster.link(ds[a].id, ds[b].id));
      l["a"] = ds[a].id;
      l["b"] = ds[b].id;
      links.push_back(l);
    }
  }
  j["links"] = links;
  return j.dump(2) + "\n";
}

std::string plan_to_json(const SearchReport& report) {
  json inst = json::array();
  for (const auto& ip : report.plan.instances) {
    json stages = json::array();
    for (const auto& st : ip.stages) {
      stages.push_back({{"devices", st.devices},
                        {"layers", {st.layer_begin, st.layer_end}},
                        {"worker_count", st.worker_count}});
    }
    inst.push_back({{"stages", stages}, {"attention_workers", ip.attention_workers}});
  }
  json j = {{"dp_degree", report.dp_degree},
            {"candidates", report.candidates},
            {"instances", inst},
            {"cost",
             {{"total_s", report.cost.total},
              {"comm_s", report.cost.comm},
              {"comp_s", report.cost.comp},
              {"stage_max_s", report.cost.stage_max}}}};
  return j.dump(2) + "\n";
}

ParallelPlan parse_plan(const std::string& json_text) {
  const json j = parse_json(json_text, "plan");
  if (!j.is_object() || !j.contains("instances")) throw ParseError("plan: missing instances[]");
  ParallelPlan plan;
  for (std::size_t q = 0; q < j.at("instances").size(); ++q) {
    const json& ij = j.at("instances")[q];
    const std::string where = "instances[" + std::to_string(q) + "]";
    InstancePlan ip;
    ip.attention_workers =
        field_or<std::vector<DeviceId>>(ij, "attention_workers", {}, where);
    if (!ij.contains("stages")) throw ParseError(where + ": missing stages[]");
    for (std::size_t k = 0; k < ij.at("stages").size(); ++k) {
      const json& sj = ij.at("stages")[k];
      const std::string sw = where + ".stages[" + std::to_string(k) + "]";
      StageGroup st;
      st.devices = field<std::vector<DeviceId>>(sj, "devices", sw);
      const auto layers = field<std::vector<int>>(sj, "layers", sw);
      if (layers.size() != 2) throw ParseError(sw + ": layers must be [begin, end]");
      st.layer_begin = layers[0];
      st.layer_end = layers[1];
      st.worker_count = field_or<int>(
          sj, "worker_count", st.tp() + static_cast<int>(ip.attention_workers.size()), sw);
      ip.stages.push_back(std::move(st));
    }
    plan.instances.push_back(std::move(ip));
  }
  return plan;
}

FitSamples parse_fit_samples(const std::string& json_text) {
  const json j = parse_json(json_text, "samples");
  if (!j.is_object()) throw ParseError("samples: expected an object");
  FitSamples s;
  if (j.contains("attention")) {
    for (std::size_t k = 0; k < j.at("attention").size(); ++k) {
      const json& e = j.at("attention")[k];
      const std::string w = "attention[" + std::to_string(k) + "]";
      s.attention.push_back(
          {field<double>(e, "h", w), field<double>(e, "g", w), field<double>(e, "seconds", w)});
    }
  }
  if (j.contains("transfer")) {
    for (std::size_t k = 0; k < j.at("transfer").size(); ++k) {
      const json& e = j.at("transfer")[k];
      const std::string w = "transfer[" + std::to_string(k) + "]";
      s.transfer.push_back({field<double>(e, "d", w), field<double>(e, "seconds", w)});
    }
  }
  if (s.attention.empty() && s.transfer.empty()) {
    throw ParseError("samples: neither attention[] nor transfer[] present");
  }
  return s;
}

std::string fitted_params_to_json(const std::optional<AttentionCostParams>& attn,
                                  const std::optional<TransferCostParams>& xfer) {
  json j = json::object();
  if (attn) j["attn"] = {{"a_s", attn->a}, {"b_s", attn->b}, {"c_s", attn->c}};
  if (xfer) j["xfer"] = {{"gamma_s", xfer->gamma}, {"beta_s", xfer->beta}};
  return j.dump(2) + "\n";
}

}  // namespace hetis
