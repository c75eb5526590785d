#include <gtest/gtest.h>

#include <filesystem>

#include "hetis/config_io.h"
#include "hetis/errors.h"
#include "hetis/profiles.h"

namespace hetis {
namespace {

const std::string kConfigDir = HETIS_CONFIG_DIR;

TEST(ConfigIo, ModelPresetAndFullForm) {
  EXPECT_EQ(parse_model(R"({"preset": "llama-70b"})").n_layers, 80);
  EXPECT_EQ(parse_model(R"({"model": {"preset": "opt-30b"}})").name, "opt-30b");
  const ModelSpec m = profiles::llama_13b();
  const ModelSpec back = parse_model(model_to_json(m));
  EXPECT_EQ(back.n_layers, m.n_layers);
  EXPECT_EQ(back.param_bytes, m.param_bytes);
  EXPECT_EQ(back.kv_bytes_per_head_token, m.kv_bytes_per_head_token);
}

TEST(ConfigIo, ModelErrors) {
  EXPECT_THROW(parse_model("[1, 2]"), ParseError);
  EXPECT_THROW(parse_model("{not json"), ParseError);
  EXPECT_THROW(parse_model(R"({"name": "x", "n_layers": 2})"), ParseError);
}

TEST(ConfigIo, ClusterFilesLoad) {
  for (const char* f : {"cluster_default.json", "cluster_single_a100.json", "cluster_a100_3090.json"}) {
    const std::string text = read_text_file(kConfigDir + "/" + f, "cluster");
    const auto m = embedded_model(text);
    const ModelSpec model = m ? *m : profiles::llama_13b();
    const ClusterSpec c = parse_cluster(text, model);
    EXPECT_NO_THROW(c.validate()) << f;
    EXPECT_GE(c.size(), 1u);
  }
}

TEST(ConfigIo, DefaultClusterFileMatchesBuiltIn) {
  const std::string text = read_text_file(kConfigDir + "/cluster_default.json", "cluster");
  const ModelSpec m = *embedded_model(text);
  const ClusterSpec a = parse_cluster(text, m);
  const ClusterSpec b = profiles::default_cluster(m);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& x = a.devices()[i];
    const auto& y = b.devices()[i];
    EXPECT_EQ(x.kind, y.kind);
    EXPECT_EQ(x.mem_total, y.mem_total);
    EXPECT_DOUBLE_EQ(x.dense_rate, y.dense_rate);
    for (std::size_t k = 0; k < a.size(); ++k) {
      if (k == i) continue;  // self links are never used
      EXPECT_DOUBLE_EQ(a.link(x.id, a.devices()[k].id).bandwidth, b.link(y.id, b.devices()[k].id).bandwidth);
    }
  }
}

TEST(ConfigIo, ClusterRoundTrip) {
  const ModelSpec m = profiles::llama_70b();
  const ClusterSpec c = profiles::default_cluster(m);
  const ClusterSpec back = parse_cluster(cluster_to_json(c, &m), m);
  ASSERT_EQ(back.size(), c.size());
  EXPECT_DOUBLE_EQ(back.devices()[11].attn_cost.b, c.devices()[11].attn_cost.b);
  EXPECT_DOUBLE_EQ(back.link(0, 11).latency, c.link(0, 11).latency);
}

TEST(ConfigIo, ClusterErrors) {
  const ModelSpec m = profiles::llama_13b();
  EXPECT_THROW(parse_cluster(R"({"devices": 3})", m), ParseError);
  EXPECT_THROW(parse_cluster(R"({"devices": [{"id": 0, "kind": "H100", "host_id": 0}]})", m), ParseError);
  EXPECT_THROW(parse_cluster(R"({"devices": [{"id": 0, "kind": "A100", "host_id": 0}],
                                 "links": [{"a": 0, "b": 7, "bandwidth_Bps": 1e9, "latency_s": 0}]})",
                             m),
               ParseError);
  EXPECT_THROW(parse_cluster(R"({"devices": [{"id": 0, "kind": "A100", "host_id": 0},
                                             {"id": 1, "kind": "A100", "host_id": 0}],
                                 "links": [{"a": 0, "b": 1, "bandwidth_Bps": 1e9, "latency_s": 0},
                                           {"a": 1, "b": 0, "bandwidth_Bps": 2e9, "latency_s": 0}]})",
                             m),
               InvalidArgument);
}

TEST(ConfigIo, UnknownKindWithAllFieldsIsAccepted) {
  const ModelSpec m = profiles::llama_13b();
  const ClusterSpec c = parse_cluster(R"({"devices": [{"id": 5, "kind": "X1", "host_id": 0,
      "mem_total_bytes": 48000000000, "dense_rate_flops": 1e14, "decode_rate_flops": 5e13,
      "attn": {"a_s": 1e-6, "b_s": 1e-9, "c_s": 1e-5}, "xfer": {"gamma_s": 1e-8, "beta_s": 1e-5}}]})",
                                      m);
  EXPECT_EQ(c.device(5).kind, "X1");
  EXPECT_DOUBLE_EQ(c.device(5).decode_rate, 5e13);
}

TEST(ConfigIo, PlanRoundTrip) {
  const ModelSpec m = profiles::llama_70b();
  const ClusterSpec c = profiles::default_cluster(m);
  const SearchReport rep = search_plan(c, m, {512, 128, 8});
  const ParallelPlan back = parse_plan(plan_to_json(rep));
  ASSERT_EQ(back.instances.size(), rep.plan.instances.size());
  EXPECT_EQ(back.instances[0].attention_workers, rep.plan.instances[0].attention_workers);
  ASSERT_EQ(back.instances[0].stages.size(), rep.plan.instances[0].stages.size());
  EXPECT_EQ(back.instances[0].stages[0].layer_end, rep.plan.instances[0].stages[0].layer_end);
  EXPECT_NO_THROW(back.validate(c, m));
  EXPECT_THROW(parse_plan("{}"), ParseError);
}

TEST(ConfigIo, FitSamplesFile) {
  const FitSamples s = parse_fit_samples(read_text_file(kConfigDir + "/fit_samples.json", "samples"));
  EXPECT_FALSE(s.attention.empty());
  EXPECT_FALSE(s.transfer.empty());
  EXPECT_THROW(parse_fit_samples("{}"), ParseError);
}

TEST(ConfigIo, MissingFileIsNotFound) {
  EXPECT_THROW(read_text_file("/nonexistent/x.json", "cluster"), NotFound);
}

TEST(ConfigIo, WriteCreatesParents) {
  const auto dir = std::filesystem::temp_directory_path() / "hetis_cfg_test" / "a" / "b";
  std::filesystem::remove_all(dir.parent_path().parent_path());
  write_text_file((dir / "x.txt").string(), "hi");
  EXPECT_EQ(read_text_file((dir / "x.txt").string(), "file"), "hi");
  std::filesystem::remove_all(dir.parent_path().parent_path());
}

}  // namespace
}  // namespace hetis
