// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "fastmem/binary_io.hpp"
#include "fastmem/config.hpp"
#include "fastmem/error.hpp"
#include "test_util.hpp"

using namespace fastmem;
using nlohmann::json;

TEST(Config, DefaultsAreDeskScale) {
  const StreamConfig c;
  EXPECT_EQ(c.dim, 64u);
  EXPECT_EQ(c.tokens_per_frame, 16u);
  EXPECT_EQ(c.batch_size, 32u);
  EXPECT_EQ(c.memory_budget, 256u);
  EXPECT_EQ(c.stack_layers, 4u);
  EXPECT_EQ(c.stack_heads, 4u);
  EXPECT_EQ(c.reader_chunk, 64u);
  EXPECT_EQ(c.optimizer.kind, OptimizerKind::hf);
  EXPECT_EQ(c.optimizer.cg.max_iters, 3u);
  EXPECT_EQ(c.precision, Precision::f64);
  EXPECT_EQ(c.hidden(), 128u);
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.reader_budget().keep_per_chunk(c.stack_layers), 64u);
}

TEST(Config, ParsesAllListedKeysNested) {
  const json j = json::parse(R"({
    "dim": 32, "tokens_per_frame": 8, "batch_size": 16, "memory_budget": 128,
    "optimizer": {"kind": "hf", "cg_iters": 4, "curvature": "ln", "damping": 0.001,
                  "ns_iters": 6, "eta": 0.5},
    "reader": {"chunk": 32, "avg_tokens": 16},
    "stack": {"layers": 2, "heads": 2},
    "seed": 99, "precision": "f32", "frames": 10
  })");
  const auto c = parse_config(j);
  EXPECT_EQ(c.dim, 32u);
  EXPECT_EQ(c.tokens_per_frame, 8u);
  EXPECT_EQ(c.batch_size, 16u);
  EXPECT_EQ(c.memory_budget, 128u);
  EXPECT_EQ(c.optimizer.cg.max_iters, 4u);
  EXPECT_EQ(c.optimizer.cg.curvature, JacobianMode::ln);
  EXPECT_DOUBLE_EQ(c.optimizer.cg.damping, 0.001);
  EXPECT_EQ(c.optimizer.ns_iters, 6u);
  EXPECT_DOUBLE_EQ(c.base_lr, 0.5);
  EXPECT_EQ(c.reader_chunk, 32u);
  EXPECT_EQ(c.reader_avg_tokens, 16u);
  EXPECT_EQ(c.stack_layers, 2u);
  EXPECT_EQ(c.stack_heads, 2u);
  EXPECT_EQ(c.seed, 99u);
  EXPECT_EQ(c.precision, Precision::f32);
  EXPECT_EQ(c.frames, 10u);
}

TEST(Config, DottedKeysAndMuonEta) {
  const auto c = parse_config(json::parse(R"({"optimizer.kind": "muon", "optimizer.eta": 0.07})"));
  EXPECT_EQ(c.optimizer.kind, OptimizerKind::muon);
  EXPECT_DOUBLE_EQ(c.optimizer.muon_eta, 0.07);
  EXPECT_DOUBLE_EQ(c.base_lr, StreamConfig{}.base_lr);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(parse_config(json::parse(R"({"dimension": 3})")), ContractError);
  EXPECT_THROW(parse_config(json::parse(R"({"dim": -1})")), ContractError);
  EXPECT_THROW(parse_config(json::parse(R"({"dim": 2.5})")), ContractError);
  EXPECT_THROW(parse_config(json::parse(R"({"dim": 0})")), ContractError);
  EXPECT_THROW(parse_config(json::parse(R"({"precision": "f16"})")), ContractError);
  EXPECT_THROW(parse_config(json::parse(R"({"optimizer": {"kind": "adam"}})")), ContractError);
  EXPECT_THROW(parse_config(json::parse(R"({"optimizer": {"curvature": "full"}})")), ContractError);
  EXPECT_THROW(parse_config(json::parse(R"({"optimizer": {"cg_iters": 0}})")), ContractError);
  EXPECT_THROW(parse_config(json::parse(R"({"dim": 30, "stack": {"heads": 4}})")), ContractError);
  EXPECT_THROW(parse_config(json::parse(R"([1, 2])")), ContractError);
  EXPECT_THROW(parse_config(json::parse(R"({"seed": "x"})")), ContractError);
}

TEST(Config, JsonRoundTrip) {
  StreamConfig c;
  c.dim = 48;
  c.ttt_heads = 3;
  c.optimizer = OptimizerSpec::muon(0.03, 7);
  c.seed = 12345678901234ull;
  c.precision = Precision::f32;
  c.audio_tokens_per_frame = 2;
  const auto back = parse_config(config_to_json(c));
  EXPECT_EQ(config_to_json(back), config_to_json(c));
  EXPECT_EQ(back.seed, c.seed);
  EXPECT_EQ(back.optimizer.kind, OptimizerKind::muon);
  EXPECT_EQ(back.ttt_heads, 3u);
}

TEST(Config, LoadFromFile) {
  const auto dir = fastmem::test::scratch_dir("config");
  write_file_atomic(dir / "c.json", std::string_view(R"({"dim": 16, "stack": {"heads": 2}, "ttt": {"heads": 2}})"));
  EXPECT_EQ(load_config(dir / "c.json").dim, 16u);
  write_file_atomic(dir / "bad.json", std::string_view("{\"dim\": 16,"));
  EXPECT_THROW(load_config(dir / "bad.json"), ParseError);
}

TEST(Config, EnumParsing) {
  EXPECT_EQ(parse_precision("f64"), Precision::f64);
  EXPECT_STREQ(to_string(Precision::f32), "f32");
  EXPECT_EQ(parse_optimizer_kind("sgd"), OptimizerKind::sgd);
  EXPECT_EQ(parse_curvature("mlp"), JacobianMode::mlp);
  EXPECT_THROW(parse_precision("double"), ContractError);
}
