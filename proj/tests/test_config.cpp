/*
 * Copyright 2026 The DPGE Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#include "dpge/config.hpp"

#include <doctest.h>

#include "dpge/error.hpp"

using namespace dpge;
using namespace dpge::cli;

TEST_CASE("minimal plan config parses with defaults") {
  const auto cfg = parse_config_text(
      R"({"mode":"plan","target_epsilon":5.0,"delta":1e-6,"sampling_rate":0.001,"steps":1000})");
  CHECK(cfg.mode == RunMode::kPlan);
  CHECK(cfg.target_epsilon == 5.0);
  CHECK(*cfg.steps == 1000);
  // spec defaults
  CHECK(cfg.dp.clip_norm == 1.0);
  CHECK(cfg.dp.weight_decay == 0.5);
  CHECK(cfg.validation_fraction == 0.05);
  CHECK(cfg.masking_rate == 0.15);
  CHECK(cfg.budget_mode == "fixed-steps");
}

TEST_CASE("unknown keys are rejected by name") {
  CHECK_THROWS_WITH_AS(parse_config_text(R"({"mode":"plan","learningrate":1})"),
                       doctest::Contains("learningrate"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text(R"({"mode":"plan","dp":{"learningrate":1}})"),
                       doctest::Contains("dp.learningrate"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text(R"({"mode":"plan","model":{"vocab":8}})"),
                       doctest::Contains("model.vocab"), ConfigError);
}

TEST_CASE("validation failures carry the key") {
  CHECK_THROWS_WITH_AS(parse_config_text(R"({"mode":"plan","delta":1.0})"),
                       doctest::Contains("delta"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text(R"({"mode":"plan","sampling_rate":1.5})"),
                       doctest::Contains("sampling_rate"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text(R"({"mode":"plan","budget_mode":"sometimes"})"),
                       doctest::Contains("budget_mode"), ConfigError);
  CHECK_THROWS_AS(parse_config_text(R"({"target_epsilon":5})"), ConfigError);  // missing mode
}

TEST_CASE("parse errors report the line") {
  try {
    parse_config_text("{\n  \"mode\": \"plan\",\n  oops\n}");
    FAIL("expected a parse error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
}

TEST_CASE("nested sections and seeds parse") {
  const auto cfg = parse_config_text(R"({
    "mode": "pretrain",
    "corpus_path": "synthetic:tokens=1000",
    "model": {"vocab_size": 256, "max_seq_len": 32, "num_layers": 1,
              "hidden_dim": 32, "num_heads": 2, "ff_dim": 64, "dropout_rate": 0.0},
    "dp": {"logical_batch_size": 16, "shard_size": 4, "peak_lr": 0.001,
           "total_steps": 10, "clip_norm": 1.0},
    "noise_multiplier": 0.5,
    "seeds": {"init": 10, "data": 20, "noise": 30, "dropout": 40},
    "checkpoint_every": 5
  })");
  CHECK(cfg.model.vocab_size == 256);
  CHECK(cfg.dp.shard_size == 4);
  CHECK(cfg.dp.weight_decay == 0.5);  // default survives a partial dp block
  CHECK(cfg.seeds.noise == 30);
  CHECK(*cfg.noise_multiplier == 0.5);

  // a master seed derives the four seeds
  const auto seeded = parse_config_text(R"({"mode":"plan","seed":100})");
  CHECK(seeded.seeds.init == 100);
  CHECK(seeded.seeds.dropout == 103);
}

TEST_CASE("steps conflicts with dp.total_steps only for pretrain") {
  CHECK_THROWS_WITH_AS(
      parse_config_text(
          R"({"mode":"pretrain","steps":5,"dp":{"total_steps":10},"noise_multiplier":1.0})"),
      doctest::Contains("total_steps"), ConfigError);
  CHECK_NOTHROW(parse_config_text(
      R"({"mode":"pretrain","steps":10,"dp":{"total_steps":10},"noise_multiplier":1.0})"));
}

TEST_CASE("resolved config round-trips through the parser") {
  const auto cfg = parse_config_text(R"({
    "mode": "bench",
    "bench": {"modes": ["naive_loop", "vectorized"], "batch_sizes": [8, 32],
              "epochs": 6, "dataset_size": 64, "shard_size": 4, "sigma": 0.25, "lr": 0.002}
  })");
  const auto round = parse_config_text(resolved_config_json(cfg));
  CHECK(round.mode == RunMode::kBench);
  REQUIRE(round.bench.modes.size() == 2);
  CHECK(round.bench.modes[0] == bench::BenchMode::kNaiveLoop);
  CHECK(round.bench.batch_sizes == std::vector<int>{8, 32});
  CHECK(round.bench.sigma == 0.25);
  CHECK(round.bench.epochs == 6);
}
