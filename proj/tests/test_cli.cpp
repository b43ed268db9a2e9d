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
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <doctest.h>

namespace fs = std::filesystem;

namespace {

struct CommandResult {
  int exit_code = -1;
  std::string output;
};

CommandResult run_command(const std::string& args) {
  const char* bin = std::getenv("DPGE_BIN");
  REQUIRE_MESSAGE(bin != nullptr, "DPGE_BIN must point at the dpge binary");
  const std::string cmd = std::string(bin) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  CommandResult r;
  char buf[512];
  while (fgets(buf, sizeof(buf), pipe) != nullptr) r.output += buf;
  const int status = pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

double parse_field(const std::string& output, const std::string& key) {
  // match only at the start of a line so e.g. "epsilon=" does not hit
  // "target_epsilon="
  const std::string needle = key + "=";
  std::istringstream lines(output);
  std::string line;
  while (std::getline(lines, line)) {
    if (line.rfind(needle, 0) == 0) {
      return std::strtod(line.c_str() + needle.size(), nullptr);
    }
  }
  const std::string message = "missing '" + needle + "' line in:\n" + output;
  FAIL(message);
  return 0.0;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& tag) {
  const auto dir = fs::temp_directory_path() / ("dpge_cli_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

const char* kTinyPretrain = R"({
  "mode": "pretrain",
  "corpus_path": "synthetic:tokens=2500",
  "model": {"vocab_size": 128, "max_seq_len": 16, "num_layers": 1,
            "hidden_dim": 16, "num_heads": 2, "ff_dim": 32, "dropout_rate": 0.0},
  "dp": {"logical_batch_size": 8, "shard_size": 4, "peak_lr": 0.001,
         "total_steps": 6, "clip_norm": 1.0},
  "noise_multiplier": 0.7,
  "checkpoint_every": 3,
  "seeds": {"init": 1, "data": 2, "noise": 3, "dropout": 4}
})";

}  // namespace

TEST_CASE("plan then account round-trips the calibrated sigma") {
  const auto plan =
      run_command("plan --target-eps 5 --q 0.0009765625 --delta 1e-6 --steps 2000");
  CHECK(plan.exit_code == 0);
  const double sigma = parse_field(plan.output, "sigma");
  const double eps = parse_field(plan.output, "epsilon");
  CHECK(eps <= 5.0);
  CHECK(eps >= 5.0 * (1.0 - 1e-3));

  std::ostringstream account_args;
  account_args.precision(17);
  account_args << "account --sigma " << sigma << " --q 0.0009765625 --delta 1e-6 --steps 2000";
  const auto account = run_command(account_args.str());
  CHECK(account.exit_code == 0);
  const double eps2 = parse_field(account.output, "epsilon");
  CHECK(eps2 == doctest::Approx(eps).epsilon(1e-9));
}

TEST_CASE("account at q=0 ignores sigma") {
  const auto a = run_command("account --sigma 0.5 --q 0 --delta 1e-6 --steps 500");
  const auto b = run_command("account --sigma 5.0 --q 0 --delta 1e-6 --steps 500");
  CHECK(a.exit_code == 0);
  CHECK(parse_field(a.output, "epsilon") == doctest::Approx(parse_field(b.output, "epsilon")));
}

TEST_CASE("bad config exits with code 2") {
  const auto dir = fresh_dir("badcfg");
  const auto cfg = dir / "bad.json";
  std::ofstream(cfg) << R"({"mode":"plan","learningrate":1})";
  const auto r = run_command("--config " + cfg.string() + " plan");
  CHECK(r.exit_code == 2);
  CHECK(r.output.find("learningrate") != std::string::npos);

  const auto r2 = run_command("plan");  // no target at all
  CHECK(r2.exit_code == 2);
}

TEST_CASE("pretrain is reproducible byte-for-byte and writes artifacts") {
  const auto dir1 = fresh_dir("pre1");
  const auto dir2 = fresh_dir("pre2");
  const auto cfg = dir1 / "run.json";
  std::ofstream(cfg) << kTinyPretrain;

  const auto r1 =
      run_command("--config " + cfg.string() + " --output-dir " + dir1.string() + " pretrain");
  REQUIRE_MESSAGE(r1.exit_code == 0, r1.output);
  CHECK(r1.output.find("final epsilon=") != std::string::npos);
  CHECK(fs::exists(dir1 / "metrics.csv"));
  CHECK(fs::exists(dir1 / "snr.csv"));
  CHECK(fs::exists(dir1 / "run_manifest.json"));
  CHECK(fs::exists(dir1 / "checkpoint_step6.dpge"));

  const auto r2 =
      run_command("--config " + cfg.string() + " --output-dir " + dir2.string() + " pretrain");
  REQUIRE(r2.exit_code == 0);
  CHECK(read_file(dir1 / "metrics.csv") == read_file(dir2 / "metrics.csv"));
  CHECK(read_file(dir1 / "snr.csv") == read_file(dir2 / "snr.csv"));

  // epsilon_spent column is non-decreasing
  std::istringstream metrics(read_file(dir1 / "metrics.csv"));
  std::string line;
  std::getline(metrics, line);  // header
  double prev = -1.0;
  int rows = 0;
  while (std::getline(metrics, line)) {
    int col = 0;
    std::string field;
    std::istringstream ls(line);
    double eps = 0.0;
    while (std::getline(ls, field, ',')) {
      if (col == 6) eps = std::strtod(field.c_str(), nullptr);
      ++col;
    }
    CHECK(eps >= prev);
    prev = eps;
    ++rows;
  }
  CHECK(rows >= 3);  // step 0 + checkpoints at 3 and 6

  // rerunning from the manifest's resolved config reproduces metrics.csv
  const auto dir3 = fresh_dir("pre3");
  {
    const auto manifest = read_file(dir1 / "run_manifest.json");
    const auto at = manifest.find("\"config\"");
    REQUIRE(at != std::string::npos);
    // extract the config object by brace matching
    const auto open = manifest.find('{', at);
    std::size_t depth = 0, end = open;
    for (std::size_t i = open; i < manifest.size(); ++i) {
      if (manifest[i] == '{') ++depth;
      if (manifest[i] == '}' && --depth == 0) {
        end = i;
        break;
      }
    }
    std::ofstream(dir3 / "from_manifest.json")
        << manifest.substr(open, end - open + 1);
  }
  const auto r3 = run_command("--config " + (dir3 / "from_manifest.json").string() +
                              " --output-dir " + dir3.string() + " pretrain");
  REQUIRE_MESSAGE(r3.exit_code == 0, r3.output);
  CHECK(read_file(dir3 / "metrics.csv") == read_file(dir1 / "metrics.csv"));
}

TEST_CASE("budget enforcement stops with exit code 4") {
  const auto dir = fresh_dir("budget");
  const auto cfg = dir / "run.json";
  // sigma so small that even one step blows a tiny budget
  std::ofstream(cfg) << R"({
    "mode": "pretrain",
    "corpus_path": "synthetic:tokens=2500",
    "budget_mode": "stop-at-epsilon",
    "target_epsilon": 0.5,
    "noise_multiplier": 0.4,
    "model": {"vocab_size": 128, "max_seq_len": 16, "num_layers": 1,
              "hidden_dim": 16, "num_heads": 2, "ff_dim": 32, "dropout_rate": 0.0},
    "dp": {"logical_batch_size": 8, "shard_size": 4, "peak_lr": 0.001,
           "total_steps": 50, "clip_norm": 1.0}
  })";
  const auto r = run_command("--config " + cfg.string() + " --output-dir " + dir.string() +
                             " pretrain");
  CHECK(r.exit_code == 4);
  CHECK(r.output.find("budget") != std::string::npos);
  CHECK(fs::exists(dir / "metrics.csv"));  // partial artifacts flushed
}

TEST_CASE("finetune runs from a checkpoint and reports macro-F1") {
  const auto dir = fresh_dir("ft");
  const auto pre_cfg = dir / "pre.json";
  std::ofstream(pre_cfg) << kTinyPretrain;
  const auto pre = run_command("--config " + pre_cfg.string() + " --output-dir " + dir.string() +
                               " pretrain");
  REQUIRE_MESSAGE(pre.exit_code == 0, pre.output);

  const auto ft_cfg = dir / "ft.json";
  std::ofstream(ft_cfg) << R"({
    "mode": "finetune",
    "finetune": {"epochs": 1, "batch_size": 8, "lr": 0.002, "dataset_size": 80,
                 "test_fraction": 0.25}
  })";
  const auto ft = run_command("--config " + ft_cfg.string() + " --output-dir " +
                              (dir / "ft_out").string() + " finetune --checkpoint " +
                              (dir / "checkpoint_step6.dpge").string());
  REQUIRE_MESSAGE(ft.exit_code == 0, ft.output);
  const double f1 = parse_field(ft.output, "macro_f1");
  CHECK(f1 >= 0.0);
  CHECK(f1 <= 1.0);
  CHECK(fs::exists(dir / "ft_out" / "metrics.csv"));

  // zero-epoch budget: returns the initial model's metrics unchanged
  const auto ft0_cfg = dir / "ft0.json";
  std::ofstream(ft0_cfg) << R"({
    "mode": "finetune",
    "finetune": {"epochs": 0, "batch_size": 8, "lr": 0.002, "dataset_size": 80,
                 "test_fraction": 0.25}
  })";
  const auto ft0 = run_command("--config " + ft0_cfg.string() + " --output-dir " +
                               (dir / "ft0_out").string() + " finetune --checkpoint " +
                               (dir / "checkpoint_step6.dpge").string());
  REQUIRE_MESSAGE(ft0.exit_code == 0, ft0.output);
  CHECK(ft0.output.find("epochs=0") != std::string::npos);
}

TEST_CASE("bench subcommand writes the sweep CSV") {
  const auto dir = fresh_dir("bench");
  const auto cfg = dir / "bench.json";
  std::ofstream(cfg) << R"({
    "mode": "bench",
    "model": {"vocab_size": 64, "max_seq_len": 16, "num_layers": 1,
              "hidden_dim": 16, "num_heads": 2, "ff_dim": 32, "dropout_rate": 0.0},
    "bench": {"modes": ["naive_loop", "vectorized"], "batch_sizes": [4],
              "epochs": 5, "dataset_size": 16, "shard_size": 4, "sigma": 0.5, "lr": 0.001}
  })";
  const auto r = run_command("--config " + cfg.string() + " --output-dir " + dir.string() +
                             " bench");
  REQUIRE_MESSAGE(r.exit_code == 0, r.output);
  const auto csv = read_file(dir / "bench.csv");
  CHECK(csv.find("mode,batch_size,median_epoch_seconds,peak_memory_bytes,epochs_measured") == 0);
  CHECK(csv.find("naive_loop,4,") != std::string::npos);
  CHECK(csv.find("vectorized,4,") != std::string::npos);
}
