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

#include <algorithm>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "dpge/error.hpp"

namespace dpge::cli {
namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& message) { throw ConfigError(message); }

// Pulls typed values with key-path error messages and tracks which keys were
// consumed so unknown keys can be rejected.
class ObjectReader {
 public:
  ObjectReader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) fail("config: '" + path_ + "' must be a JSON object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    if (const json* v = fetch(key)) assign(*v, key, out);
  }

  template <typename T>
  void read_optional(const char* key, std::optional<T>& out) {
    if (const json* v = fetch(key)) {
      T value{};
      assign(*v, key, value);
      out = value;
    }
  }

  bool has(const char* key) {
    return fetch(key) != nullptr;
  }

  const json* fetch(const char* key) {
    consumed_.push_back(key);
    const auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (const auto& [key, value] : obj_.items()) {
      if (std::find(consumed_.begin(), consumed_.end(), key) == consumed_.end()) {
        fail("config: unknown key '" + join(key) + "'");
      }
    }
  }

  std::string join(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

 private:
  template <typename T>
  void assign(const json& v, const char* key, T& out) {
    try {
      out = v.get<T>();
    } catch (const json::exception&) {
      fail("config: key '" + join(key) + "' has the wrong type");
    }
  }

  const json& obj_;
  std::string path_;
  std::vector<std::string> consumed_;
};

RunMode parse_mode(const std::string& name) {
  if (name == "plan") return RunMode::kPlan;
  if (name == "account") return RunMode::kAccount;
  if (name == "pretrain") return RunMode::kPretrain;
  if (name == "finetune") return RunMode::kFinetune;
  if (name == "bench") return RunMode::kBench;
  fail("config: mode must be one of plan|account|pretrain|finetune|bench, got '" + name + "'");
}

std::size_t line_of_offset(const std::string& text, std::size_t byte) {
  return 1 + static_cast<std::size_t>(
                 std::count(text.begin(), text.begin() + std::min(byte, text.size()), '\n'));
}

}  // namespace

std::string_view mode_name(RunMode mode) {
  switch (mode) {
    case RunMode::kPlan:
      return "plan";
    case RunMode::kAccount:
      return "account";
    case RunMode::kPretrain:
      return "pretrain";
    case RunMode::kFinetune:
      return "finetune";
    case RunMode::kBench:
      return "bench";
  }
  return "unknown";
}

void RunConfig::validate() const {
  model.validate();
  dp.validate();
  if (target_epsilon && *target_epsilon <= 0.0) fail("config: target_epsilon must be positive");
  if (delta && (*delta <= 0.0 || *delta >= 1.0)) fail("config: delta must lie in (0, 1)");
  if (sampling_rate && (*sampling_rate < 0.0 || *sampling_rate > 1.0)) {
    fail("config: sampling_rate must lie in [0, 1]");
  }
  if (noise_multiplier && *noise_multiplier < 0.0) {
    fail("config: noise_multiplier must be non-negative");
  }
  if (validation_fraction <= 0.0 || validation_fraction >= 1.0) {
    fail("config: validation_fraction must lie in (0, 1)");
  }
  if (masking_rate < 0.0 || masking_rate > 1.0) fail("config: masking_rate must lie in [0, 1]");
  if (budget_mode != "fixed-steps" && budget_mode != "stop-at-epsilon") {
    fail("config: budget_mode must be 'fixed-steps' or 'stop-at-epsilon'");
  }
  if (snr_noise_norm != "realized" && snr_noise_norm != "expected") {
    fail("config: snr_noise_norm must be 'realized' or 'expected'");
  }
  if (finetune.epochs < 0) fail("config: finetune.epochs must be >= 0");
  if (finetune.batch_size < 1) fail("config: finetune.batch_size must be positive");
  if (finetune.lr <= 0.0) fail("config: finetune.lr must be positive");
  if (finetune.test_fraction <= 0.0 || finetune.test_fraction >= 1.0) {
    fail("config: finetune.test_fraction must lie in (0, 1)");
  }
  if (bench.epochs < 5) fail("config: bench.epochs must be >= 5");
  if (steps && mode == RunMode::kPretrain && *steps != dp.total_steps) {
    fail("config: top-level 'steps' conflicts with dp.total_steps for pretrain runs");
  }
}

RunConfig parse_config_text(const std::string& text, const std::string& origin) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    std::ostringstream msg;
    msg << "config: parse error in " << origin << " at line " << line_of_offset(text, e.byte)
        << ": " << e.what();
    fail(msg.str());
  }

  RunConfig cfg;
  ObjectReader top(root, "");
  std::string mode_str;
  if (const json* m = top.fetch("mode")) {
    mode_str = m->get<std::string>();
  } else {
    fail("config: required key 'mode' is missing");
  }
  cfg.mode = parse_mode(mode_str);

  top.read("corpus_path", cfg.corpus_path);
  top.read("output_dir", cfg.output_dir);
  top.read("init_checkpoint", cfg.init_checkpoint);
  top.read_optional("target_epsilon", cfg.target_epsilon);
  top.read_optional("delta", cfg.delta);
  top.read_optional("sampling_rate", cfg.sampling_rate);
  top.read_optional("noise_multiplier", cfg.noise_multiplier);
  top.read_optional("steps", cfg.steps);
  top.read("checkpoint_every", cfg.checkpoint_every);
  top.read("validation_fraction", cfg.validation_fraction);
  top.read("masking_rate", cfg.masking_rate);
  top.read("budget_mode", cfg.budget_mode);
  top.read("snr_noise_norm", cfg.snr_noise_norm);

  if (const json* seed = top.fetch("seed")) {
    const auto s = seed->get<std::uint64_t>();
    cfg.seeds = Seeds{s, s + 1, s + 2, s + 3};
  }
  if (const json* seeds = top.fetch("seeds")) {
    ObjectReader r(*seeds, "seeds");
    r.read("init", cfg.seeds.init);
    r.read("data", cfg.seeds.data);
    r.read("noise", cfg.seeds.noise);
    r.read("dropout", cfg.seeds.dropout);
    r.finish();
  }
  if (const json* model = top.fetch("model")) {
    ObjectReader r(*model, "model");
    r.read("vocab_size", cfg.model.vocab_size);
    r.read("max_seq_len", cfg.model.max_seq_len);
    r.read("num_layers", cfg.model.num_layers);
    r.read("hidden_dim", cfg.model.hidden_dim);
    r.read("num_heads", cfg.model.num_heads);
    r.read("ff_dim", cfg.model.ff_dim);
    r.read("dropout_rate", cfg.model.dropout_rate);
    r.finish();
  }
  if (const json* dp = top.fetch("dp")) {
    ObjectReader r(*dp, "dp");
    r.read("clip_norm", cfg.dp.clip_norm);
    r.read("logical_batch_size", cfg.dp.logical_batch_size);
    r.read("shard_size", cfg.dp.shard_size);
    r.read("peak_lr", cfg.dp.peak_lr);
    r.read("total_steps", cfg.dp.total_steps);
    r.read("weight_decay", cfg.dp.weight_decay);
    r.read("adam_beta1", cfg.dp.adam_beta1);
    r.read("adam_beta2", cfg.dp.adam_beta2);
    r.read("adam_eps", cfg.dp.adam_eps);
    r.finish();
  }
  if (const json* ft = top.fetch("finetune")) {
    ObjectReader r(*ft, "finetune");
    r.read("epochs", cfg.finetune.epochs);
    r.read("batch_size", cfg.finetune.batch_size);
    r.read("lr", cfg.finetune.lr);
    r.read("weight_decay", cfg.finetune.weight_decay);
    r.read("dataset_size", cfg.finetune.dataset_size);
    r.read("test_fraction", cfg.finetune.test_fraction);
    r.read("early_stop_patience", cfg.finetune.early_stop_patience);
    r.read("random_init", cfg.finetune.random_init);
    r.finish();
  }
  if (const json* bc = top.fetch("bench")) {
    ObjectReader r(*bc, "bench");
    if (const json* modes = r.fetch("modes")) {
      cfg.bench.modes.clear();
      for (const auto& m : *modes) {
        const auto parsed = bench::mode_from_name(m.get<std::string>());
        if (!parsed) fail("config: bench.modes entry '" + m.get<std::string>() + "' is unknown");
        cfg.bench.modes.push_back(*parsed);
      }
    }
    if (const json* sizes = r.fetch("batch_sizes")) {
      cfg.bench.batch_sizes = sizes->get<std::vector<int>>();
    }
    r.read("epochs", cfg.bench.epochs);
    r.read("dataset_size", cfg.bench.dataset_size);
    r.read("shard_size", cfg.bench.shard_size);
    r.read("sigma", cfg.bench.sigma);
    r.read("lr", cfg.bench.lr);
    r.finish();
  }
  top.finish();

  cfg.validate();
  return cfg;
}

RunConfig parse_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("config: cannot open '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_config_text(text, path);
}

std::string resolved_config_json(const RunConfig& cfg) {
  json j;
  j["mode"] = std::string(mode_name(cfg.mode));
  if (!cfg.corpus_path.empty()) j["corpus_path"] = cfg.corpus_path;
  j["output_dir"] = cfg.output_dir;
  if (!cfg.init_checkpoint.empty()) j["init_checkpoint"] = cfg.init_checkpoint;
  if (cfg.target_epsilon) j["target_epsilon"] = *cfg.target_epsilon;
  if (cfg.delta) j["delta"] = *cfg.delta;
  if (cfg.sampling_rate) j["sampling_rate"] = *cfg.sampling_rate;
  if (cfg.noise_multiplier) j["noise_multiplier"] = *cfg.noise_multiplier;
  if (cfg.steps) j["steps"] = *cfg.steps;
  j["checkpoint_every"] = cfg.checkpoint_every;
  j["validation_fraction"] = cfg.validation_fraction;
  j["masking_rate"] = cfg.masking_rate;
  j["budget_mode"] = cfg.budget_mode;
  j["snr_noise_norm"] = cfg.snr_noise_norm;
  j["seeds"] = {{"init", cfg.seeds.init},
                {"data", cfg.seeds.data},
                {"noise", cfg.seeds.noise},
                {"dropout", cfg.seeds.dropout}};
  j["model"] = {{"vocab_size", cfg.model.vocab_size},   {"max_seq_len", cfg.model.max_seq_len},
                {"num_layers", cfg.model.num_layers},   {"hidden_dim", cfg.model.hidden_dim},
                {"num_heads", cfg.model.num_heads},     {"ff_dim", cfg.model.ff_dim},
                {"dropout_rate", cfg.model.dropout_rate}};
  j["dp"] = {{"clip_norm", cfg.dp.clip_norm},
             {"logical_batch_size", cfg.dp.logical_batch_size},
             {"shard_size", cfg.dp.shard_size},
             {"peak_lr", cfg.dp.peak_lr},
             {"total_steps", cfg.dp.total_steps},
             {"weight_decay", cfg.dp.weight_decay},
             {"adam_beta1", cfg.dp.adam_beta1},
             {"adam_beta2", cfg.dp.adam_beta2},
             {"adam_eps", cfg.dp.adam_eps}};
  j["finetune"] = {{"epochs", cfg.finetune.epochs},
                   {"batch_size", cfg.finetune.batch_size},
                   {"lr", cfg.finetune.lr},
                   {"weight_decay", cfg.finetune.weight_decay},
                   {"dataset_size", cfg.finetune.dataset_size},
                   {"test_fraction", cfg.finetune.test_fraction},
                   {"early_stop_patience", cfg.finetune.early_stop_patience},
                   {"random_init", cfg.finetune.random_init}};
  json modes = json::array();
  for (const auto m : cfg.bench.modes) modes.push_back(std::string(bench::mode_name(m)));
  j["bench"] = {{"modes", modes},
                {"batch_sizes", cfg.bench.batch_sizes},
                {"epochs", cfg.bench.epochs},
                {"dataset_size", cfg.bench.dataset_size},
                {"shard_size", cfg.bench.shard_size},
                {"sigma", cfg.bench.sigma},
                {"lr", cfg.bench.lr}};
  return j.dump(2);
}

}  // namespace dpge::cli
