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
#include "dpge/runner.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "dpge/accountant.hpp"
#include "dpge/checkpoint.hpp"
#include "dpge/data_pipeline.hpp"
#include "dpge/dp_optimizer.hpp"
#include "dpge/error.hpp"
#include "dpge/kernels.hpp"
#include "dpge/telemetry.hpp"
#include "dpge/threadpool.hpp"

namespace dpge::cli {
namespace {

namespace fs = std::filesystem;

void ensure_output_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir + "': " + ec.message());
}

void write_manifest(const RunConfig& config, double final_epsilon) {
  nlohmann::json manifest;
  manifest["version"] = kVersion;
  manifest["config"] = nlohmann::json::parse(resolved_config_json(config));
  manifest["final_epsilon"] = final_epsilon;
  manifest["kernel_backend"] = std::string(kern::backend_name(kern::active_backend()));
  manifest["threads"] = worker_threads();
  const std::string path = (fs::path(config.output_dir) / "run_manifest.json").string();
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << manifest.dump(2) << "\n";
  if (!out) throw IoError("write failure on '" + path + "'");
}

data::Corpus load_configured_corpus(const RunConfig& config) {
  if (config.corpus_path.empty()) {
    throw ConfigError("pretrain: corpus_path is required");
  }
  const std::string synthetic_prefix = "synthetic:tokens=";
  if (config.corpus_path.rfind(synthetic_prefix, 0) == 0) {
    const std::string count = config.corpus_path.substr(synthetic_prefix.size());
    const std::size_t tokens = std::strtoull(count.c_str(), nullptr, 10);
    if (tokens == 0) throw ConfigError("pretrain: bad synthetic corpus spec '" + config.corpus_path + "'");
    const std::string text = data::make_synthetic_corpus(tokens, config.seeds.data);
    std::istringstream stream(text);
    return data::parse_corpus(stream, config.corpus_path);
  }
  return data::load_corpus(config.corpus_path);
}

struct PrivacyResolution {
  double q = 0.0;
  double delta = 0.0;
  double sigma = 0.0;
};

// Fills in delta (dataset-size rule), q (B/N) and sigma (binary-search
// calibration against the target epsilon) where the config left them open.
PrivacyResolution resolve_privacy(const RunConfig& config, std::size_t dataset_size,
                                  std::ostream& out) {
  PrivacyResolution r;
  const auto B = static_cast<double>(config.dp.logical_batch_size);
  if (config.sampling_rate) {
    r.q = *config.sampling_rate;
  } else {
    if (dataset_size == 0) throw ConfigError("privacy: cannot derive q from an empty dataset");
    if (B > static_cast<double>(dataset_size)) {
      throw ConfigError("privacy: logical_batch_size exceeds the training set; set sampling_rate");
    }
    r.q = B / static_cast<double>(dataset_size);
  }
  r.delta = config.delta ? *config.delta : accountant::default_delta(dataset_size);
  if (config.noise_multiplier) {
    r.sigma = *config.noise_multiplier;
  } else if (config.target_epsilon) {
    r.sigma = accountant::calibrate_sigma(*config.target_epsilon, r.delta, r.q,
                                          config.dp.total_steps,
                                          accountant::OrderGrid::default_grid());
    out << "calibrated sigma=" << r.sigma << " for target epsilon=" << *config.target_epsilon
        << "\n";
  } else {
    throw ConfigError("privacy: set noise_multiplier or target_epsilon");
  }
  return r;
}

struct EvalMetrics {
  double loss = 0.0;
  double mlm_loss = 0.0;
  std::optional<double> mlm_acc;
  std::optional<double> nsp_acc;
};

EvalMetrics evaluate_pretrain(const model::ModelConfig& mc, std::span<const float> params,
                              std::span<const data::EncodedExample> examples, int shard_size,
                              model::Workspace<float>& ws) {
  EvalMetrics m;
  if (examples.empty()) return m;
  double loss = 0.0, mlm_loss = 0.0;
  std::size_t mlm_correct = 0, mlm_total = 0, nsp_correct = 0, nsp_total = 0;
  std::vector<std::size_t> idx;
  for (std::size_t begin = 0; begin < examples.size();
       begin += static_cast<std::size_t>(shard_size)) {
    const std::size_t end =
        std::min(examples.size(), begin + static_cast<std::size_t>(shard_size));
    idx.resize(end - begin);
    for (std::size_t i = begin; i < end; ++i) idx[i - begin] = i;
    const auto batch = data::gather_batch(examples, idx, model::Mode::kPretrain);
    const auto fw = model::forward(mc, params, batch, model::Mode::kPretrain, std::nullopt, ws);
    for (const float l : fw.losses) loss += static_cast<double>(l);
    for (const float l : fw.mlm_losses) mlm_loss += static_cast<double>(l);
    for (std::size_t i = 0; i < fw.mlm_predictions.size(); ++i) {
      mlm_correct += fw.mlm_predictions[i] == fw.mlm_targets[i];
    }
    mlm_total += fw.mlm_predictions.size();
    for (int b = 0; b < batch.batch_size; ++b) {
      const float* row = fw.nsp_logits.data() + 2 * b;
      const int pred = row[1] > row[0] ? 1 : 0;
      nsp_correct += pred == batch.nsp_labels[static_cast<std::size_t>(b)];
    }
    nsp_total += static_cast<std::size_t>(batch.batch_size);
  }
  const double n = static_cast<double>(examples.size());
  m.loss = loss / n;
  m.mlm_loss = mlm_loss / n;
  if (mlm_total > 0) m.mlm_acc = static_cast<double>(mlm_correct) / static_cast<double>(mlm_total);
  if (nsp_total > 0) m.nsp_acc = static_cast<double>(nsp_correct) / static_cast<double>(nsp_total);
  return m;
}

void save_training_checkpoint(const RunConfig& config, const model::ModelConfig& mc,
                              const std::vector<float>& params, std::uint64_t step,
                              double epsilon, const std::string& path) {
  model::Checkpoint ckpt;
  ckpt.config = mc;
  ckpt.params.registry = model::Registry::build(mc);
  ckpt.params.values = params;
  ckpt.step = step;
  ckpt.seeds = {config.seeds.init, config.seeds.data, config.seeds.noise, config.seeds.dropout};
  ckpt.epsilon_spent = epsilon;
  model::save_checkpoint(path, ckpt);
}

}  // namespace

PlanResult run_plan(const RunConfig& config, std::ostream& out, const std::string& csv_path) {
  if (!config.target_epsilon) throw ConfigError("plan: target_epsilon is required");
  if (!config.delta) throw ConfigError("plan: delta is required");
  if (!config.sampling_rate) throw ConfigError("plan: sampling_rate is required");
  const std::uint64_t steps = config.steps ? *config.steps : config.dp.total_steps;
  const double q = *config.sampling_rate;
  const double delta = *config.delta;
  const auto grid = accountant::OrderGrid::default_grid();

  PlanResult plan;
  plan.sigma = accountant::calibrate_sigma(*config.target_epsilon, delta, q, steps, grid);
  const auto acct = accountant::account(q, plan.sigma, steps, delta, grid);
  plan.epsilon = acct.epsilon;
  plan.best_order = acct.best_order;
  plan.per_step_rdp = accountant::rdp_subsampled_gaussian(q, plan.sigma, acct.best_order);
  plan.warmup = dp::warmup_steps(steps);

  const auto saved_precision = out.precision(17);  // machine-readable round trip
  out << "plan: target_epsilon=" << *config.target_epsilon << " delta=" << delta << " q=" << q
      << " steps=" << steps << "\n";
  out << "sigma=" << plan.sigma << "\n";
  out << "epsilon=" << plan.epsilon << "\n";
  out << "best_order=" << plan.best_order << "\n";
  out << "per_step_rdp=" << plan.per_step_rdp << "\n";
  out << "warmup_steps=" << plan.warmup << "\n";
  out.precision(saved_precision);

  // sigma sweep around the calibrated point
  const double factors[] = {0.5, 0.75, 1.0, 1.5, 2.0};
  out << "sigma,epsilon,best_order\n";
  std::ostringstream csv;
  csv << "sigma,epsilon,best_order\n";
  for (const double f : factors) {
    const double sigma = plan.sigma * f;
    const auto row = accountant::account(q, sigma, steps, delta, grid);
    out << sigma << "," << row.epsilon << "," << row.best_order << "\n";
    csv << sigma << "," << row.epsilon << "," << row.best_order << "\n";
  }
  if (!csv_path.empty()) {
    std::ofstream f(csv_path, std::ios::trunc);
    if (!f) throw IoError("plan: cannot write '" + csv_path + "'");
    f << csv.str();
  }
  return plan;
}

AccountResult run_account(const RunConfig& config, std::ostream& out) {
  if (!config.noise_multiplier) throw ConfigError("account: noise_multiplier is required");
  if (!config.delta) throw ConfigError("account: delta is required");
  if (!config.sampling_rate) throw ConfigError("account: sampling_rate is required");
  const std::uint64_t steps = config.steps ? *config.steps : config.dp.total_steps;
  const auto grid = accountant::OrderGrid::default_grid();
  const auto acct = accountant::account(*config.sampling_rate, *config.noise_multiplier, steps,
                                        *config.delta, grid);
  AccountResult r;
  r.epsilon = acct.epsilon;
  r.best_order = acct.best_order;
  r.per_step_rdp =
      accountant::rdp_subsampled_gaussian(*config.sampling_rate, *config.noise_multiplier,
                                          acct.best_order);
  const auto saved_precision = out.precision(17);
  out << "epsilon=" << r.epsilon << "\n";
  out << "best_order=" << r.best_order << "\n";
  out << "per_step_rdp=" << r.per_step_rdp << "\n";
  out.precision(saved_precision);
  return r;
}

PretrainSummary run_pretrain(const RunConfig& config, std::ostream& out) {
  ensure_output_dir(config.output_dir);
  const model::ModelConfig& mc = config.model;

  const auto corpus = load_configured_corpus(config);
  const auto vocab = data::Vocab::build(corpus, static_cast<std::size_t>(mc.vocab_size));
  data::PretrainOptions opts;
  opts.seq_len = mc.max_seq_len;
  opts.mask_rate = config.masking_rate;
  const auto examples = data::make_pretrain_examples(corpus, vocab, opts, config.seeds.data);
  auto [train, validation] =
      data::split_validation(examples, config.validation_fraction, config.seeds.data);
  if (train.empty()) throw ConfigError("pretrain: training split is empty");
  out << "corpus: " << corpus.documents.size() << " documents, " << corpus.total_tokens()
      << " tokens -> " << train.size() << " train / " << validation.size()
      << " validation examples\n";

  const auto privacy = resolve_privacy(config, train.size(), out);
  const auto grid = accountant::OrderGrid::default_grid();

  PretrainSummary summary;
  summary.sigma = privacy.sigma;
  summary.sampling_rate = privacy.q;
  summary.delta = privacy.delta;

  // model init: fresh or continued from a prior checkpoint
  std::vector<float> params;
  if (!config.init_checkpoint.empty()) {
    auto ckpt = model::load_checkpoint(config.init_checkpoint);
    if (ckpt.config.vocab_size != mc.vocab_size || ckpt.config.hidden_dim != mc.hidden_dim ||
        ckpt.config.num_layers != mc.num_layers || ckpt.config.num_heads != mc.num_heads ||
        ckpt.config.ff_dim != mc.ff_dim || ckpt.config.max_seq_len != mc.max_seq_len) {
      throw ValidationError("pretrain: --init-checkpoint model config mismatch");
    }
    params = std::move(ckpt.params.values);
  } else {
    params = model::init_params(mc, config.seeds.init).values;
  }
  auto opt = dp::OptimizerState::create(params.size());
  rng::GaussianNoiseSource noise(config.seeds.noise);
  dp::TrainScratch scratch;
  model::Workspace<float> eval_ws;

  dp::DpSgdConfig dp_cfg = config.dp;
  dp_cfg.noise_multiplier = privacy.sigma;

  const double expected_noise_norm =
      privacy.sigma * dp_cfg.clip_norm * std::sqrt(static_cast<double>(params.size()));
  const bool snr_expected_norm = config.snr_noise_norm == "expected";

  std::vector<telemetry::MetricsRecord> metrics;
  std::vector<telemetry::SnrRecord> snr_records;
  const std::string metrics_path = (fs::path(config.output_dir) / "metrics.csv").string();
  const std::string snr_path = (fs::path(config.output_dir) / "snr.csv").string();

  // step-0 record: the untrained model's validation metrics (the loss
  // columns both carry the evaluation loss before any update)
  const auto eval0 = evaluate_pretrain(mc, params, validation, dp_cfg.shard_size, eval_ws);
  summary.initial_eval_loss = eval0.loss;
  summary.initial_eval_mlm_loss = eval0.mlm_loss;
  {
    telemetry::MetricsRecord rec;
    rec.step = 0;
    rec.train_loss = eval0.loss;
    rec.eval_loss = eval0.loss;
    rec.mlm_acc = eval0.mlm_acc;
    rec.nsp_acc = eval0.nsp_acc;
    rec.epsilon_spent = accountant::account(privacy.q, privacy.sigma, 0, privacy.delta, grid).epsilon;
    rec.lr = 0.0;
    rec.batch_size = dp_cfg.logical_batch_size;
    metrics.push_back(rec);
  }

  const std::optional<std::uint64_t> dropout_seed =
      mc.dropout_rate > 0.0 ? std::optional<std::uint64_t>(config.seeds.dropout) : std::nullopt;

  double window_loss = 0.0;
  std::uint64_t window_steps = 0;
  std::optional<double> last_snr;
  double epsilon_now =
      accountant::account(privacy.q, privacy.sigma, 0, privacy.delta, grid).epsilon;
  std::uint64_t step = 0;
  for (; step < dp_cfg.total_steps; ++step) {
    // budget enforcement: never run a noisy step that would overshoot the
    // target epsilon when one is set
    if (config.target_epsilon) {
      const double eps_next =
          accountant::account(privacy.q, privacy.sigma, step + 1, privacy.delta, grid).epsilon;
      if (eps_next > *config.target_epsilon) {
        summary.budget_stopped = true;
        out << "budget: stopping before step " << step + 1 << " (epsilon " << eps_next << " > "
            << *config.target_epsilon << ")\n";
        break;
      }
    }
    const auto report = dp::dp_train_step(mc, dp_cfg, params, opt, train, model::Mode::kPretrain,
                                          privacy.q, step, config.seeds.data, noise, dropout_seed,
                                          scratch);
    window_loss += report.mean_loss;
    ++window_steps;
    if (report.noise_norm > 0.0) {
      const double noise_norm = snr_expected_norm ? expected_noise_norm : report.noise_norm;
      last_snr = telemetry::gradient_snr_from_norms(report.signal_norm, noise_norm);
      snr_records.push_back({step + 1, *last_snr, dp_cfg.logical_batch_size, report.lr});
    }
    epsilon_now =
        accountant::account(privacy.q, privacy.sigma, step + 1, privacy.delta, grid).epsilon;

    const bool checkpoint_now =
        (config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0) ||
        step + 1 == dp_cfg.total_steps;
    if (checkpoint_now) {
      const auto eval = evaluate_pretrain(mc, params, validation, dp_cfg.shard_size, eval_ws);
      telemetry::MetricsRecord rec;
      rec.step = step + 1;
      rec.train_loss = window_steps > 0 ? window_loss / static_cast<double>(window_steps) : 0.0;
      rec.eval_loss = eval.loss;
      rec.mlm_acc = eval.mlm_acc;
      rec.nsp_acc = eval.nsp_acc;
      rec.snr = last_snr;
      rec.epsilon_spent = epsilon_now;
      rec.lr = report.lr;
      rec.batch_size = dp_cfg.logical_batch_size;
      metrics.push_back(rec);
      window_loss = 0.0;
      window_steps = 0;
      const std::string ckpt_path =
          (fs::path(config.output_dir) / ("checkpoint_step" + std::to_string(step + 1) + ".dpge"))
              .string();
      save_training_checkpoint(config, mc, params, step + 1, epsilon_now, ckpt_path);
      summary.final_checkpoint = ckpt_path;
    }
  }
  summary.steps_run = step;

  if (summary.budget_stopped || summary.final_checkpoint.empty()) {
    const std::string ckpt_path =
        (fs::path(config.output_dir) / ("checkpoint_step" + std::to_string(step) + ".dpge"))
            .string();
    save_training_checkpoint(config, mc, params, step, epsilon_now, ckpt_path);
    summary.final_checkpoint = ckpt_path;
    if (summary.budget_stopped && window_steps > 0) {
      const auto eval = evaluate_pretrain(mc, params, validation, dp_cfg.shard_size, eval_ws);
      telemetry::MetricsRecord rec;
      rec.step = step;
      rec.train_loss = window_loss / static_cast<double>(window_steps);
      rec.eval_loss = eval.loss;
      rec.mlm_acc = eval.mlm_acc;
      rec.nsp_acc = eval.nsp_acc;
      rec.snr = last_snr;
      rec.epsilon_spent = epsilon_now;
      rec.lr = 0.0;
      rec.batch_size = dp_cfg.logical_batch_size;
      metrics.push_back(rec);
    }
  }

  const auto eval_final = evaluate_pretrain(mc, params, validation, dp_cfg.shard_size, eval_ws);
  summary.final_eval_loss = eval_final.loss;
  summary.final_eval_mlm_loss = eval_final.mlm_loss;
  summary.final_epsilon = epsilon_now;
  summary.best_order =
      accountant::account(privacy.q, privacy.sigma, std::max<std::uint64_t>(step, 1),
                          privacy.delta, grid)
          .best_order;

  {
    std::ofstream f(metrics_path, std::ios::trunc);
    if (!f) throw IoError("pretrain: cannot write '" + metrics_path + "'");
    telemetry::emit_metrics_csv(metrics, f);
  }
  {
    std::ofstream f(snr_path, std::ios::trunc);
    if (!f) throw IoError("pretrain: cannot write '" + snr_path + "'");
    telemetry::emit_snr_csv(snr_records, f);
  }
  summary.metrics_path = metrics_path;
  summary.snr_path = snr_path;

  RunConfig resolved = config;
  resolved.sampling_rate = privacy.q;
  resolved.delta = privacy.delta;
  resolved.noise_multiplier = privacy.sigma;
  write_manifest(resolved, summary.final_epsilon);

  out << "pretrain: ran " << summary.steps_run << " steps; eval loss " << summary.initial_eval_loss
      << " -> " << summary.final_eval_loss << " (mlm " << summary.initial_eval_mlm_loss << " -> "
      << summary.final_eval_mlm_loss << ")\n";
  out << "final epsilon=" << summary.final_epsilon << " best_order=" << summary.best_order
      << " (delta=" << privacy.delta << ")\n";
  return summary;
}

FinetuneSummary run_finetune(const RunConfig& config, std::ostream& out) {
  ensure_output_dir(config.output_dir);

  model::ModelConfig mc = config.model;
  std::vector<float> params;
  if (!config.init_checkpoint.empty()) {
    auto ckpt = model::load_checkpoint(config.init_checkpoint);
    mc = ckpt.config;
    if (config.finetune.random_init) {
      params = model::init_params(mc, config.seeds.init).values;
    } else {
      params = std::move(ckpt.params.values);
    }
  } else {
    params = model::init_params(mc, config.seeds.init).values;
  }

  const auto dataset = data::make_synthetic_classification(
      mc.vocab_size, config.finetune.dataset_size,
      data::ClassificationOptions{mc.max_seq_len, 8}, config.seeds.data);
  auto [rest, test] =
      data::split_validation(dataset, config.finetune.test_fraction, config.seeds.data);
  auto [train, validation] =
      data::split_validation(rest, config.validation_fraction, config.seeds.data + 0x7E57);
  if (train.empty() || validation.empty() || test.empty()) {
    throw ConfigError("finetune: dataset too small for the requested splits");
  }

  model::Workspace<float> ws;
  std::vector<float> grad(params.size());
  auto opt = dp::OptimizerState::create(params.size());

  const auto eval_loss = [&](std::span<const data::EncodedExample> set) {
    double loss = 0.0;
    std::vector<std::size_t> idx;
    for (std::size_t begin = 0; begin < set.size();
         begin += static_cast<std::size_t>(config.finetune.batch_size)) {
      const std::size_t end =
          std::min(set.size(), begin + static_cast<std::size_t>(config.finetune.batch_size));
      idx.resize(end - begin);
      for (std::size_t i = begin; i < end; ++i) idx[i - begin] = i;
      const auto batch = data::gather_batch(set, idx, model::Mode::kClassify);
      const auto fw =
          model::forward(mc, std::span<const float>(params), batch, model::Mode::kClassify,
                         std::nullopt, ws);
      for (const float l : fw.losses) loss += static_cast<double>(l);
    }
    return loss / static_cast<double>(set.size());
  };

  FinetuneSummary summary;
  std::vector<telemetry::MetricsRecord> metrics;
  double best_val = eval_loss(validation);
  std::vector<float> best_params = params;
  int patience_left = config.finetune.early_stop_patience;
  {
    telemetry::MetricsRecord rec;
    rec.step = 0;
    rec.train_loss = best_val;
    rec.eval_loss = best_val;
    rec.lr = 0.0;
    rec.batch_size = config.finetune.batch_size;
    metrics.push_back(rec);
  }

  rng::Stream shuffle_stream(config.seeds.data, 0x0F17E);
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  int epoch = 0;
  for (; epoch < config.finetune.epochs; ++epoch) {
    for (std::size_t i = 0; i + 1 < order.size(); ++i) {
      const std::size_t j = i + shuffle_stream.uniform_int(order.size() - i);
      std::swap(order[i], order[j]);
    }
    double train_loss = 0.0;
    std::size_t seen = 0;
    for (std::size_t begin = 0; begin < order.size();
         begin += static_cast<std::size_t>(config.finetune.batch_size)) {
      const std::size_t end =
          std::min(order.size(), begin + static_cast<std::size_t>(config.finetune.batch_size));
      const auto batch = data::gather_batch(
          train, std::span(order).subspan(begin, end - begin), model::Mode::kClassify);
      const auto fw = model::batch_gradient(mc, std::span<const float>(params), batch,
                                            model::Mode::kClassify, std::nullopt, ws,
                                            std::span<float>(grad));
      for (const float l : fw.losses) train_loss += static_cast<double>(l);
      seen += static_cast<std::size_t>(batch.batch_size);
      dp::adamw_step(opt, params, grad, config.finetune.lr, config.finetune.weight_decay, 0.9,
                     0.999, 1e-8);
    }
    const double val = eval_loss(validation);
    telemetry::MetricsRecord rec;
    rec.step = static_cast<std::uint64_t>(epoch + 1);
    rec.train_loss = seen > 0 ? train_loss / static_cast<double>(seen) : 0.0;
    rec.eval_loss = val;
    rec.lr = config.finetune.lr;
    rec.batch_size = config.finetune.batch_size;
    metrics.push_back(rec);
    out << "finetune epoch " << epoch + 1 << ": train_loss=" << rec.train_loss
        << " val_loss=" << val << "\n";
    if (val < best_val) {
      best_val = val;
      best_params = params;
      patience_left = config.finetune.early_stop_patience;
    } else {
      if (--patience_left < 0) {
        ++epoch;
        break;
      }
    }
  }
  summary.epochs_run = epoch;
  summary.best_val_loss = best_val;
  params = std::move(best_params);

  // macro-F1 on the held-out test split
  std::vector<int> predictions, labels;
  std::vector<std::size_t> idx;
  for (std::size_t begin = 0; begin < test.size();
       begin += static_cast<std::size_t>(config.finetune.batch_size)) {
    const std::size_t end =
        std::min(test.size(), begin + static_cast<std::size_t>(config.finetune.batch_size));
    idx.resize(end - begin);
    for (std::size_t i = begin; i < end; ++i) idx[i - begin] = i;
    const auto batch = data::gather_batch(test, idx, model::Mode::kClassify);
    const auto fw = model::forward(mc, std::span<const float>(params), batch,
                                   model::Mode::kClassify, std::nullopt, ws);
    for (int b = 0; b < batch.batch_size; ++b) {
      const float* row = fw.cls_logits.data() + 2 * b;
      predictions.push_back(row[1] > row[0] ? 1 : 0);
      labels.push_back(batch.class_labels[static_cast<std::size_t>(b)]);
    }
  }
  summary.test_macro_f1 = telemetry::macro_f1(predictions, labels, model::kNumClasses);

  const std::string metrics_path = (fs::path(config.output_dir) / "metrics.csv").string();
  {
    std::ofstream f(metrics_path, std::ios::trunc);
    if (!f) throw IoError("finetune: cannot write '" + metrics_path + "'");
    telemetry::emit_metrics_csv(metrics, f);
  }
  summary.metrics_path = metrics_path;
  write_manifest(config, 0.0);

  out << "finetune: best_val_loss=" << best_val << " epochs=" << summary.epochs_run << "\n";
  out << "macro_f1=" << summary.test_macro_f1 << "\n";
  return summary;
}

BenchSummary run_bench_sweep(const RunConfig& config, std::ostream& out) {
  ensure_output_dir(config.output_dir);
  std::vector<bench::BenchResult> results;
  BenchSummary summary;
  for (const auto mode : config.bench.modes) {
    for (const int batch_size : config.bench.batch_sizes) {
      bench::BenchConfig cell;
      cell.mode = mode;
      cell.batch_size = batch_size;
      cell.epochs = config.bench.epochs;
      cell.model = config.model;
      cell.dataset_size = config.bench.dataset_size;
      cell.shard_size = config.bench.shard_size;
      cell.seed = config.seeds.data;
      cell.sigma = config.bench.sigma;
      cell.lr = config.bench.lr;
      const auto result = bench::run_bench(cell);
      ++summary.cells;
      if (!result.median_epoch_seconds) ++summary.failed_cells;
      out << "bench " << bench::mode_name(mode) << " batch=" << batch_size << ": ";
      if (result.median_epoch_seconds) {
        out << *result.median_epoch_seconds << " s/epoch (median of " << result.epochs_measured
            << ")\n";
      } else {
        out << "FAILED (out of memory)\n";
      }
      results.push_back(result);
    }
  }
  const std::string csv_path = (fs::path(config.output_dir) / "bench.csv").string();
  {
    std::ofstream f(csv_path, std::ios::trunc);
    if (!f) throw IoError("bench: cannot write '" + csv_path + "'");
    bench::emit_bench_csv(results, f);
  }
  summary.csv_path = csv_path;
  write_manifest(config, 0.0);
  out << "bench: wrote " << csv_path << "\n";
  return summary;
}

}  // namespace dpge::cli
