#pragma once

#include <chrono>
#include <cmath>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "lcap/params.hpp"
#include "lcap/tasks.hpp"
#include "lcap/transformer.hpp"

namespace lcap {

struct OptimizerConfig {
  double lr_scale = 1.0;
  std::int64_t warmup_steps = 400;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

// Adam with the inverse-sqrt warmup schedule:
//   lr(t) = lr_scale * d^-0.5 * min(t^-0.5, t * warmup^-1.5)
class AdamOptimizer {
 public:
  AdamOptimizer(ParameterStore& params, OptimizerConfig cfg, std::int64_t d_model)
      : params_(params), cfg_(cfg), d_model_(d_model) {
    for (const auto& p : params.all()) {
      m_.push_back(std::vector<double>(p.tensor.data().size(), 0.0));
      v_.push_back(std::vector<double>(p.tensor.data().size(), 0.0));
    }
  }

  double learning_rate(std::int64_t step) const {
    const double t = static_cast<double>(step);
    const double w = static_cast<double>(std::max<std::int64_t>(cfg_.warmup_steps, 1));
    return cfg_.lr_scale / std::sqrt(static_cast<double>(d_model_)) *
           std::min(1.0 / std::sqrt(t), t / (w * std::sqrt(w)));
  }

  void step() {
    ++t_;
    const double lr = learning_rate(t_);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.all().size(); ++i) {
      Parameter& p = params_.all()[i];
      if (!p.trainable || !p.tensor.has_grad()) continue;
      auto& data = p.tensor.data();
      const auto& grad = p.tensor.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < data.size(); ++k) {
        m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * grad[k];
        v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * grad[k] * grad[k];
        data[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg_.eps);
      }
    }
  }

  std::int64_t completed_steps() const { return t_; }

 private:
  ParameterStore& params_;
  OptimizerConfig cfg_;
  std::int64_t d_model_;
  std::int64_t t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

struct TrainOptions {
  Task task = Task::kCopy;
  std::int64_t steps = 3000;
  std::uint64_t seed = 1;
  std::int64_t batch_size = 32;
  std::int64_t eval_every = 200;
  std::int64_t min_len = 4;
  std::int64_t max_len = 10;  // data token length (specials excluded)
  std::int64_t eval_batches = 4;
  std::int64_t eval_batch_size = 64;
  OptimizerConfig optimizer;
};

struct MetricsRow {
  std::int64_t step = 0;
  double loss = 0.0;
  std::optional<double> token_accuracy;
  double wall_ms = 0.0;
};

struct TrainResult {
  std::vector<MetricsRow> history;
  double final_loss = 0.0;
  double final_accuracy = 0.0;
  double steps_per_sec = 0.0;
};

inline std::vector<Batch> build_eval_set(const TaskSampler& sampler, const TrainOptions& opts) {
  Rng rng(derive_seed(opts.seed, "eval"));
  std::vector<Batch> set;
  for (std::int64_t i = 0; i < opts.eval_batches; ++i) {
    set.push_back(sample_batch(sampler, opts.eval_batch_size, rng));
  }
  return set;
}

// Token-pooled teacher-forced accuracy over a fixed held-out set.
inline double evaluate_accuracy(const Seq2SeqModel& model, const std::vector<Batch>& eval_set) {
  NoGradGuard ng;
  std::int64_t correct = 0, total = 0;
  for (const auto& batch : eval_set) {
    Tensor logits = model.forward(batch);
    const std::int64_t V = logits.shape().back();
    for (std::size_t i = 0; i < batch.tgt_out.values.size(); ++i) {
      if (!batch.tgt_mask.values[i]) continue;
      const double* row = logits.data().data() + i * static_cast<std::size_t>(V);
      std::int64_t best = 0;
      for (std::int64_t v = 1; v < V; ++v) {
        if (row[v] > row[best]) best = v;
      }
      correct += best == batch.tgt_out.values[i] ? 1 : 0;
      ++total;
    }
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

inline double evaluate_loss(const Seq2SeqModel& model, const std::vector<Batch>& eval_set) {
  NoGradGuard ng;
  double weighted = 0.0, tokens = 0.0;
  for (const auto& batch : eval_set) {
    double count = 0;
    for (auto m : batch.tgt_mask.values) count += m ? 1.0 : 0.0;
    weighted += cross_entropy_loss(model.forward(batch), batch.tgt_out, batch.tgt_mask).item() * count;
    tokens += count;
  }
  return tokens > 0 ? weighted / tokens : 0.0;
}

// Deterministic training loop. Per-step loss is recorded for every step;
// held-out accuracy at step 0, every eval_every steps and at the end.
inline TrainResult train_model(Seq2SeqModel& model, const TrainOptions& opts) {
  TaskSampler sampler(opts.task,
                      model.config().vocab_size,
                      opts.min_len,
                      opts.max_len);
  if (opts.max_len + 2 > model.config().max_len) {
    throw ConfigError("train: data max_len " + std::to_string(opts.max_len) +
                      " plus specials exceeds model max_len " +
                      std::to_string(model.config().max_len));
  }
  Rng data_rng(derive_seed(opts.seed, "train"));
  const std::vector<Batch> eval_set = build_eval_set(sampler, opts);
  AdamOptimizer optimizer(model.params(), opts.optimizer, model.config().d_model);

  TrainResult result;
  const auto start = std::chrono::steady_clock::now();
  auto wall_ms = [&start]() {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
        .count();
  };

  {
    MetricsRow row;
    row.step = 0;
    row.loss = evaluate_loss(model, eval_set);
    row.token_accuracy = evaluate_accuracy(model, eval_set);
    row.wall_ms = wall_ms();
    result.history.push_back(row);
  }

  for (std::int64_t step = 1; step <= opts.steps; ++step) {
    Batch batch = sample_batch(sampler, opts.batch_size, data_rng);
    model.params().zero_grads();
    double loss_value = 0.0;
    try {
      Tensor loss = cross_entropy_loss(model.forward(batch), batch.tgt_out, batch.tgt_mask);
      loss_value = loss.item();
      if (!std::isfinite(loss_value)) throw NumericError("non-finite loss");
      loss.backward();
    } catch (const NumericError& e) {
      throw TrainingError(
          "training diverged at step " + std::to_string(step) + ": " + e.what(), step);
    }
    optimizer.step();

    MetricsRow row;
    row.step = step;
    row.loss = loss_value;
    if (step % opts.eval_every == 0 || step == opts.steps) {
      row.token_accuracy = evaluate_accuracy(model, eval_set);
    }
    row.wall_ms = wall_ms();
    result.history.push_back(row);
  }

  const double elapsed_s = wall_ms() / 1000.0;
  result.final_loss = evaluate_loss(model, eval_set);
  result.final_accuracy = evaluate_accuracy(model, eval_set);
  result.steps_per_sec = elapsed_s > 0 ? static_cast<double>(opts.steps) / elapsed_s : 0.0;
  return result;
}

inline void write_metrics_csv(const std::vector<MetricsRow>& history, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open metrics CSV for writing: " + path);
  os << "step,loss,token_accuracy,wall_ms\n";
  char buf[64];
  for (const auto& row : history) {
    os << row.step << ",";
    std::snprintf(buf, sizeof(buf), "%.9g", row.loss);
    os << buf << ",";
    if (row.token_accuracy) {
      std::snprintf(buf, sizeof(buf), "%.6f", *row.token_accuracy);
      os << buf;
    }
    std::snprintf(buf, sizeof(buf), "%.3f", row.wall_ms);
    os << "," << buf << "\n";
  }
  if (!os) throw IoError("metrics CSV write failed: " + path);
}

}  // namespace lcap
