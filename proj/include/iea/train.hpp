#pragma once

// SGD with momentum and weight decay, the step learning-rate schedule, the
// training loop and its per-epoch metrics.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "iea/data.hpp"
#include "iea/model.hpp"

namespace iea {

struct SgdConfig {
  double lr0 = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double lr_drop_factor = 10.0;
  std::size_t lr_drop_every = 100;
  std::size_t total_epochs = 350;
  std::size_t batch_size = 128;

  void validate() const {
    if (!(lr0 >= 0.0) || !std::isfinite(lr0)) throw ConfigError("lr must be a finite non-negative number");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw ConfigError("weight_decay must be non-negative");
    if (!(lr_drop_factor > 1.0)) throw ConfigError("lr_drop_factor must be greater than 1");
    if (lr_drop_every == 0) throw ConfigError("lr_drop_every must be positive");
    if (total_epochs == 0) throw ConfigError("epochs must be positive");
    if (batch_size < 2) throw ConfigError("batch_size must be at least 2");
  }
};

// lr0 / factor^floor(epoch / every)
inline double lr_at_epoch(std::size_t epoch, const SgdConfig& cfg) {
  const auto drops = static_cast<double>(epoch / cfg.lr_drop_every);
  return cfg.lr0 / std::pow(cfg.lr_drop_factor, drops);
}

// g' = g + wd * param;  v <- mu * v + g';  param <- param - lr * v
inline void sgd_update(Tensor& param, const Tensor& grad, Tensor& velocity, double lr, double momentum,
                       double weight_decay) {
  require_same_shape(param, grad, "sgd grad");
  require_same_shape(param, velocity, "sgd velocity");
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i] + weight_decay * param[i];
    velocity[i] = momentum * velocity[i] + g;
    param[i] -= lr * velocity[i];
  }
}

struct SgdState {
  std::vector<Tensor> velocity;  // one per parameter, lazily zero-initialized
};

// Weight decay applies only to parameters flagged for it (conv and head
// weights); biases and batchnorm affine parameters are exempt.
inline void sgd_step(std::span<const ParamRef> params, SgdState& state, const SgdConfig& cfg, double lr) {
  if (state.velocity.empty())
    for (const auto& p : params) state.velocity.push_back(Tensor::zeros(p.value->shape()));
  if (state.velocity.size() != params.size()) throw UsageError("optimizer state does not match parameter list");
  for (const auto& p : params)
    if (!p.grad->all_finite()) throw NumericError("non-finite gradient in " + p.name);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    sgd_update(*p.value, *p.grad, state.velocity[i], lr, cfg.momentum, p.weight_decay ? cfg.weight_decay : 0.0);
  }
}

// ---------------------------------------------------------------------------
// Metrics

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_error_pct = 0.0;
  double test_error_pct = 0.0;
  double wall_seconds = 0.0;
};

inline constexpr const char* kMetricsHeader = "epoch,lr,train_loss,train_error_pct,test_error_pct,wall_seconds";

struct RunMetrics {
  std::vector<EpochRecord> epochs;

  // with_wall == false blanks the timing column, for determinism checks.
  std::string to_csv(bool with_wall = true) const {
    std::string out = std::string(kMetricsHeader) + "\n";
    char buf[256];
    for (const auto& r : epochs) {
      std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,", r.epoch, r.lr, r.train_loss, r.train_error_pct,
                    r.test_error_pct);
      out += buf;
      if (with_wall) {
        std::snprintf(buf, sizeof buf, "%.3f", r.wall_seconds);
        out += buf;
      }
      out += '\n';
    }
    return out;
  }

  void write_csv(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path);
    os << to_csv(true);
    if (!os) throw IoError("short write to " + path);
  }

  double final_test_error() const { return epochs.empty() ? 100.0 : epochs.back().test_error_pct; }
};

inline std::string strip_wall_seconds(const std::string& csv) {
  std::string out;
  std::size_t start = 0;
  while (start < csv.size()) {
    std::size_t end = csv.find('\n', start);
    if (end == std::string::npos) end = csv.size();
    const std::string line = csv.substr(start, end - start);
    const auto comma = line.rfind(',');
    out += (comma == std::string::npos ? line : line.substr(0, comma)) + '\n';
    start = end + 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

inline std::size_t argmax_row(const Tensor& t, std::size_t row) {
  const std::size_t K = t.dim(1);
  std::size_t best = 0;
  for (std::size_t k = 1; k < K; ++k)
    if (t[row * K + k] > t[row * K + best]) best = k;
  return best;
}

// Softmax probabilities for every sample, computed in eval mode.
inline Tensor predict_proba(Model& model, const Dataset& data, std::size_t batch_size = 256) {
  const Mode saved = model.mode();
  model.set_mode(Mode::kEval);
  const std::size_t n = data.size(), K = model.config().num_classes;
  Tensor probs({n, K});
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    std::vector<std::size_t> idx(end - start);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    const auto [x, y] = data.gather(idx);
    const Tensor p = softmax(model.forward(x));
    std::copy(p.data().begin(), p.data().end(), probs.raw() + start * K);
  }
  model.set_mode(saved);
  return probs;
}

inline double error_pct(const Tensor& probs, const std::vector<int>& labels) {
  if (probs.dim(0) != labels.size()) throw DimensionError("error_pct: prediction/label count mismatch");
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (argmax_row(probs, i) != static_cast<std::size_t>(labels[i])) ++wrong;
  return 100.0 * static_cast<double>(wrong) / static_cast<double>(labels.size());
}

inline double evaluate_error(Model& model, const Dataset& data) { return error_pct(predict_proba(model, data), data.labels); }

// ---------------------------------------------------------------------------
// Training loop

struct TrainOptions {
  SgdConfig sgd;
  std::uint64_t shuffle_seed = 0;
  // Called after each epoch; may be empty.
  std::function<void(const EpochRecord&)> on_epoch;
};

// Runs sgd.total_epochs epochs of minibatch SGD; test error is measured in
// eval mode after every epoch. Deterministic for fixed seeds.
inline RunMetrics train(Model& model, const Dataset& train_set, const Dataset& test_set, const TrainOptions& opts) {
  opts.sgd.validate();
  train_set.validate();
  test_set.validate();
  if (train_set.size() < 2) throw ConfigError("training set needs at least 2 samples");
  if (train_set.num_classes > model.config().num_classes)
    throw ConfigError("dataset has " + std::to_string(train_set.num_classes) + " classes but the model has " +
                      std::to_string(model.config().num_classes));
  RunMetrics metrics;
  SgdState state;
  const auto params = model.parameters();
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t epoch = 0; epoch < opts.sgd.total_epochs; ++epoch) {
    const double lr = lr_at_epoch(epoch, opts.sgd);
    model.set_mode(Mode::kTrain);
    double loss_sum = 0.0;
    std::size_t wrong = 0;
    const BatchIterator batches(train_set.size(), opts.sgd.batch_size, opts.shuffle_seed, epoch);
    for (const auto& idx : batches) {
      const auto [x, y] = train_set.gather(idx);
      const Tensor logits = model.forward(x);
      const LossResult loss = softmax_cross_entropy(logits, y);
      if (!std::isfinite(loss.loss))
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + ": loss is not finite");
      for (std::size_t i = 0; i < y.size(); ++i)
        if (argmax_row(logits, i) != static_cast<std::size_t>(y[i])) ++wrong;
      loss_sum += loss.loss * static_cast<double>(y.size());
      model.backward(loss.grad_logits);
      sgd_step(params, state, opts.sgd, lr);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(train_set.size());
    rec.train_error_pct = 100.0 * static_cast<double>(wrong) / static_cast<double>(train_set.size());
    rec.test_error_pct = evaluate_error(model, test_set);
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    metrics.epochs.push_back(rec);
    if (opts.on_epoch) opts.on_epoch(rec);
  }
  model.set_mode(Mode::kEval);
  return metrics;
}

}  // namespace iea
