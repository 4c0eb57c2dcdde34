#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "xpool/contrastive.hpp"
#include "xpool/corpus.hpp"
#include "xpool/errors.hpp"
#include "xpool/objective.hpp"
#include "xpool/pooling.hpp"
#include "xpool/retrieval.hpp"
#include "xpool/rng.hpp"

namespace xpool {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-6;
  double weight_decay = 0.2;
};

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t epochs = 5;
  double lr_head = 1e-5;
  AdamWConfig adam{};
  double dropout_rate = 0.3;
  std::uint64_t seed = 0;
  std::size_t frames_per_video = 12;  // 0 keeps every frame
  std::size_t checkpoint_every = 0;   // steps; 0 disables periodic checkpoints
  double initial_lambda = 100.0;
  bool validate_each_epoch = true;
  std::size_t threads = 1;

  void validate() const {
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2 for a contrastive batch");
    if (!(lr_head >= 0.0) || !std::isfinite(lr_head)) throw ConfigError("lr_head must be a finite non-negative number");
    if (!(adam.weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
    if (!(adam.eps > 0.0)) throw ConfigError("adam eps must be positive");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout_rate must lie in [0, 1)");
  }
};

/// base_lr * (1 + cos(pi * step / total)) / 2, no warmup.
inline double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr) {
  if (total_steps < 1) throw ParameterError("cosine_lr: total_steps must be >= 1");
  if (step > total_steps) {
    throw ParameterError("cosine_lr: step " + std::to_string(step) + " exceeds total " + std::to_string(total_steps));
  }
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

template <typename T>
struct ParamSlot {
  Matrix<T>* value;
  const Matrix<T>* grad;
  bool decay;
};

template <typename T>
struct OptimizerState {
  std::vector<Matrix<T>> first_moment;
  std::vector<Matrix<T>> second_moment;
  std::uint64_t step = 0;
  double lr = 0.0;
};

/// Adam with decoupled weight decay. Decay (p -= lr * wd * p) applies only to
/// slots flagged `decay`, and is taken from the pre-update value.
template <typename T>
void adamw_step(std::span<const ParamSlot<T>> params, OptimizerState<T>& state, double lr, const AdamWConfig& cfg) {
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.value->rows(), p.value->cols());
      state.second_moment.emplace_back(p.value->rows(), p.value->cols());
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ShapeError("adamw_step: parameter count changed", state.first_moment.size(), 1, params.size(), 1);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    if (!p.value->same_shape(*p.grad) || !p.value->same_shape(state.first_moment[i])) {
      throw ShapeError("adamw_step", p.value->rows(), p.value->cols(), p.grad->rows(), p.grad->cols());
    }
  }
  ++state.step;
  state.lr = lr;
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  const T bias1 = static_cast<T>(1.0 - std::pow(cfg.beta1, static_cast<double>(state.step)));
  const T bias2 = static_cast<T>(1.0 - std::pow(cfg.beta2, static_cast<double>(state.step)));
  const T step_lr = static_cast<T>(lr);
  const T decay = static_cast<T>(lr * cfg.weight_decay);
  const T eps = static_cast<T>(cfg.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix<T>& w = *params[i].value;
    const Matrix<T>& g = *params[i].grad;
    Matrix<T>& m = state.first_moment[i];
    Matrix<T>& v = state.second_moment[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      if (params[i].decay) w[j] -= decay * w[j];
      m[j] = b1 * m[j] + (T{1} - b1) * g[j];
      v[j] = b2 * v[j] + (T{1} - b2) * g[j] * g[j];
      const T m_hat = m[j] / bias1;
      const T v_hat = v[j] / bias2;
      w[j] -= step_lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

struct TrainLogRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double lambda = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  std::optional<double> val_r1;
};

struct TrainResult {
  XPoolHead<float> head;   // after the last step
  LogitScale<float> scale;
  XPoolHead<float> best_head;  // highest validation R@1; the final head when validation is off
  LogitScale<float> best_scale;
  std::optional<double> best_r1;
  std::size_t best_epoch = 0;
  std::vector<TrainLogRecord> log;
  std::vector<EpochRecord> epochs;
  std::size_t total_steps = 0;
};

using CheckpointSink = std::function<void(std::size_t step, const XPoolHead<float>&, const LogitScale<float>&)>;

/// Trains the pooling head and logit scale on frozen embeddings. Each epoch
/// shuffles the pairs with the "shuffle" sub-stream of the seed, drops the
/// last incomplete batch, and takes one AdamW step per batch on a cosine
/// schedule from lr_head to 0. Validation (t2v R@1 with eval-mode pooling)
/// runs on `validation` when given, otherwise on the training corpus.
inline TrainResult train(const RetrievalCorpus& corpus, const TrainConfig& cfg, const RetrievalCorpus* validation = nullptr,
                         std::optional<XPoolHead<float>> initial = std::nullopt, CheckpointSink sink = {}) {
  cfg.validate();
  const std::size_t n = corpus.pairs().size();
  if (n < cfg.batch_size) {
    throw InputError("corpus has " + std::to_string(n) + " pairs, fewer than batch_size " + std::to_string(cfg.batch_size));
  }

  const RetrievalCorpus sampled = subsample_corpus(corpus, cfg.frames_per_video);
  const RetrievalCorpus* val_corpus = validation != nullptr ? validation : &corpus;
  const RetrievalCorpus val_sampled = subsample_corpus(*val_corpus, cfg.frames_per_video);

  TrainResult result;
  result.head = initial ? *initial : init_identity<float>(corpus.dim(), corpus.dim(), cfg.dropout_rate);
  require_head_dim(result.head, corpus.dim());
  result.head.validate();
  result.scale = LogitScale<float>::from_lambda(static_cast<float>(cfg.initial_lambda));
  result.best_head = result.head;
  result.best_scale = result.scale;

  const std::size_t steps_per_epoch = n / cfg.batch_size;
  result.total_steps = steps_per_epoch * cfg.epochs;

  std::vector<ParamSlot<float>> slots;
  XPoolHead<float> grads = result.head.zeros_like();
  Matrix<float> log_lambda(1, 1);
  Matrix<float> log_lambda_grad(1, 1);
  {
    std::vector<Matrix<float>*> values;
    result.head.for_each_tensor([&](std::string_view, Matrix<float>& m, bool) { values.push_back(&m); });
    std::size_t idx = 0;
    grads.for_each_tensor([&](std::string_view, Matrix<float>& g, bool decay) { slots.push_back({values[idx++], &g, decay}); });
    slots.push_back({&log_lambda, &log_lambda_grad, false});
  }
  OptimizerState<float> opt;

  std::vector<std::size_t> order(n);
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, "shuffle", {epoch}));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s, ++step) {
      Matrix<float> texts(cfg.batch_size, corpus.dim());
      std::vector<const Matrix<float>*> videos;
      std::vector<std::size_t> batch_ids;
      for (std::size_t i = 0; i < cfg.batch_size; ++i) {
        const std::size_t pair_idx = order[s * cfg.batch_size + i];
        const auto& p = sampled.pairs()[pair_idx];
        const auto row = sampled.text(p.text_id).row(0);
        std::copy(row.begin(), row.end(), texts.row(i).begin());
        videos.push_back(&sampled.video(p.video_id));
        batch_ids.push_back(pair_idx);
      }

      auto outcome = contrastive_batch(result.head, result.scale, texts, std::span<const Matrix<float>* const>(videos), true,
                                       derive_seed(cfg.seed, "dropout", {step}), true, cfg.threads);
      if (!std::isfinite(outcome.loss) || !outcome.grads.all_finite() || !std::isfinite(outcome.d_log_lambda)) {
        std::ostringstream msg;
        msg << "non-finite loss or gradient at step " << step << " (batch pair indices:";
        for (auto id : batch_ids) msg << ' ' << id;
        msg << ')';
        throw NumericError(msg.str());
      }

      const double lr = cosine_lr(step, std::max<std::size_t>(result.total_steps, 1), cfg.lr_head);
      grads = std::move(outcome.grads);  // slots keep pointing at grads' members
      log_lambda[0] = result.scale.log_lambda;
      log_lambda_grad[0] = outcome.d_log_lambda;
      adamw_step(std::span<const ParamSlot<float>>(slots), opt, lr, cfg.adam);
      result.scale.log_lambda = log_lambda[0];
      result.scale.clamp();

      loss_sum += outcome.loss;
      result.log.push_back({step, epoch, lr, static_cast<double>(outcome.loss), static_cast<double>(result.scale.lambda())});
      if (sink && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) sink(step + 1, result.head, result.scale);
    }

    EpochRecord rec{epoch, steps_per_epoch > 0 ? loss_sum / static_cast<double>(steps_per_epoch) : 0.0, std::nullopt};
    if (cfg.validate_each_epoch && !val_sampled.pairs().empty()) {
      rec.val_r1 = evaluate(result.head, val_sampled, Direction::T2V, cfg.threads).recall(1);
      if (!result.best_r1 || *rec.val_r1 > *result.best_r1) {
        result.best_r1 = rec.val_r1;
        result.best_epoch = epoch;
        result.best_head = result.head;
        result.best_scale = result.scale;
      }
    }
    result.epochs.push_back(rec);
  }
  if (!result.best_r1) {
    result.best_head = result.head;
    result.best_scale = result.scale;
    result.best_epoch = cfg.epochs;
  }
  return result;
}

}  // namespace xpool
