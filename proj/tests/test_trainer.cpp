#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "xpool.hpp"

using namespace xpool;

namespace {

std::vector<double> plain_ln(const std::vector<double>& x) {
  const double n = static_cast<double>(x.size());
  double mean = 0, var = 0;
  for (double v : x) mean += v / n;
  for (double v : x) var += (v - mean) * (v - mean) / n;
  std::vector<double> y;
  for (double v : x) y.push_back((v - mean) / std::sqrt(var + 1e-5));
  return y;
}

// Identity-head pooling without dropout: z = LN(r) + r, r = LN(sum_f a_f LN(c_f)).
std::vector<double> identity_pool(const Matrix<float>& frames, std::span<const float> text) {
  const std::size_t d = text.size();
  const auto q = plain_ln(std::vector<double>(text.begin(), text.end()));
  std::vector<std::vector<double>> kv;
  std::vector<double> scores;
  for (std::size_t f = 0; f < frames.rows(); ++f) {
    kv.push_back(plain_ln(std::vector<double>(frames.row(f).begin(), frames.row(f).end())));
    double s = 0;
    for (std::size_t c = 0; c < d; ++c) s += q[c] * kv.back()[c];
    scores.push_back(s / std::sqrt(double(d)));
  }
  double mx = scores[0];
  for (double s : scores) mx = std::max(mx, s);
  double total = 0;
  for (double s : scores) total += std::exp(s - mx);
  std::vector<double> pooled(d, 0.0);
  for (std::size_t f = 0; f < kv.size(); ++f)
    for (std::size_t c = 0; c < d; ++c) pooled[c] += std::exp(scores[f] - mx) / total * kv[f][c];
  const auto r = plain_ln(pooled);
  const auto fin = plain_ln(r);
  std::vector<double> z(d);
  for (std::size_t c = 0; c < d; ++c) z[c] = fin[c] + r[c];
  return z;
}

RetrievalCorpus small_corpus(std::size_t pairs, std::size_t dim, std::uint64_t seed) {
  PlantedCorpusConfig cfg;
  cfg.pairs = pairs;
  cfg.dim = dim;
  cfg.seed = seed;
  cfg.distractor_segments = 2;
  cfg.segment_frames = 2;
  return make_planted_corpus(cfg);
}

std::vector<char> checkpoint_bytes(const TrainResult& r) { return encode_checkpoint(r.best_head, r.best_scale); }

}  // namespace

TEST(CosineLr, Endpoints) {
  EXPECT_EQ(cosine_lr(0, 100, 0.5), 0.5);
  EXPECT_NEAR(cosine_lr(100, 100, 0.5), 0.0, 1e-15);
  EXPECT_NEAR(cosine_lr(50, 100, 0.5), 0.25, 1e-9);
  EXPECT_THROW(cosine_lr(101, 100, 0.5), ParameterError);
}

TEST(AdamW, ZeroGradientNoDecayLeavesParams) {
  Matrix<float> w(2, 2, {1, 2, 3, 4}), g(2, 2);
  const auto before = w;
  std::vector<ParamSlot<float>> slots{{&w, &g, true}};
  OptimizerState<float> state;
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  for (int i = 0; i < 3; ++i) adamw_step(std::span<const ParamSlot<float>>(slots), state, 0.1, cfg);
  EXPECT_EQ(w, before);
}

TEST(AdamW, PureDecayScalesOnlyDecayedSlots) {
  Matrix<double> w(1, 3, {1.0, -2.0, 0.5}), b(1, 3, {0.3, 0.3, 0.3}), gw(1, 3), gb(1, 3);
  std::vector<ParamSlot<double>> slots{{&w, &gw, true}, {&b, &gb, false}};
  OptimizerState<double> state;
  AdamWConfig cfg;
  const double lr = 0.1;
  for (int i = 0; i < 4; ++i) adamw_step(std::span<const ParamSlot<double>>(slots), state, lr, cfg);
  const double factor = std::pow(1.0 - lr * cfg.weight_decay, 4);
  EXPECT_NEAR(w[0], 1.0 * factor, 1e-15);
  EXPECT_NEAR(w[1], -2.0 * factor, 1e-15);
  EXPECT_EQ(b, Matrix<double>(1, 3, 0.3));
}

TEST(AdamW, ScalarMatchesHandSteppedOracle) {
  Matrix<double> w(1, 1, 1.0), g(1, 1, 0.5);
  std::vector<ParamSlot<double>> slots{{&w, &g, true}};
  OptimizerState<double> state;
  AdamWConfig cfg;
  const double lr = 0.01;
  double p = 1.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 3; ++t) {
    adamw_step(std::span<const ParamSlot<double>>(slots), state, lr, cfg);
    p = p - lr * 0.2 * p;
    m = 0.9 * m + 0.1 * 0.5;
    v = 0.98 * v + 0.02 * 0.25;
    const double mh = m / (1.0 - std::pow(0.9, t));
    const double vh = v / (1.0 - std::pow(0.98, t));
    p = p - lr * mh / (std::sqrt(vh) + 1e-6);
  }
  EXPECT_NEAR(w[0], p, 1e-10);
}

TEST(TrainConfig, RejectsBadValues) {
  TrainConfig cfg;
  cfg.batch_size = 1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.lr_head = -1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.dropout_rate = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Train, TooFewPairsThrows) {
  TrainConfig cfg;
  cfg.batch_size = 16;
  EXPECT_THROW(train(small_corpus(8, 8, 1), cfg), InputError);
}

TEST(Train, ZeroLearningRateKeepsParametersBitIdentical) {
  const auto corpus = small_corpus(16, 8, 2);
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.epochs = 2;
  cfg.lr_head = 0.0;
  cfg.frames_per_video = 0;
  const auto initial = init_random<float>(8, 8, 0.3, 5);
  const auto result = train(corpus, cfg, nullptr, initial);
  EXPECT_EQ(encode_checkpoint(result.head, result.scale), encode_checkpoint(initial, LogitScale<float>{}));
}

TEST(Train, StepZeroLossMatchesZeroShotOracle) {
  const auto corpus = small_corpus(4, 8, 3);
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.epochs = 1;
  cfg.dropout_rate = 0.0;
  cfg.initial_lambda = 10.0;
  cfg.frames_per_video = 0;
  const auto result = train(corpus, cfg);

  // The single batch holds every pair; the loss is invariant to their order.
  const std::size_t b = 4;
  std::vector<std::vector<double>> sims(b, std::vector<double>(b));
  for (std::size_t i = 0; i < b; ++i) {
    const auto text = corpus.text(corpus.pairs()[i].text_id).row(0);
    for (std::size_t j = 0; j < b; ++j) {
      const auto z = identity_pool(corpus.video(corpus.pairs()[j].video_id), text);
      double ab = 0, aa = 0, bb = 0;
      for (std::size_t c = 0; c < z.size(); ++c) {
        ab += text[c] * z[c];
        aa += double(text[c]) * text[c];
        bb += z[c] * z[c];
      }
      sims[i][j] = ab / std::sqrt(aa * bb);
    }
  }
  const double lambda = 10.0;
  double loss = 0;
  for (std::size_t i = 0; i < b; ++i) {
    double row = 0, col = 0;
    for (std::size_t j = 0; j < b; ++j) {
      row += std::exp(lambda * sims[i][j]);
      col += std::exp(lambda * sims[j][i]);
    }
    loss += 2.0 * std::log(1.0) - 2.0 * lambda * sims[i][i] + std::log(row) + std::log(col);
  }
  loss /= double(b);
  ASSERT_FALSE(result.log.empty());
  EXPECT_NEAR(result.log.front().loss, loss, 1e-5);
}

TEST(Train, LossDecreasesOnPlantedCorpus) {
  const auto corpus = small_corpus(32, 16, 4);
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.epochs = 8;
  cfg.lr_head = 1e-2;
  cfg.initial_lambda = 5.0;
  cfg.frames_per_video = 0;
  const auto result = train(corpus, cfg);
  EXPECT_LT(result.epochs.back().mean_loss, result.epochs.front().mean_loss);
  EXPECT_LT(result.log.back().loss, result.log.front().loss);
}

TEST(Train, ReachesHighRecallOnPlantedCorpus) {
  PlantedCorpusConfig pc;
  pc.seed = 11;
  const auto corpus = make_planted_corpus(pc);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.frames_per_video = 0;
  const auto result = train(corpus, cfg);
  ASSERT_TRUE(result.best_r1.has_value());
  EXPECT_GE(*result.best_r1, 0.95);
}

TEST(Train, IdenticalRunsGiveIdenticalCheckpoints) {
  const auto corpus = small_corpus(16, 8, 5);
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.epochs = 2;
  cfg.lr_head = 1e-3;
  cfg.seed = 77;
  cfg.frames_per_video = 0;
  EXPECT_EQ(checkpoint_bytes(train(corpus, cfg)), checkpoint_bytes(train(corpus, cfg)));
  auto threaded = cfg;
  threaded.threads = 4;
  EXPECT_EQ(checkpoint_bytes(train(corpus, cfg)), checkpoint_bytes(train(corpus, threaded)));
  auto other_seed = cfg;
  other_seed.seed = 78;
  EXPECT_NE(encode_checkpoint(train(corpus, cfg).head, {}), encode_checkpoint(train(corpus, other_seed).head, {}));
}

TEST(Train, PeriodicCheckpointsReachSink) {
  const auto corpus = small_corpus(16, 8, 6);
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.epochs = 2;
  cfg.checkpoint_every = 3;
  cfg.frames_per_video = 0;
  std::vector<std::size_t> steps;
  train(corpus, cfg, nullptr, std::nullopt, [&](std::size_t s, const XPoolHead<float>&, const LogitScale<float>&) { steps.push_back(s); });
  EXPECT_EQ(steps, (std::vector<std::size_t>{3, 6}));
}

TEST(Train, LambdaNeverExceedsCap) {
  const auto corpus = small_corpus(16, 8, 7);
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.epochs = 3;
  cfg.lr_head = 0.05;
  cfg.frames_per_video = 0;
  const auto result = train(corpus, cfg);
  for (const auto& r : result.log) EXPECT_LE(r.lambda, 100.0);
  EXPECT_LE(result.scale.log_lambda, std::log(100.0f));
}

TEST(Checkpoint, ProbeOutputsIdenticalAfterRoundTrip) {
  const auto head = init_random<float>(8, 6, 0.3, 9);
  const auto loaded = decode_checkpoint(encode_checkpoint(head, LogitScale<float>::from_lambda(42.0f)));
  const auto corpus = small_corpus(4, 8, 8);
  for (const auto& p : corpus.pairs()) {
    const auto text = corpus.text(p.text_id).row(0);
    EXPECT_EQ(xpool_forward(head, corpus.video(p.video_id), text).embedding,
              xpool_forward(loaded.head, corpus.video(p.video_id), text).embedding);
  }
}
