#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <type_traits>
#include <string>
#include <vector>

#include "xpool/errors.hpp"
#include "xpool/matrix.hpp"
#include "xpool/ops.hpp"

namespace xpool {

/// a.b / (|a||b|). Zero-norm inputs have no defined direction and are rejected.
template <typename T>
T cosine_sim(std::type_identity_t<std::span<const T>> a, std::type_identity_t<std::span<const T>> b) {
  const T na = l2_norm(a);
  const T nb = l2_norm(b);
  if (!(na > T{0}) || !(nb > T{0})) throw NumericError("cosine_sim: zero-norm vector");
  const T s = dot(a, b) / (na * nb);
  return std::clamp(s, T{-1}, T{1});
}

/// Gradient of cosine_sim(a, b) with respect to b.
template <typename T>
std::vector<T> cosine_sim_grad_b(std::type_identity_t<std::span<const T>> a, std::type_identity_t<std::span<const T>> b) {
  const T na = l2_norm(a);
  const T nb = l2_norm(b);
  if (!(na > T{0}) || !(nb > T{0})) throw NumericError("cosine_sim: zero-norm vector");
  const T s = dot(a, b) / (na * nb);
  std::vector<T> g(b.size());
  for (std::size_t i = 0; i < b.size(); ++i) g[i] = a[i] / (na * nb) - s * b[i] / (nb * nb);
  return g;
}

/// Learnable logit multiplier, stored in log space and capped at max_lambda.
template <typename T>
struct LogitScale {
  T log_lambda = std::log(T(100));
  T max_lambda = T(100);

  static LogitScale from_lambda(T lambda, T max_lambda = T(100)) {
    if (!(lambda > T{0}) || lambda > max_lambda) {
      throw ParameterError("LogitScale: lambda must lie in (0, " + std::to_string(max_lambda) + "]");
    }
    return {std::log(lambda), max_lambda};
  }

  T lambda() const { return std::min(std::exp(log_lambda), max_lambda); }

  void clamp() { log_lambda = std::min(log_lambda, std::log(max_lambda)); }
};

template <typename T>
struct SimilarityMatrix {
  Matrix<T> values;  // (i, j) = s(t_i, v_j)

  std::size_t batch() const noexcept { return values.rows(); }
};

/// Caches the inputs of batch_similarity for its backward pass.
template <typename T>
class SimilarityTape : public TapeSlot {
 public:
  Matrix<T> texts;
  Matrix<T> conditioned;
};

/// conditioned has B*B rows; row i*B + j holds z_{v_j|t_i}. Entry (i, j) of the
/// result is cos(z_{t_i}, z_{v_j|t_i}).
template <typename T>
SimilarityMatrix<T> batch_similarity(const Matrix<T>& conditioned, const Matrix<T>& texts, SimilarityTape<T>& tape) {
  const std::size_t b = texts.rows();
  if (conditioned.rows() != b * b || conditioned.cols() != texts.cols()) {
    throw ShapeError("batch_similarity", conditioned.rows(), conditioned.cols(), b * b, texts.cols());
  }
  SimilarityMatrix<T> sims{Matrix<T>(b, b)};
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j) sims.values(i, j) = cosine_sim<T>(texts.row(i), conditioned.row(i * b + j));
  tape.texts = texts;
  tape.conditioned = conditioned;
  tape.record();
  return sims;
}

template <typename T>
SimilarityMatrix<T> batch_similarity(const Matrix<T>& conditioned, const Matrix<T>& texts) {
  SimilarityTape<T> tape;
  return batch_similarity(conditioned, texts, tape);
}

/// Gradient with respect to the conditioned embeddings (B*B x D).
template <typename T>
Matrix<T> batch_similarity_backward(SimilarityTape<T>& tape, const Matrix<T>& d_sims) {
  tape.consume("batch_similarity_backward");
  const std::size_t b = tape.texts.rows();
  if (d_sims.rows() != b || d_sims.cols() != b) throw ShapeError("batch_similarity_backward", d_sims.rows(), d_sims.cols(), b, b);
  Matrix<T> dz(b * b, tape.texts.cols());
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      const std::size_t r = i * b + j;
      const auto g = cosine_sim_grad_b<T>(tape.texts.row(i), tape.conditioned.row(r));
      auto out = dz.row(r);
      for (std::size_t c = 0; c < g.size(); ++c) out[c] = d_sims(i, j) * g[c];
    }
  }
  return dz;
}

template <typename T>
class LossTape : public TapeSlot {
 public:
  Matrix<T> sims;
  Matrix<T> row_probs;  // softmax over j of lambda * s(t_i, v_j)
  Matrix<T> col_probs;  // softmax over i of lambda * s(t_i, v_j)
  T lambda{0};
};

template <typename T>
struct LossGrads {
  Matrix<T> sims;
  T log_lambda{0};
};

/// Symmetric cross entropy: L = L_t2v + L_v2t over logits lambda * sims, with
/// the diagonal as positives.
template <typename T>
T symmetric_ce_loss(const SimilarityMatrix<T>& sims, const LogitScale<T>& scale, LossTape<T>& tape) {
  const Matrix<T>& s = sims.values;
  if (s.rows() != s.cols() || s.empty()) throw ShapeError("symmetric_ce_loss: expected square matrix", s.rows(), s.cols(), s.rows(), s.rows());
  const std::size_t b = s.rows();
  const T lambda = scale.lambda();
  tape.sims = s;
  tape.lambda = lambda;
  tape.row_probs = Matrix<T>(b, b);
  tape.col_probs = Matrix<T>(b, b);

  T t2v{0};
  for (std::size_t i = 0; i < b; ++i) {
    T mx = lambda * s(i, 0);
    for (std::size_t j = 1; j < b; ++j) mx = std::max(mx, lambda * s(i, j));
    T total{0};
    for (std::size_t j = 0; j < b; ++j) total += std::exp(lambda * s(i, j) - mx);
    const T lse = mx + std::log(total);
    for (std::size_t j = 0; j < b; ++j) tape.row_probs(i, j) = std::exp(lambda * s(i, j) - lse);
    t2v += lse - lambda * s(i, i);
  }
  T v2t{0};
  for (std::size_t j = 0; j < b; ++j) {
    T mx = lambda * s(0, j);
    for (std::size_t i = 1; i < b; ++i) mx = std::max(mx, lambda * s(i, j));
    T total{0};
    for (std::size_t i = 0; i < b; ++i) total += std::exp(lambda * s(i, j) - mx);
    const T lse = mx + std::log(total);
    for (std::size_t i = 0; i < b; ++i) tape.col_probs(i, j) = std::exp(lambda * s(i, j) - lse);
    v2t += lse - lambda * s(j, j);
  }
  tape.record();
  const T loss = (t2v + v2t) / static_cast<T>(b);
  if (!std::isfinite(loss)) throw NumericError("symmetric_ce_loss: non-finite loss");
  return std::max(loss, T{0});
}

template <typename T>
LossGrads<T> symmetric_ce_loss_backward(LossTape<T>& tape) {
  tape.consume("symmetric_ce_loss_backward");
  const std::size_t b = tape.sims.rows();
  const T inv_b = T{1} / static_cast<T>(b);
  LossGrads<T> g{Matrix<T>(b, b), T{0}};
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      const T target = i == j ? T{1} : T{0};
      const T d_logit = inv_b * (tape.row_probs(i, j) - target) + inv_b * (tape.col_probs(i, j) - target);
      g.sims(i, j) = tape.lambda * d_logit;
      g.log_lambda += tape.lambda * d_logit * tape.sims(i, j);
    }
  }
  return g;
}

}  // namespace xpool
