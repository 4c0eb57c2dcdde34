#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <type_traits>
#include <vector>

#include "xpool/objective.hpp"
#include "xpool/parallel.hpp"
#include "xpool/pooling.hpp"
#include "xpool/rng.hpp"

namespace xpool {

template <typename T>
struct BatchOutcome {
  T loss{0};
  SimilarityMatrix<T> sims;
  XPoolHead<T> grads;  // zero-sized unless gradients were requested
  T d_log_lambda{0};
};

/// One contrastive batch: every text is pooled against every video (B*B
/// conditioned forwards), scored by cosine and reduced by the symmetric loss.
/// Pair (i, j) draws its dropout mask from derive_seed(seed, "dropout", {i, j}).
///
/// Gradients are accumulated per text row and then summed row 0..B-1 on the
/// calling thread, so the result is bit-identical for every thread count.
template <typename T>
BatchOutcome<T> contrastive_batch(const XPoolHead<T>& head, const LogitScale<T>& scale, const Matrix<T>& texts,
                                  std::type_identity_t<std::span<const Matrix<T>* const>> videos, bool training, std::uint64_t seed,
                                  bool with_grads, std::size_t threads = 1) {
  const std::size_t b = texts.rows();
  if (videos.size() != b) throw ShapeError("contrastive_batch: texts vs videos", b, texts.cols(), videos.size(), head.dim);
  if (b == 0) throw InputError("contrastive_batch: empty batch");

  std::vector<XPoolTape<T>> tapes(b * b);
  Matrix<T> conditioned(b * b, head.dim);
  parallel_for(b, threads, [&](std::size_t i) {
    for (std::size_t j = 0; j < b; ++j) {
      const std::size_t r = i * b + j;
      auto out = xpool_forward(head, *videos[j], texts.row(i), training, derive_seed(seed, "dropout", {i, j}), tapes[r]);
      std::copy(out.embedding.values().begin(), out.embedding.values().end(), conditioned.row(r).begin());
    }
  });

  SimilarityTape<T> sim_tape;
  LossTape<T> loss_tape;
  BatchOutcome<T> result;
  result.sims = batch_similarity(conditioned, texts, sim_tape);
  result.loss = symmetric_ce_loss(result.sims, scale, loss_tape);
  if (!with_grads) return result;

  const LossGrads<T> d_loss = symmetric_ce_loss_backward(loss_tape);
  const Matrix<T> d_conditioned = batch_similarity_backward(sim_tape, d_loss.sims);
  result.d_log_lambda = d_loss.log_lambda;
  result.grads = head.zeros_like();

  // Rows are processed in waves of `threads` so memory stays at one gradient
  // buffer per worker while the summation order stays fixed.
  const std::size_t wave = std::max<std::size_t>(1, std::min(threads, b));
  std::vector<XPoolHead<T>> row_grads(wave, head.zeros_like());
  for (std::size_t start = 0; start < b; start += wave) {
    const std::size_t count = std::min(wave, b - start);
    parallel_for(count, threads, [&](std::size_t w) {
      const std::size_t i = start + w;
      XPoolHead<T>& acc = row_grads[w];
      acc.for_each_tensor([](std::string_view, Matrix<T>& m, bool) { m.fill(T{0}); });
      for (std::size_t j = 0; j < b; ++j) {
        const std::size_t r = i * b + j;
        xpool_backward(head, tapes[r], Matrix<T>::row_vector(d_conditioned.row(r)), acc);
      }
    });
    for (std::size_t w = 0; w < count; ++w) {
      std::vector<const Matrix<T>*> src;
      row_grads[w].for_each_tensor([&](std::string_view, const Matrix<T>& m, bool) { src.push_back(&m); });
      std::size_t idx = 0;
      result.grads.for_each_tensor([&](std::string_view, Matrix<T>& m, bool) { add_inplace(m, *src[idx++]); });
    }
  }
  return result;
}

}  // namespace xpool
