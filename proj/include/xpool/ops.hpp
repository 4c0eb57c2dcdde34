#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>

#include "xpool/errors.hpp"
#include "xpool/matrix.hpp"

namespace xpool {

/// Record/consume bookkeeping shared by every primitive's cache. A backward
/// call consumes the cache; a second backward without a fresh forward throws.
class TapeSlot {
 public:
  bool recorded() const noexcept { return recorded_; }

  void record() noexcept { recorded_ = true; }

  void consume(const char* op) {
    if (!recorded_) {
      throw StateError(std::string(op) + ": backward called without a matching forward (tape empty or consumed)");
    }
    recorded_ = false;
  }

 private:
  bool recorded_ = false;
};

template <typename T>
struct LayerNormParams {
  Matrix<T> gain;  // 1 x D
  Matrix<T> bias;  // 1 x D
  T epsilon = T(1e-5);

  static LayerNormParams unit(std::size_t dim) { return {Matrix<T>(1, dim, T{1}), Matrix<T>(1, dim), T(1e-5)}; }

  std::size_t dim() const noexcept { return gain.cols(); }

  void validate() const {
    if (gain.rows() != 1 || !gain.same_shape(bias)) {
      throw ShapeError("LayerNormParams", gain.rows(), gain.cols(), bias.rows(), bias.cols());
    }
    if (!(epsilon > T{0})) throw ParameterError("LayerNormParams: epsilon must be positive");
  }
};

template <typename T>
class LayerNormTape : public TapeSlot {
 public:
  Matrix<T> normalized;       // (x - mean) * inv_std
  std::vector<T> inv_std;     // per row
};

template <typename T>
struct LayerNormGrads {
  Matrix<T> input;
  Matrix<T> gain;
  Matrix<T> bias;
};

/// Per-row normalization with population variance, then gain and bias.
template <typename T>
Matrix<T> layer_norm_forward(const Matrix<T>& x, const LayerNormParams<T>& p, LayerNormTape<T>& tape) {
  if (x.cols() != p.dim()) throw ShapeError("layer_norm", x.rows(), x.cols(), p.gain.rows(), p.gain.cols());
  const std::size_t n = x.cols();
  Matrix<T> out(x.rows(), n);
  tape.normalized = Matrix<T>(x.rows(), n);
  tape.inv_std.assign(x.rows(), T{0});
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    T mean{0};
    for (T v : row) mean += v;
    mean /= static_cast<T>(n);
    T var{0};
    for (T v : row) var += (v - mean) * (v - mean);
    var /= static_cast<T>(n);
    const T inv_std = T{1} / std::sqrt(var + p.epsilon);
    tape.inv_std[r] = inv_std;
    for (std::size_t c = 0; c < n; ++c) {
      const T xhat = (row[c] - mean) * inv_std;
      tape.normalized(r, c) = xhat;
      out(r, c) = p.gain[c] * xhat + p.bias[c];
    }
  }
  tape.record();
  return out;
}

template <typename T>
LayerNormGrads<T> layer_norm_backward(LayerNormTape<T>& tape, const LayerNormParams<T>& p, const Matrix<T>& upstream) {
  tape.consume("layer_norm_backward");
  const Matrix<T>& xhat = tape.normalized;
  if (!upstream.same_shape(xhat)) {
    throw ShapeError("layer_norm_backward", upstream.rows(), upstream.cols(), xhat.rows(), xhat.cols());
  }
  const std::size_t n = xhat.cols();
  LayerNormGrads<T> g{Matrix<T>(xhat.rows(), n), Matrix<T>(1, n), Matrix<T>(1, n)};
  std::vector<T> dxhat(n);
  for (std::size_t r = 0; r < xhat.rows(); ++r) {
    T sum_dxhat{0};
    T sum_dxhat_xhat{0};
    for (std::size_t c = 0; c < n; ++c) {
      const T dy = upstream(r, c);
      g.gain[c] += dy * xhat(r, c);
      g.bias[c] += dy;
      dxhat[c] = dy * p.gain[c];
      sum_dxhat += dxhat[c];
      sum_dxhat_xhat += dxhat[c] * xhat(r, c);
    }
    const T scale = tape.inv_std[r] / static_cast<T>(n);
    for (std::size_t c = 0; c < n; ++c) {
      g.input(r, c) = scale * (static_cast<T>(n) * dxhat[c] - sum_dxhat - xhat(r, c) * sum_dxhat_xhat);
    }
  }
  return g;
}

template <typename T>
class SoftmaxTape : public TapeSlot {
 public:
  Matrix<T> probs;
};

/// Row-wise softmax with max subtraction.
template <typename T>
Matrix<T> softmax_rows_forward(const Matrix<T>& x, SoftmaxTape<T>& tape) {
  if (x.empty()) throw ShapeError("softmax: empty input");
  Matrix<T> out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    T mx = row[0];
    for (T v : row) mx = std::max(mx, v);
    T total{0};
    for (std::size_t c = 0; c < x.cols(); ++c) {
      out(r, c) = std::exp(row[c] - mx);
      total += out(r, c);
    }
    for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) /= total;
  }
  tape.probs = out;
  tape.record();
  return out;
}

template <typename T>
Matrix<T> softmax_rows_backward(SoftmaxTape<T>& tape, const Matrix<T>& upstream) {
  tape.consume("softmax_backward");
  const Matrix<T>& y = tape.probs;
  if (!upstream.same_shape(y)) throw ShapeError("softmax_backward", upstream.rows(), upstream.cols(), y.rows(), y.cols());
  Matrix<T> dx(y.rows(), y.cols());
  for (std::size_t r = 0; r < y.rows(); ++r) {
    T inner{0};
    for (std::size_t c = 0; c < y.cols(); ++c) inner += upstream(r, c) * y(r, c);
    for (std::size_t c = 0; c < y.cols(); ++c) dx(r, c) = y(r, c) * (upstream(r, c) - inner);
  }
  return dx;
}

template <typename T>
class DropoutTape : public TapeSlot {
 public:
  Matrix<T> mask;  // empty when the forward was an identity
};

/// Inverted dropout: survivors are scaled by 1/(1-rate) so eval mode is the identity.
template <typename T>
Matrix<T> dropout_forward(const Matrix<T>& x, double rate, bool training, std::uint64_t seed, DropoutTape<T>& tape) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ParameterError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  tape.mask = Matrix<T>();
  if (!training || rate == 0.0) {
    tape.record();
    return x;
  }
  std::mt19937_64 gen(seed);
  std::bernoulli_distribution drop(rate);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  tape.mask = Matrix<T>(x.rows(), x.cols());
  Matrix<T> out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    tape.mask[i] = drop(gen) ? T{0} : keep_scale;
    out[i] = x[i] * tape.mask[i];
  }
  tape.record();
  return out;
}

template <typename T>
Matrix<T> dropout_backward(DropoutTape<T>& tape, const Matrix<T>& upstream) {
  tape.consume("dropout_backward");
  if (tape.mask.empty()) return upstream;
  if (!upstream.same_shape(tape.mask)) {
    throw ShapeError("dropout_backward", upstream.rows(), upstream.cols(), tape.mask.rows(), tape.mask.cols());
  }
  Matrix<T> dx(upstream.rows(), upstream.cols());
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = upstream[i] * tape.mask[i];
  return dx;
}

/// y = x W + b, with W in (in x out) and b a 1 x out row broadcast over rows.
template <typename T>
struct Linear {
  Matrix<T> weight;
  Matrix<T> bias;

  static Linear identity(std::size_t n) { return {Matrix<T>::identity(n), Matrix<T>(1, n)}; }
  static Linear zeros(std::size_t in, std::size_t out) { return {Matrix<T>(in, out), Matrix<T>(1, out)}; }

  std::size_t in_dim() const noexcept { return weight.rows(); }
  std::size_t out_dim() const noexcept { return weight.cols(); }
};

template <typename T>
class LinearTape : public TapeSlot {
 public:
  Matrix<T> input;
};

template <typename T>
struct LinearGrads {
  Matrix<T> input;
  Matrix<T> weight;
  Matrix<T> bias;
};

template <typename T>
Matrix<T> linear_forward(const Matrix<T>& x, const Linear<T>& layer, LinearTape<T>& tape) {
  if (layer.bias.rows() != 1 || layer.bias.cols() != layer.out_dim()) {
    throw ShapeError("linear: bias", layer.bias.rows(), layer.bias.cols(), 1, layer.out_dim());
  }
  Matrix<T> y = matmul(x, layer.weight);
  for (std::size_t r = 0; r < y.rows(); ++r)
    for (std::size_t c = 0; c < y.cols(); ++c) y(r, c) += layer.bias[c];
  tape.input = x;
  tape.record();
  return y;
}

template <typename T>
LinearGrads<T> linear_backward(LinearTape<T>& tape, const Linear<T>& layer, const Matrix<T>& upstream) {
  tape.consume("linear_backward");
  if (upstream.rows() != tape.input.rows() || upstream.cols() != layer.out_dim()) {
    throw ShapeError("linear_backward", upstream.rows(), upstream.cols(), tape.input.rows(), layer.out_dim());
  }
  return {matmul_nt(upstream, layer.weight), matmul_tn(tape.input, upstream), column_sums(upstream)};
}

}  // namespace xpool
