#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "xpool/errors.hpp"
#include "xpool/matrix.hpp"
#include "xpool/objective.hpp"
#include "xpool/ops.hpp"

namespace xpool {

/// Arithmetic mean over the frame rows (text-agnostic pooling).
template <typename T>
Matrix<T> mean_pool(const Matrix<T>& frames) {
  if (frames.rows() == 0) throw InputError("mean_pool: empty frame set");
  std::vector<double> acc(frames.cols(), 0.0);
  for (std::size_t f = 0; f < frames.rows(); ++f)
    for (std::size_t c = 0; c < frames.cols(); ++c) acc[c] += static_cast<double>(frames(f, c));
  Matrix<T> out(1, frames.cols());
  for (std::size_t c = 0; c < frames.cols(); ++c) out[c] = static_cast<T>(acc[c] / static_cast<double>(frames.rows()));
  return out;
}

template <typename T>
struct TopKResult {
  Matrix<T> embedding;               // 1 x D
  std::vector<std::size_t> frames;   // selected indices, ascending
};

/// Per-frame cosine similarity to the text.
template <typename T>
std::vector<T> frame_similarities(const Matrix<T>& frames, std::span<const T> text) {
  if (frames.cols() != text.size()) throw ShapeError("frame_similarities", frames.rows(), frames.cols(), 1, text.size());
  std::vector<T> sims(frames.rows());
  for (std::size_t f = 0; f < frames.rows(); ++f) sims[f] = cosine_sim<T>(text, frames.row(f));
  return sims;
}

/// Mean of the k frames most cosine-similar to the text. The subset objective
/// is a sum of per-frame terms, so picking the k largest terms (ties to the
/// lower index) is its exact argmax.
template <typename T>
TopKResult<T> top_k_pool(const Matrix<T>& frames, std::span<const T> text, std::size_t k) {
  if (frames.rows() == 0) throw InputError("top_k_pool: empty frame set");
  if (k < 1 || k > frames.rows()) {
    throw ParameterError("top_k_pool: k=" + std::to_string(k) + " outside [1, " + std::to_string(frames.rows()) + "]");
  }
  const std::vector<T> sims = frame_similarities(frames, text);
  std::vector<std::size_t> order(frames.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sims[a] > sims[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());

  std::vector<double> acc(frames.cols(), 0.0);
  for (std::size_t f : order)
    for (std::size_t c = 0; c < frames.cols(); ++c) acc[c] += static_cast<double>(frames(f, c));
  Matrix<T> out(1, frames.cols());
  for (std::size_t c = 0; c < frames.cols(); ++c) out[c] = static_cast<T>(acc[c] / static_cast<double>(k));
  return {std::move(out), std::move(order)};
}

/// Learnable parameters of the text-conditioned attention pooling head.
template <typename T>
struct XPoolHead {
  std::size_t dim = 0;       // D
  std::size_t proj_dim = 0;  // D_p
  double dropout_rate = 0.3;

  Linear<T> query;   // D -> D_p
  Linear<T> key;     // D -> D_p
  Linear<T> value;   // D -> D_p
  Linear<T> out;     // D_p -> D
  Linear<T> fc;      // D -> D
  LayerNormParams<T> ln_text;
  LayerNormParams<T> ln_frames;  // shared by the key and value paths
  LayerNormParams<T> ln_attn_out;
  LayerNormParams<T> ln_final;

  /// Visits every parameter tensor as fn(name, tensor, decays). The order is
  /// fixed; optimizers and the checkpoint format rely on it.
  template <typename Fn>
  void for_each_tensor(Fn&& fn) {
    visit(*this, fn);
  }
  template <typename Fn>
  void for_each_tensor(Fn&& fn) const {
    visit(*this, fn);
  }

  XPoolHead zeros_like() const {
    XPoolHead g = *this;
    g.for_each_tensor([](std::string_view, Matrix<T>& m, bool) { m.fill(T{0}); });
    return g;
  }

  template <typename U>
  XPoolHead<U> cast() const {
    XPoolHead<U> h;
    h.dim = dim;
    h.proj_dim = proj_dim;
    h.dropout_rate = dropout_rate;
    auto lin = [](const Linear<T>& l) { return Linear<U>{l.weight.template cast<U>(), l.bias.template cast<U>()}; };
    auto ln = [](const LayerNormParams<T>& p) {
      return LayerNormParams<U>{p.gain.template cast<U>(), p.bias.template cast<U>(), static_cast<U>(p.epsilon)};
    };
    h.query = lin(query);
    h.key = lin(key);
    h.value = lin(value);
    h.out = lin(out);
    h.fc = lin(fc);
    h.ln_text = ln(ln_text);
    h.ln_frames = ln(ln_frames);
    h.ln_attn_out = ln(ln_attn_out);
    h.ln_final = ln(ln_final);
    return h;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_tensor([&](std::string_view, const Matrix<T>& m, bool) { n += m.size(); });
    return n;
  }

  bool all_finite() const {
    bool ok = true;
    for_each_tensor([&](std::string_view, const Matrix<T>& m, bool) { ok = ok && m.all_finite(); });
    return ok;
  }

  void validate() const {
    auto check = [](const char* name, const Matrix<T>& m, std::size_t r, std::size_t c) {
      if (m.rows() != r || m.cols() != c) throw ShapeError(std::string("XPoolHead.") + name, m.rows(), m.cols(), r, c);
    };
    check("w_q", query.weight, dim, proj_dim);
    check("w_k", key.weight, dim, proj_dim);
    check("w_v", value.weight, dim, proj_dim);
    check("w_o", out.weight, proj_dim, dim);
    check("fc_w", fc.weight, dim, dim);
    check("b_q", query.bias, 1, proj_dim);
    check("b_k", key.bias, 1, proj_dim);
    check("b_v", value.bias, 1, proj_dim);
    check("b_o", out.bias, 1, dim);
    check("fc_b", fc.bias, 1, dim);
    for (const auto* p : {&ln_text, &ln_frames, &ln_attn_out, &ln_final}) {
      p->validate();
      check("ln", p->gain, 1, dim);
    }
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ParameterError("XPoolHead: dropout rate outside [0, 1)");
    if (!all_finite()) throw NumericError("XPoolHead: non-finite parameter");
  }

 private:
  template <typename Self, typename Fn>
  static void visit(Self& self, Fn& fn) {
    fn("w_q", self.query.weight, true);
    fn("b_q", self.query.bias, false);
    fn("w_k", self.key.weight, true);
    fn("b_k", self.key.bias, false);
    fn("w_v", self.value.weight, true);
    fn("b_v", self.value.bias, false);
    fn("w_o", self.out.weight, true);
    fn("b_o", self.out.bias, false);
    fn("fc_w", self.fc.weight, true);
    fn("fc_b", self.fc.bias, false);
    fn("ln_text.gain", self.ln_text.gain, false);
    fn("ln_text.bias", self.ln_text.bias, false);
    fn("ln_frames.gain", self.ln_frames.gain, false);
    fn("ln_frames.bias", self.ln_frames.bias, false);
    fn("ln_attn_out.gain", self.ln_attn_out.gain, false);
    fn("ln_attn_out.bias", self.ln_attn_out.bias, false);
    fn("ln_final.gain", self.ln_final.gain, false);
    fn("ln_final.bias", self.ln_final.bias, false);
  }
};

/// Identity projections, zero biases, unit layer norms.
template <typename T>
XPoolHead<T> init_identity(std::size_t dim, std::size_t proj_dim, double dropout_rate, std::uint64_t /*seed*/ = 0) {
  if (dim == 0 || proj_dim != dim) {
    throw ConfigError("init_identity: identity projections need D_p == D (got D=" + std::to_string(dim) +
                      ", D_p=" + std::to_string(proj_dim) + ")");
  }
  XPoolHead<T> h;
  h.dim = dim;
  h.proj_dim = proj_dim;
  h.dropout_rate = static_cast<float>(dropout_rate);  // representable in the f32 checkpoint field
  h.query = Linear<T>::identity(dim);
  h.key = Linear<T>::identity(dim);
  h.value = Linear<T>::identity(dim);
  h.out = Linear<T>::identity(dim);
  h.fc = Linear<T>::identity(dim);
  h.ln_text = LayerNormParams<T>::unit(dim);
  h.ln_frames = LayerNormParams<T>::unit(dim);
  h.ln_attn_out = LayerNormParams<T>::unit(dim);
  h.ln_final = LayerNormParams<T>::unit(dim);
  h.validate();
  return h;
}

/// Gaussian-perturbed head for D_p != D and for gradient probes away from the
/// identity point. Weights ~ N(0, 1/D_in), gains ~ 1 + N(0, scale), biases ~ N(0, scale).
template <typename T>
XPoolHead<T> init_random(std::size_t dim, std::size_t proj_dim, double dropout_rate, std::uint64_t seed, double scale = 0.1) {
  if (dim == 0 || proj_dim == 0) throw ConfigError("init_random: dimensions must be positive");
  XPoolHead<T> h;
  h.dim = dim;
  h.proj_dim = proj_dim;
  h.dropout_rate = static_cast<float>(dropout_rate);  // representable in the f32 checkpoint field
  h.query = Linear<T>::zeros(dim, proj_dim);
  h.key = Linear<T>::zeros(dim, proj_dim);
  h.value = Linear<T>::zeros(dim, proj_dim);
  h.out = Linear<T>::zeros(proj_dim, dim);
  h.fc = Linear<T>::zeros(dim, dim);
  h.ln_text = LayerNormParams<T>::unit(dim);
  h.ln_frames = LayerNormParams<T>::unit(dim);
  h.ln_attn_out = LayerNormParams<T>::unit(dim);
  h.ln_final = LayerNormParams<T>::unit(dim);
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  h.for_each_tensor([&](std::string_view name, Matrix<T>& m, bool is_weight) {
    const bool is_gain = name.ends_with(".gain");
    const double sd = is_weight ? 1.0 / std::sqrt(static_cast<double>(m.rows())) : scale;
    for (auto& v : m.values()) v = static_cast<T>((is_gain ? 1.0 : 0.0) + sd * normal(gen));
  });
  h.validate();
  return h;
}

struct AttentionTrace {
  std::vector<double> weights;          // probability per frame
  std::vector<std::size_t> frame_ids;   // frame index per weight
};

/// Intermediates of one conditioned forward pass.
template <typename T>
struct XPoolTape {
  LayerNormTape<T> ln_text, ln_frames, ln_attn_out, ln_final;
  LinearTape<T> query, key, value, out, fc;
  SoftmaxTape<T> attention;
  DropoutTape<T> dropout;
  Matrix<T> q;        // 1 x D_p
  Matrix<T> k;        // F x D_p
  Matrix<T> v;        // F x D_p
  Matrix<T> probs;    // 1 x F
  T inv_sqrt_dp{0};
};

template <typename T>
struct XPoolOutput {
  Matrix<T> embedding;  // z_{v|t}, 1 x D
  AttentionTrace trace;
};

/// Text-conditioned pooling:
///   Q = LN_text(c_t) W_Q + b_Q,  K = LN_frames(C_v) W_K + b_K,  V = LN_frames(C_v) W_V + b_V
///   a = softmax(Q K^T / sqrt(D_p)),  r = LN_attn_out(a V W_O + b_O)
///   z = LN_final(dropout(FC(r))) + r
template <typename T>
XPoolOutput<T> xpool_forward(const XPoolHead<T>& head, const Matrix<T>& frames, std::span<const T> text, bool training,
                             std::uint64_t seed, XPoolTape<T>& tape) {
  if (text.size() != head.dim) throw ShapeError("xpool_forward: text", 1, text.size(), 1, head.dim);
  if (frames.cols() != head.dim) throw ShapeError("xpool_forward: frames", frames.rows(), frames.cols(), frames.rows(), head.dim);
  if (frames.rows() == 0) throw InputError("xpool_forward: empty frame set");

  const Matrix<T> text_row = Matrix<T>::row_vector(text);
  tape.q = linear_forward(layer_norm_forward(text_row, head.ln_text, tape.ln_text), head.query, tape.query);
  const Matrix<T> frames_norm = layer_norm_forward(frames, head.ln_frames, tape.ln_frames);
  tape.k = linear_forward(frames_norm, head.key, tape.key);
  // The value path reads the same normalized frames; its tape holds its own copy.
  tape.v = linear_forward(frames_norm, head.value, tape.value);

  tape.inv_sqrt_dp = T{1} / std::sqrt(static_cast<T>(head.proj_dim));
  Matrix<T> scores = matmul_nt(tape.q, tape.k);
  scale_inplace(scores, tape.inv_sqrt_dp);
  tape.probs = softmax_rows_forward(scores, tape.attention);
  const Matrix<T> attended = matmul(tape.probs, tape.v);

  const Matrix<T> residual =
      layer_norm_forward(linear_forward(attended, head.out, tape.out), head.ln_attn_out, tape.ln_attn_out);
  const Matrix<T> branch = dropout_forward(linear_forward(residual, head.fc, tape.fc), head.dropout_rate, training, seed, tape.dropout);
  Matrix<T> z = add(layer_norm_forward(branch, head.ln_final, tape.ln_final), residual);
  if (!z.all_finite()) throw NumericError("xpool_forward: non-finite output");

  AttentionTrace trace;
  trace.weights.resize(frames.rows());
  trace.frame_ids.resize(frames.rows());
  for (std::size_t f = 0; f < frames.rows(); ++f) {
    trace.weights[f] = static_cast<double>(tape.probs[f]);
    trace.frame_ids[f] = f;
  }
  return {std::move(z), std::move(trace)};
}

/// Eval-mode forward without keeping intermediates.
template <typename T>
XPoolOutput<T> xpool_forward(const XPoolHead<T>& head, const Matrix<T>& frames, std::span<const T> text) {
  XPoolTape<T> tape;
  return xpool_forward(head, frames, text, false, 0, tape);
}

/// Accumulates d(loss)/d(params) into grads given d(loss)/dz. Consumes the tape.
template <typename T>
void xpool_backward(const XPoolHead<T>& head, XPoolTape<T>& tape, const Matrix<T>& d_z, XPoolHead<T>& grads) {
  if (d_z.rows() != 1 || d_z.cols() != head.dim) throw ShapeError("xpool_backward", d_z.rows(), d_z.cols(), 1, head.dim);

  // z = LN_final(dropout(FC(r))) + r
  const auto ln_final = layer_norm_backward(tape.ln_final, head.ln_final, d_z);
  add_inplace(grads.ln_final.gain, ln_final.gain);
  add_inplace(grads.ln_final.bias, ln_final.bias);
  const auto fc = linear_backward(tape.fc, head.fc, dropout_backward(tape.dropout, ln_final.input));
  add_inplace(grads.fc.weight, fc.weight);
  add_inplace(grads.fc.bias, fc.bias);
  Matrix<T> d_residual = add(d_z, fc.input);

  // r = LN_attn_out(attended W_O + b_O)
  const auto ln_attn = layer_norm_backward(tape.ln_attn_out, head.ln_attn_out, d_residual);
  add_inplace(grads.ln_attn_out.gain, ln_attn.gain);
  add_inplace(grads.ln_attn_out.bias, ln_attn.bias);
  const auto out = linear_backward(tape.out, head.out, ln_attn.input);
  add_inplace(grads.out.weight, out.weight);
  add_inplace(grads.out.bias, out.bias);

  // attended = probs V
  const Matrix<T>& d_attended = out.input;
  const Matrix<T> d_probs = matmul_nt(d_attended, tape.v);
  const Matrix<T> d_v = matmul_tn(tape.probs, d_attended);
  Matrix<T> d_scores = softmax_rows_backward(tape.attention, d_probs);
  scale_inplace(d_scores, tape.inv_sqrt_dp);
  const Matrix<T> d_q = matmul(d_scores, tape.k);
  const Matrix<T> d_k = matmul_tn(d_scores, tape.q);

  const auto key = linear_backward(tape.key, head.key, d_k);
  const auto value = linear_backward(tape.value, head.value, d_v);
  add_inplace(grads.key.weight, key.weight);
  add_inplace(grads.key.bias, key.bias);
  add_inplace(grads.value.weight, value.weight);
  add_inplace(grads.value.bias, value.bias);
  const auto ln_frames = layer_norm_backward(tape.ln_frames, head.ln_frames, add(key.input, value.input));
  add_inplace(grads.ln_frames.gain, ln_frames.gain);
  add_inplace(grads.ln_frames.bias, ln_frames.bias);

  const auto query = linear_backward(tape.query, head.query, d_q);
  add_inplace(grads.query.weight, query.weight);
  add_inplace(grads.query.bias, query.bias);
  const auto ln_text = layer_norm_backward(tape.ln_text, head.ln_text, query.input);
  add_inplace(grads.ln_text.gain, ln_text.gain);
  add_inplace(grads.ln_text.bias, ln_text.bias);
}

template <typename T>
XPoolHead<T> xpool_backward(const XPoolHead<T>& head, XPoolTape<T>& tape, const Matrix<T>& d_z) {
  XPoolHead<T> grads = head.zeros_like();
  xpool_backward(head, tape, d_z, grads);
  return grads;
}

}  // namespace xpool
