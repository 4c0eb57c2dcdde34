#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "xpool/contrastive.hpp"
#include "xpool/errors.hpp"
#include "xpool/matrix.hpp"
#include "xpool/objective.hpp"
#include "xpool/ops.hpp"
#include "xpool/pooling.hpp"

namespace xpool {

enum class GradCheckTarget { Linear, LayerNorm, Softmax, Dropout, Cosine, Loss, FullHead };

inline std::string to_string(GradCheckTarget t) {
  switch (t) {
    case GradCheckTarget::Linear: return "linear";
    case GradCheckTarget::LayerNorm: return "layer_norm";
    case GradCheckTarget::Softmax: return "softmax";
    case GradCheckTarget::Dropout: return "dropout";
    case GradCheckTarget::Cosine: return "cosine";
    case GradCheckTarget::Loss: return "loss";
    case GradCheckTarget::FullHead: return "full_head";
  }
  return "unknown";
}

inline GradCheckTarget parse_grad_check_target(const std::string& s) {
  for (auto t : {GradCheckTarget::Linear, GradCheckTarget::LayerNorm, GradCheckTarget::Softmax, GradCheckTarget::Dropout,
                 GradCheckTarget::Cosine, GradCheckTarget::Loss, GradCheckTarget::FullHead}) {
    if (to_string(t) == s) return t;
  }
  throw ParameterError("unknown gradcheck target '" + s + "'");
}

struct GradCheckConfig {
  GradCheckTarget target = GradCheckTarget::FullHead;
  std::size_t dim = 8;        // D
  std::size_t proj_dim = 8;   // D_p
  std::size_t frames = 5;     // F
  std::size_t batch = 4;      // B
  double dropout_rate = 0.3;
  double lambda = 10.0;
  double step = 1e-3;         // finite-difference spacing
  bool degenerate_input = false;  // layer norm only: include a zero-variance row
};

enum class CheckStatus { Pass, Fail, Skipped };

struct TensorCheck {
  std::string name;
  std::size_t entries = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  CheckStatus status = CheckStatus::Pass;
  std::string note;
};

struct GradCheckReport {
  GradCheckTarget target{};
  double tolerance = 0.0;
  std::vector<TensorCheck> tensors;

  bool passed() const {
    return std::none_of(tensors.begin(), tensors.end(), [](const TensorCheck& t) { return t.status == CheckStatus::Fail; });
  }
  bool skipped() const {
    return !tensors.empty() &&
           std::all_of(tensors.begin(), tensors.end(), [](const TensorCheck& t) { return t.status == CheckStatus::Skipped; });
  }
  double max_rel_error() const {
    double worst = 0.0;
    for (const auto& t : tensors) worst = std::max(worst, t.max_rel_error);
    return worst;
  }
};

namespace detail {

// Gradients smaller than this are compared absolutely; below it a relative
// error only measures cancellation noise in the finite difference.
inline constexpr double kGradFloor = 1e-6;

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kGradFloor});
}

/// Finite differences of loss() over every entry of `param`, compared with `analytic`.
inline TensorCheck probe_tensor(const std::string& name, std::span<double> param, std::span<const double> analytic,
                                double h, double tolerance, const std::function<double()>& loss) {
  TensorCheck check{name, param.size(), 0.0, 0.0, CheckStatus::Pass, {}};
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double saved = param[i];
    // Five-point stencil: truncation error O(h^4).
    double f[4];
    const double offsets[4] = {2.0 * h, h, -h, -2.0 * h};
    for (int k = 0; k < 4; ++k) {
      param[i] = saved + offsets[k];
      f[k] = loss();
    }
    param[i] = saved;
    if (!std::all_of(f, f + 4, [](double v) { return std::isfinite(v); })) {
      throw NumericError("grad_check: non-finite loss while probing " + name + "[" + std::to_string(i) + "]");
    }
    const double numeric = (-f[0] + 8.0 * f[1] - 8.0 * f[2] + f[3]) / (12.0 * h);
    check.max_abs_error = std::max(check.max_abs_error, std::abs(analytic[i] - numeric));
    check.max_rel_error = std::max(check.max_rel_error, relative_error(analytic[i], numeric));
  }
  check.status = check.max_rel_error < tolerance ? CheckStatus::Pass : CheckStatus::Fail;
  return check;
}

inline Matrix<double> random_matrix(std::size_t r, std::size_t c, std::mt19937_64& gen, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix<double> m(r, c);
  for (auto& v : m.values()) v = u(gen);
  return m;
}

inline double weighted_sum(const Matrix<double>& y, const Matrix<double>& w) {
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) acc += y[i] * w[i];
  return acc;
}

}  // namespace detail

/// Compares analytic gradients with finite differences in 64-bit.
/// Primitive targets are reduced to a scalar through a fixed random weighting
/// of their output; loss targets are scalar already.
inline GradCheckReport grad_check(const GradCheckConfig& cfg, std::uint64_t seed, double tolerance) {
  using detail::probe_tensor;
  using detail::random_matrix;
  using detail::weighted_sum;
  std::mt19937_64 gen(seed);
  GradCheckReport report{cfg.target, tolerance, {}};
  const double h = cfg.step;

  switch (cfg.target) {
    case GradCheckTarget::Linear: {
      Matrix<double> x = random_matrix(3, cfg.dim, gen);
      Linear<double> layer{random_matrix(cfg.dim, cfg.proj_dim, gen), random_matrix(1, cfg.proj_dim, gen)};
      const Matrix<double> probe = random_matrix(3, cfg.proj_dim, gen);
      auto loss = [&] {
        LinearTape<double> t;
        return weighted_sum(linear_forward(x, layer, t), probe);
      };
      LinearTape<double> tape;
      linear_forward(x, layer, tape);
      const auto g = linear_backward(tape, layer, probe);
      report.tensors.push_back(probe_tensor("input", x.values(), g.input.values(), h, tolerance, loss));
      report.tensors.push_back(probe_tensor("weight", layer.weight.values(), g.weight.values(), h, tolerance, loss));
      report.tensors.push_back(probe_tensor("bias", layer.bias.values(), g.bias.values(), h, tolerance, loss));
      break;
    }
    case GradCheckTarget::LayerNorm: {
      Matrix<double> x = random_matrix(4, cfg.dim, gen);
      if (cfg.degenerate_input) {
        for (auto& v : x.row(0)) v = 5.0;
      }
      LayerNormParams<double> p{random_matrix(1, cfg.dim, gen, 0.5, 1.5), random_matrix(1, cfg.dim, gen), 1e-5};
      for (std::size_t r = 0; r < x.rows(); ++r) {
        double mean = 0.0;
        for (double v : x.row(r)) mean += v;
        mean /= static_cast<double>(x.cols());
        double var = 0.0;
        for (double v : x.row(r)) var += (v - mean) * (v - mean);
        var /= static_cast<double>(x.cols());
        if (var <= p.epsilon) {
          for (const char* name : {"input", "gain", "bias"}) {
            report.tensors.push_back({name, 0, 0.0, 0.0, CheckStatus::Skipped,
                                      "row " + std::to_string(r) + " has zero variance (non-differentiable point)"});
          }
          return report;
        }
      }
      const Matrix<double> probe = random_matrix(x.rows(), x.cols(), gen);
      auto loss = [&] {
        LayerNormTape<double> t;
        return weighted_sum(layer_norm_forward(x, p, t), probe);
      };
      LayerNormTape<double> tape;
      layer_norm_forward(x, p, tape);
      const auto g = layer_norm_backward(tape, p, probe);
      report.tensors.push_back(probe_tensor("input", x.values(), g.input.values(), h, tolerance, loss));
      report.tensors.push_back(probe_tensor("gain", p.gain.values(), g.gain.values(), h, tolerance, loss));
      report.tensors.push_back(probe_tensor("bias", p.bias.values(), g.bias.values(), h, tolerance, loss));
      break;
    }
    case GradCheckTarget::Softmax: {
      Matrix<double> x = random_matrix(3, cfg.frames, gen);
      const Matrix<double> probe = random_matrix(x.rows(), x.cols(), gen);
      auto loss = [&] {
        SoftmaxTape<double> t;
        return weighted_sum(softmax_rows_forward(x, t), probe);
      };
      SoftmaxTape<double> tape;
      softmax_rows_forward(x, tape);
      const auto g = softmax_rows_backward(tape, probe);
      report.tensors.push_back(probe_tensor("input", x.values(), g.values(), h, tolerance, loss));
      break;
    }
    case GradCheckTarget::Dropout: {
      Matrix<double> x = random_matrix(3, cfg.dim, gen);
      const Matrix<double> probe = random_matrix(x.rows(), x.cols(), gen);
      const std::uint64_t mask_seed = gen();
      auto loss = [&] {
        DropoutTape<double> t;
        return weighted_sum(dropout_forward(x, cfg.dropout_rate, true, mask_seed, t), probe);
      };
      DropoutTape<double> tape;
      dropout_forward(x, cfg.dropout_rate, true, mask_seed, tape);
      const auto g = dropout_backward(tape, probe);
      report.tensors.push_back(probe_tensor("input", x.values(), g.values(), h, tolerance, loss));
      break;
    }
    case GradCheckTarget::Cosine: {
      const Matrix<double> a = random_matrix(1, cfg.dim, gen);
      Matrix<double> b = random_matrix(1, cfg.dim, gen);
      auto loss = [&] { return cosine_sim<double>(a.values(), std::span<const double>(b.values())); };
      const auto g = cosine_sim_grad_b<double>(a.values(), std::span<const double>(b.values()));
      report.tensors.push_back(probe_tensor("b", b.values(), g, h, tolerance, loss));
      break;
    }
    case GradCheckTarget::Loss: {
      SimilarityMatrix<double> sims{random_matrix(cfg.batch, cfg.batch, gen, -1.0, 1.0)};
      auto scale = LogitScale<double>::from_lambda(cfg.lambda);
      auto loss = [&] {
        LossTape<double> t;
        return symmetric_ce_loss(sims, scale, t);
      };
      LossTape<double> tape;
      symmetric_ce_loss(sims, scale, tape);
      const auto g = symmetric_ce_loss_backward(tape);
      report.tensors.push_back(probe_tensor("sims", sims.values.values(), g.sims.values(), h, tolerance, loss));
      std::span<double> log_lambda(&scale.log_lambda, 1);
      report.tensors.push_back(probe_tensor("log_lambda", log_lambda, std::span<const double>(&g.log_lambda, 1), h, tolerance, loss));
      break;
    }
    case GradCheckTarget::FullHead: {
      XPoolHead<double> head = init_random<double>(cfg.dim, cfg.proj_dim, cfg.dropout_rate, gen());
      auto scale = LogitScale<double>::from_lambda(cfg.lambda);
      const Matrix<double> texts = random_matrix(cfg.batch, cfg.dim, gen);
      std::vector<Matrix<double>> videos;
      for (std::size_t j = 0; j < cfg.batch; ++j) videos.push_back(random_matrix(cfg.frames, cfg.dim, gen));
      std::vector<const Matrix<double>*> video_ptrs;
      for (const auto& v : videos) video_ptrs.push_back(&v);
      const std::uint64_t dropout_seed = gen();
      auto loss = [&] { return contrastive_batch(head, scale, texts, video_ptrs, true, dropout_seed, false).loss; };
      const auto outcome = contrastive_batch(head, scale, texts, video_ptrs, true, dropout_seed, true);

      std::vector<std::pair<std::string, const Matrix<double>*>> grads;
      outcome.grads.for_each_tensor([&](std::string_view name, const Matrix<double>& m, bool) { grads.emplace_back(std::string(name), &m); });
      std::size_t idx = 0;
      head.for_each_tensor([&](std::string_view name, Matrix<double>& m, bool) {
        report.tensors.push_back(probe_tensor(std::string(name), m.values(), grads[idx++].second->values(), h, tolerance, loss));
      });
      std::span<double> log_lambda(&scale.log_lambda, 1);
      report.tensors.push_back(
          probe_tensor("log_lambda", log_lambda, std::span<const double>(&outcome.d_log_lambda, 1), h, tolerance, loss));
      break;
    }
  }
  return report;
}

}  // namespace xpool
