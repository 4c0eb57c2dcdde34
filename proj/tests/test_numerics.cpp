#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "xpool.hpp"

using namespace xpool;

namespace {

Matrix<double> random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Matrix<double> m(r, c);
  for (auto& v : m.values()) v = u(gen);
  return m;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const auto m = random_matrix(3, 3, 1);
  EXPECT_EQ(matmul(Matrix<double>::identity(3), m), m);
}

TEST(Matmul, HandCheckedTwoByTwo) {
  const Matrix<double> a(2, 2, {1, 2, 3, 4});
  const Matrix<double> b(2, 1, {0, 1});
  EXPECT_EQ(matmul(a, b), Matrix<double>(2, 1, {2, 4}));
}

TEST(Matmul, MatchesTripleLoop) {
  const auto a = random_matrix(7, 5, 2);
  const auto b = random_matrix(5, 3, 3);
  const auto c = matmul(a, b);
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 5; ++k) s += a(i, k) * b(k, j);
      EXPECT_NEAR(c(i, j), s, 1e-6);
    }
}

TEST(Matmul, TransposedVariantsAgree) {
  const auto a = random_matrix(4, 6, 4);
  const auto b = random_matrix(4, 3, 5);
  const auto c = random_matrix(2, 6, 6);
  EXPECT_LT(max_abs_diff(matmul_tn(a, b), matmul(transpose(a), b)), 1e-12);
  EXPECT_LT(max_abs_diff(matmul_nt(a, c), matmul(a, transpose(c))), 1e-12);
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Matrix<double>(2, 3), Matrix<double>(2, 3)), ShapeError);
  EXPECT_THROW(Matrix<double>(2, 2, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST(LayerNorm, ConstantRowMapsToBias) {
  LayerNormTape<double> tape;
  const auto y = layer_norm_forward(Matrix<double>(1, 4, 5.0), LayerNormParams<double>::unit(4), tape);
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, SymmetricPair) {
  LayerNormTape<double> tape;
  const auto y = layer_norm_forward(Matrix<double>(1, 2, {1, -1}), LayerNormParams<double>::unit(2), tape);
  EXPECT_NEAR(y[0], 1.0, 1e-5);
  EXPECT_NEAR(y[1], -1.0, 1e-5);
}

TEST(LayerNorm, MatchesIndependentMoments) {
  const auto x = random_matrix(4, 8, 7);
  LayerNormParams<double> p{random_matrix(1, 8, 8), random_matrix(1, 8, 9), 1e-5};
  LayerNormTape<double> tape;
  const auto y = layer_norm_forward(x, p, tape);
  double bias_mean = 0;
  for (double b : p.bias.values()) bias_mean += b / 8.0;
  for (std::size_t r = 0; r < 4; ++r) {
    double mean = 0, var = 0;
    for (std::size_t c = 0; c < 8; ++c) mean += x(r, c) / 8.0;
    for (std::size_t c = 0; c < 8; ++c) var += (x(r, c) - mean) * (x(r, c) - mean) / 8.0;
    double normalized_sum = 0, out_mean = 0, gain_weighted = 0;
    for (std::size_t c = 0; c < 8; ++c) {
      const double n = (x(r, c) - mean) / std::sqrt(var + 1e-5);
      EXPECT_NEAR(y(r, c), p.gain[c] * n + p.bias[c], 1e-9);
      normalized_sum += n;
      gain_weighted += p.gain[c] * n / 8.0;
      out_mean += y(r, c) / 8.0;
    }
    EXPECT_NEAR(normalized_sum, 0.0, 1e-9);
    EXPECT_NEAR(out_mean, bias_mean + gain_weighted, 1e-6);
  }
}

TEST(Softmax, EqualValuesAreUniform) {
  SoftmaxTape<double> tape;
  const auto y = softmax_rows_forward(Matrix<double>(1, 3, 2.5), tape);
  for (double v : y.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, ClosedForm) {
  SoftmaxTape<double> tape;
  const auto y = softmax_rows_forward(Matrix<double>(1, 2, {0.0, std::log(3.0)}), tape);
  EXPECT_NEAR(y[0], 0.25, 1e-12);
  EXPECT_NEAR(y[1], 0.75, 1e-12);
}

TEST(Softmax, LargeInputsAreShiftInvariant) {
  SoftmaxTape<float> t1, t2;
  const auto big = softmax_rows_forward(Matrix<float>(1, 2, {1000.0f, 1000.5f}), t1);
  const auto small = softmax_rows_forward(Matrix<float>(1, 2, {0.0f, 0.5f}), t2);
  ASSERT_TRUE(big.all_finite());
  EXPECT_LT(max_abs_diff(big, small), 1e-6f);
}

TEST(Softmax, RowsSumToOne) {
  SoftmaxTape<double> tape;
  const auto y = softmax_rows_forward(random_matrix(5, 7, 10), tape);
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0;
    for (double v : y.row(r)) {
      EXPECT_GT(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Dropout, ZeroRateIsIdentity) {
  const auto x = random_matrix(3, 4, 11);
  DropoutTape<double> tape;
  EXPECT_EQ(dropout_forward(x, 0.0, true, 1, tape), x);
}

TEST(Dropout, EvalModeIsIdentity) {
  const auto x = random_matrix(3, 4, 12);
  DropoutTape<double> tape;
  EXPECT_EQ(dropout_forward(x, 0.7, false, 1, tape), x);
}

TEST(Dropout, ZeroedFractionMatchesRate) {
  const Matrix<float> x(1000, 1000, 1.0f);
  DropoutTape<float> tape;
  const auto y = dropout_forward(x, 0.3, true, 42, tape);
  std::size_t zeros = 0;
  for (float v : y.values()) {
    if (v == 0.0f) ++zeros;
    else EXPECT_FLOAT_EQ(v, 1.0f / 0.7f);
  }
  EXPECT_NEAR(static_cast<double>(zeros) / 1e6, 0.3, 0.01);
}

TEST(Dropout, SameSeedSameMask) {
  const auto x = random_matrix(10, 10, 13);
  DropoutTape<double> a, b;
  EXPECT_EQ(dropout_forward(x, 0.5, true, 99, a), dropout_forward(x, 0.5, true, 99, b));
}

TEST(Dropout, RateOutsideRangeThrows) {
  DropoutTape<double> tape;
  EXPECT_THROW(dropout_forward(Matrix<double>(1, 1, 1.0), 1.0, true, 0, tape), ParameterError);
  EXPECT_THROW(dropout_forward(Matrix<double>(1, 1, 1.0), -0.1, true, 0, tape), ParameterError);
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
  const auto x = random_matrix(3, 4, 14);
  Linear<double> layer{random_matrix(4, 2, 15), random_matrix(1, 2, 16)};
  LinearTape<double> lt;
  linear_forward(x, layer, lt);
  const auto lg = linear_backward(lt, layer, Matrix<double>(3, 2));
  for (const auto* m : {&lg.input, &lg.weight, &lg.bias})
    for (double v : m->values()) EXPECT_EQ(v, 0.0);

  LayerNormParams<double> p = LayerNormParams<double>::unit(4);
  LayerNormTape<double> nt;
  layer_norm_forward(x, p, nt);
  const auto ng = layer_norm_backward(nt, p, Matrix<double>(3, 4));
  for (const auto* m : {&ng.input, &ng.gain, &ng.bias})
    for (double v : m->values()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, IdentityLinearPassesUpstreamThrough) {
  const auto x = random_matrix(2, 5, 17);
  const auto up = random_matrix(2, 5, 18);
  LinearTape<double> tape;
  const auto layer = Linear<double>::identity(5);
  linear_forward(x, layer, tape);
  EXPECT_EQ(linear_backward(tape, layer, up).input, up);
}

TEST(Backward, SecondBackwardWithoutForwardThrows) {
  const auto x = random_matrix(2, 3, 19);
  const auto layer = Linear<double>::identity(3);
  LinearTape<double> tape;
  linear_forward(x, layer, tape);
  linear_backward(tape, layer, x);
  EXPECT_THROW(linear_backward(tape, layer, x), StateError);

  SoftmaxTape<double> st;
  EXPECT_THROW(softmax_rows_backward(st, x), StateError);
}

TEST(GradCheck, LinearPassesTightTolerance) {
  GradCheckConfig cfg;
  cfg.target = GradCheckTarget::Linear;
  EXPECT_TRUE(grad_check(cfg, 1, 1e-6).passed());
}

TEST(GradCheck, EveryPrimitivePasses) {
  for (auto t : {GradCheckTarget::LayerNorm, GradCheckTarget::Softmax, GradCheckTarget::Dropout, GradCheckTarget::Cosine,
                 GradCheckTarget::Loss}) {
    GradCheckConfig cfg;
    cfg.target = t;
    const auto report = grad_check(cfg, 3, 1e-6);
    EXPECT_TRUE(report.passed()) << to_string(t) << " max rel " << report.max_rel_error();
    EXPECT_FALSE(report.skipped());
  }
}

TEST(GradCheck, ZeroVarianceLayerNormIsSkipped) {
  GradCheckConfig cfg;
  cfg.target = GradCheckTarget::LayerNorm;
  cfg.degenerate_input = true;
  const auto report = grad_check(cfg, 1, 1e-6);
  EXPECT_TRUE(report.skipped());
  EXPECT_TRUE(report.passed());
}

TEST(GradCheck, FullHeadWithLossPasses) {
  GradCheckConfig cfg;
  const auto report = grad_check(cfg, 5, 1e-4);
  EXPECT_TRUE(report.passed()) << "max rel " << report.max_rel_error();
  EXPECT_EQ(report.tensors.size(), 19u);
}

TEST(GradCheck, UnknownTargetNameThrows) { EXPECT_THROW(parse_grad_check_target("conv"), ParameterError); }

TEST(Rng, SubStreamsAreIndependentAndStable) {
  EXPECT_EQ(derive_seed(1, "dropout", {3}), derive_seed(1, "dropout", {3}));
  EXPECT_NE(derive_seed(1, "dropout", {3}), derive_seed(1, "shuffle", {3}));
  EXPECT_NE(derive_seed(1, "dropout", {3}), derive_seed(1, "dropout", {4}));
  EXPECT_NE(derive_seed(1, "dropout", {0, 1}), derive_seed(1, "dropout", {1, 0}));
}
