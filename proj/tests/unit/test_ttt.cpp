// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "fastmem/error.hpp"
#include "fastmem/ttt.hpp"
#include "test_util.hpp"

using namespace fastmem;
using fastmem::test::random_matrix;
using fastmem::test::random_vector;

namespace {

double sigmoid(double a) { return 1.0 / (1.0 + std::exp(-a)); }

TttLayerParams<double> small_layer(std::uint64_t seed, std::size_t d = 8, std::size_t heads = 2,
                                   std::size_t hidden = 6, double base_lr = 0.1) {
  return TttLayerParams<double>::make(d, heads, hidden, seed, base_lr);
}

FastWeights<double> random_weights(const TttLayerParams<double>& layer, std::mt19937_64& rng) {
  FastWeights<double> w;
  for (std::size_t h = 0; h < layer.heads; ++h) {
    w.heads.push_back(fastmem::test::random_mlp(layer.head_dim(), layer.hidden, rng, 0.3));
  }
  return w;
}

std::vector<double> project(const Matrix<double>& theta, std::span<const double> x) {
  std::vector<double> y(theta.rows(), 0.0);
  for (std::size_t r = 0; r < theta.rows(); ++r)
    for (std::size_t c = 0; c < theta.cols(); ++c) y[r] += theta(r, c) * x[c];
  return y;
}

// Per-head f(θ x; W) computed token by token from the single-row forward.
std::vector<double> apply_ref(const Matrix<double>& theta, std::span<const double> x,
                              const TttLayerParams<double>& layer, const FastWeights<double>& w) {
  const auto p = project(theta, x);
  const std::size_t hd = layer.head_dim();
  std::vector<double> out;
  for (std::size_t h = 0; h < layer.heads; ++h) {
    const std::span<const double> slice(p.data() + h * hd, hd);
    const auto y = mlp_forward<double>(slice, w.heads[h], layer.ln.slice(h * hd, hd));
    out.insert(out.end(), y.begin(), y.end());
  }
  return out;
}

double loss_ref(const Matrix<double>& x, const std::vector<double>& eta, const TttLayerParams<double>& layer,
                const FastWeights<double>& w) {
  double l = 0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto f = apply_ref(layer.theta_k, x.row(i), layer, w);
    const auto v = project(layer.theta_v, x.row(i));
    for (std::size_t c = 0; c < f.size(); ++c) l += eta[i] * (f[c] - v[c]) * (f[c] - v[c]);
  }
  return l;
}

}  // namespace

// ---------------------------------------------------------------------------
// Initialisation

TEST(InitFastWeights, SameSeedIsBitIdentical) {
  const auto layer = small_layer(1);
  EXPECT_EQ(init_fast_weights(layer, 42), init_fast_weights(layer, 42));
}

TEST(InitFastWeights, DifferentSeedsDiffer) {
  const auto layer = small_layer(1);
  EXPECT_NE(init_fast_weights(layer, 1), init_fast_weights(layer, 2));
}

TEST(InitFastWeights, EmpiricalStdWithinTwentyPercent) {
  const auto layer = TttLayerParams<double>::make(64, 2, 128, 3);
  const auto w = init_fast_weights(layer, 9);
  double ss = 0;
  std::size_t n = 0;
  for (const auto& h : w.heads) {
    for (double v : h.w1.values()) ss += v * v, ++n;
    for (double v : h.w2.values()) ss += v * v, ++n;
    for (double v : h.b1) EXPECT_EQ(v, 0.0);
    for (double v : h.b2) EXPECT_EQ(v, 0.0);
  }
  const double sd = std::sqrt(ss / static_cast<double>(n));
  const double target = init_weight_std(128);
  EXPECT_NEAR(sd, target, 0.2 * target);
  EXPECT_EQ(w.heads.size(), 2u);
  EXPECT_EQ(w.heads[0].d_in(), 32u);
  EXPECT_EQ(w.heads[0].d_hidden(), 128u);
}

TEST(TttLayerParams, ValidateRejectsBadConfigs) {
  EXPECT_THROW(TttLayerParams<double>::make(10, 3, 4, 0), ContractError);
  EXPECT_THROW(TttLayerParams<double>::make(8, 2, 4, 0, 0.0), ContractError);
  EXPECT_THROW(TttLayerParams<double>::make(8, 2, 0, 0), ContractError);
  auto l = small_layer(0);
  l.theta_k = Matrix<double>(8, 7);
  EXPECT_THROW(l.validate(), DimensionError);
}

TEST(TttLayerParams, ZeroNoiseGivesIdentityProjections) {
  const auto l = TttLayerParams<double>::make(8, 2, 4, 0, 1.0, 0.0);
  EXPECT_EQ(l.theta_q, Matrix<double>::identity(8));
  EXPECT_EQ(l.theta_k, Matrix<double>::identity(8));
  EXPECT_EQ(l.theta_v, Matrix<double>::identity(8));
}

// ---------------------------------------------------------------------------
// Token learning rates

TEST(TokenLearningRates, ZeroHeadGivesHalfBaseRate) {
  const auto layer = small_layer(2, 8, 2, 6, 0.3);
  std::mt19937_64 rng(2);
  const auto b = TokenBatch<double>::visual(random_matrix(5, 8, rng));
  for (double e : token_learning_rates(b, layer)) EXPECT_DOUBLE_EQ(e, 0.15);
}

TEST(TokenLearningRates, SaturatesToBaseRate) {
  auto layer = small_layer(3, 8, 2, 6, 0.3);
  layer.lr_b = 60.0;
  std::mt19937_64 rng(3);
  const auto b = TokenBatch<double>::visual(random_matrix(5, 8, rng));
  for (double e : token_learning_rates(b, layer)) EXPECT_NEAR(e, 0.3, 1e-15);
}

TEST(TokenLearningRates, MatchScalarRecomputationAndStayInRange) {
  auto layer = small_layer(4, 8, 2, 6, 0.5);
  std::mt19937_64 rng(4);
  layer.lr_w = random_vector(8, rng);
  layer.lr_b = -0.3;
  const auto x = random_matrix(7, 8, rng);
  const auto eta = token_learning_rates(TokenBatch<double>::visual(x), layer);
  for (std::size_t i = 0; i < 7; ++i) {
    double a = layer.lr_b;
    for (std::size_t c = 0; c < 8; ++c) a += x(i, c) * layer.lr_w[c];
    EXPECT_NEAR(eta[i], 0.5 * sigmoid(a), 1e-15);
    EXPECT_GT(eta[i], 0.0);
    EXPECT_LT(eta[i], 0.5);
  }
}

// ---------------------------------------------------------------------------
// Reconstruction loss

TEST(ReconstructionLoss, SelfReconstructionIsZero) {
  const auto layer = small_layer(5);
  const auto w = init_fast_weights(layer, 5);
  auto zero = w;
  for (auto& h : zero.heads) h = h.zeros_like();
  auto same = layer;
  same.theta_v = same.theta_k;
  std::mt19937_64 rng(5);
  const auto b = TokenBatch<double>::visual(random_matrix(6, 8, rng));
  const auto eta = token_learning_rates(b, same);
  EXPECT_EQ(reconstruction_loss<double>(b, eta, same, zero), 0.0);
}

TEST(ReconstructionLoss, ZeroEtaIsZero) {
  const auto layer = small_layer(6);
  std::mt19937_64 rng(6);
  const auto w = random_weights(layer, rng);
  const auto b = TokenBatch<double>::visual(random_matrix(6, 8, rng));
  const std::vector<double> eta(6, 0.0);
  EXPECT_EQ(reconstruction_loss<double>(b, eta, layer, w), 0.0);
}

TEST(ReconstructionLoss, MatchesScalarLoop) {
  const auto layer = small_layer(7);
  std::mt19937_64 rng(7);
  const auto w = random_weights(layer, rng);
  const auto x = random_matrix(4, 8, rng);
  const auto eta = random_vector(4, rng);
  std::vector<double> pos(eta.size());
  for (std::size_t i = 0; i < eta.size(); ++i) pos[i] = std::abs(eta[i]);
  const double got = reconstruction_loss<double>(TokenBatch<double>::visual(x), pos, layer, w);
  EXPECT_NEAR(got, loss_ref(x, pos, layer, w), 1e-10);
  EXPECT_GE(got, 0.0);
}

TEST(ReconstructionLoss, RejectsAudioTokens) {
  const auto layer = small_layer(8);
  const auto w = init_fast_weights(layer, 8);
  std::mt19937_64 rng(8);
  auto b = TokenBatch<double>::visual(random_matrix(3, 8, rng));
  b.modality[1] = Modality::audio;
  const std::vector<double> eta(3, 0.1);
  EXPECT_THROW(reconstruction_loss<double>(b, eta, layer, w), ContractError);
  EXPECT_THROW(ttt_step(b, w, layer, OptimizerSpec::sgd()), ContractError);
}

// ---------------------------------------------------------------------------
// Output

TEST(TttOutput, ClosedGatePassesInputThrough) {
  auto layer = small_layer(9);
  layer.gate_b = -800.0;
  std::mt19937_64 rng(9);
  const auto w = random_weights(layer, rng);
  const auto b = TokenBatch<double>::visual(random_matrix(5, 8, rng));
  EXPECT_EQ(ttt_output(b, layer, w), b.tokens);
}

TEST(TttOutput, OpenGateGivesRawOutput) {
  auto layer = small_layer(10);
  layer.gate_b = 800.0;
  std::mt19937_64 rng(10);
  const auto w = random_weights(layer, rng);
  const auto b = TokenBatch<double>::visual(random_matrix(5, 8, rng));
  EXPECT_EQ(ttt_output(b, layer, w), ttt_raw_output(b.tokens, layer, w));
}

TEST(TttOutput, MatchesTokenByTokenRecomputation) {
  auto layer = small_layer(11);
  std::mt19937_64 rng(11);
  layer.gate_w = random_vector(8, rng, 0.5);
  layer.gate_b = 0.2;
  const auto w = random_weights(layer, rng);
  const auto x = random_matrix(6, 8, rng);
  const auto z = ttt_output(TokenBatch<double>::visual(x), layer, w);
  for (std::size_t i = 0; i < 6; ++i) {
    double a = layer.gate_b;
    for (std::size_t c = 0; c < 8; ++c) a += x(i, c) * layer.gate_w[c];
    const double alpha = sigmoid(a);
    const auto raw = apply_ref(layer.theta_q, x.row(i), layer, w);
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(z(i, c), alpha * raw[c] + (1 - alpha) * x(i, c), 1e-12);
  }
}

TEST(TttOutput, GateIsConvexCombination) {
  for (int seed = 0; seed < 20; ++seed) {
    auto layer = small_layer(100 + static_cast<std::uint64_t>(seed));
    std::mt19937_64 rng(100 + seed);
    layer.gate_w = random_vector(8, rng);
    layer.gate_b = random_vector(1, rng)[0];
    const auto w = random_weights(layer, rng);
    const auto x = random_matrix(8, 8, rng, 2.0);
    const auto z = ttt_output(TokenBatch<double>::visual(x), layer, w);
    const auto raw = ttt_raw_output(x, layer, w);
    for (std::size_t i = 0; i < 8; ++i) {
      for (std::size_t c = 0; c < 8; ++c) {
        EXPECT_GE(z(i, c), std::min(x(i, c), raw(i, c)) - 1e-12);
        EXPECT_LE(z(i, c), std::max(x(i, c), raw(i, c)) + 1e-12);
      }
    }
  }
}

TEST(TttApply, UsesGivenProjection) {
  const auto layer = small_layer(12);
  std::mt19937_64 rng(12);
  const auto w = random_weights(layer, rng);
  const auto x = random_matrix(3, 8, rng);
  const auto y = ttt_apply(x, layer.theta_k, layer, w);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_LE(fastmem::test::max_abs_diff(y.row(i), apply_ref(layer.theta_k, x.row(i), layer, w)), 1e-12);
  }
  EXPECT_THROW(ttt_apply(x, Matrix<double>(8, 4), layer, w), DimensionError);
}

// ---------------------------------------------------------------------------
// Step

TEST(TttStep, ZeroLearningRateIsNullUpdate) {
  auto layer = small_layer(13);
  layer.lr_b = -1000.0;
  std::mt19937_64 rng(13);
  const auto w = random_weights(layer, rng);
  const auto b = TokenBatch<double>::visual(random_matrix(5, 8, rng));
  for (const auto& opt : {OptimizerSpec::sgd(), OptimizerSpec::muon(0.02), OptimizerSpec::hf(3)}) {
    const auto r = ttt_step(b, w, layer, opt);
    EXPECT_EQ(r.weights.heads, w.heads);
    EXPECT_EQ(r.weights.step, w.step + 1);
    EXPECT_EQ(r.output, ttt_output(b, layer, w));
    EXPECT_EQ(r.metrics.update_norm, 0.0);
  }
}

TEST(TttStep, SmallSgdStepDescends) {
  int descended = 0;
  for (int seed = 0; seed < 20; ++seed) {
    const auto layer = TttLayerParams<double>::make(16, 2, 32, static_cast<std::uint64_t>(seed), 1e-7);
    const auto w = init_fast_weights(layer, static_cast<std::uint64_t>(seed) + 1000);
    std::mt19937_64 rng(static_cast<std::uint64_t>(seed));
    const auto b = TokenBatch<double>::visual(random_matrix(8, 16, rng));
    const auto r = ttt_step(b, w, layer, OptimizerSpec::sgd());
    descended += r.metrics.loss_after < r.metrics.loss_before;
  }
  EXPECT_EQ(descended, 20);
}

TEST(TttStep, MetricsMatchDefinitions) {
  const auto layer = small_layer(14);
  std::mt19937_64 rng(14);
  auto w = random_weights(layer, rng);
  w.step = 7;
  const auto b = TokenBatch<double>::visual(random_matrix(6, 8, rng));
  for (const auto& opt : {OptimizerSpec::sgd(), OptimizerSpec::muon(0.05), OptimizerSpec::hf(3)}) {
    const auto r = ttt_step(b, w, layer, opt);
    const auto eta = token_learning_rates(b, layer);
    EXPECT_EQ(r.metrics.step, 7u);
    EXPECT_EQ(r.weights.step, 8u);
    EXPECT_NEAR(r.metrics.update_norm, weights_distance(r.weights, w), 1e-12);
    EXPECT_NEAR(r.metrics.loss_before, loss_ref(b.tokens, eta, layer, w), 1e-10);
    EXPECT_NEAR(r.metrics.loss_after, loss_ref(b.tokens, eta, layer, r.weights), 1e-10);
    const auto before = ttt_raw_output(b.tokens, layer, w);
    const auto after = ttt_raw_output(b.tokens, layer, r.weights);
    double num = 0, den = 0;
    for (std::size_t i = 0; i < before.size(); ++i) {
      num += (after.values()[i] - before.values()[i]) * (after.values()[i] - before.values()[i]);
      den += before.values()[i] * before.values()[i];
    }
    EXPECT_NEAR(r.metrics.relative_output_change, std::sqrt(num / den), 1e-12);
    EXPECT_EQ(r.output, ttt_output(b, layer, r.weights));
  }
}

TEST(TttStep, EnforcedNormRescalesAllHeadsJointly) {
  const auto layer = small_layer(15);
  std::mt19937_64 rng(15);
  const auto w = random_weights(layer, rng);
  const auto b = TokenBatch<double>::visual(random_matrix(6, 8, rng));
  const auto natural = ttt_step(b, w, layer, OptimizerSpec::hf(3));
  const auto r = ttt_step(b, w, layer, OptimizerSpec::hf(3), StepOptions{0.1386});
  EXPECT_NEAR(r.metrics.update_norm, 0.1386, 1e-12);
  EXPECT_NEAR(weights_distance(r.weights, w), 0.1386, 1e-12);
  // Same direction as the natural update.
  const double s = 0.1386 / natural.metrics.update_norm;
  for (std::size_t h = 0; h < 2; ++h) {
    const auto dn = flatten(natural.weights.heads[h]), dr = flatten(r.weights.heads[h]), w0 = flatten(w.heads[h]);
    for (std::size_t i = 0; i < dn.size(); ++i) EXPECT_NEAR(dr[i] - w0[i], s * (dn[i] - w0[i]), 1e-12);
  }
  EXPECT_THROW(ttt_step(b, w, layer, OptimizerSpec::sgd(), StepOptions{-1.0}), ContractError);
}

TEST(TttStep, NonFiniteUpdateRaisesAndLeavesStateUntouched) {
  const auto layer = small_layer(16);
  std::mt19937_64 rng(16);
  const auto w = random_weights(layer, rng);
  const auto copy = w;
  const auto b = TokenBatch<double>::visual(random_matrix(6, 8, rng));
  EXPECT_THROW(ttt_step(b, w, layer, OptimizerSpec::sgd(), StepOptions{std::numeric_limits<double>::infinity()}),
               NumericError);
  EXPECT_EQ(w, copy);
}

TEST(TttStep, ReplayIsBitIdentical) {
  const auto layer = small_layer(17);
  std::mt19937_64 rng(17);
  std::vector<TokenBatch<double>> stream;
  for (int t = 0; t < 12; ++t) stream.push_back(TokenBatch<double>::visual(random_matrix(4, 8, rng)));
  for (const auto& opt : {OptimizerSpec::sgd(), OptimizerSpec::muon(0.02), OptimizerSpec::hf(3)}) {
    auto a = init_fast_weights(layer, 3), b = a;
    for (const auto& x : stream) {
      a = ttt_step(x, a, layer, opt).weights;
      b = ttt_step(x, b, layer, opt).weights;
      ASSERT_EQ(a, b);
    }
  }
}

TEST(TttStep, HeadsAreIsolated) {
  const auto layer = TttLayerParams<double>::make(8, 2, 6, 18, 0.1, 0.0);
  std::mt19937_64 rng(18);
  const auto w = random_weights(layer, rng);
  const auto x = random_matrix(6, 8, rng);
  auto zeroed = x;
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t c = 4; c < 8; ++c) zeroed(i, c) = 0.0;
  for (const auto& opt : {OptimizerSpec::sgd(), OptimizerSpec::muon(0.02), OptimizerSpec::hf(3)}) {
    const auto a = ttt_step(TokenBatch<double>::visual(x), w, layer, opt);
    const auto b = ttt_step(TokenBatch<double>::visual(zeroed), w, layer, opt);
    EXPECT_EQ(a.weights.heads[0], b.weights.heads[0]);
    EXPECT_NE(a.weights.heads[1], b.weights.heads[1]);
  }
}

class LossDecrease : public ::testing::TestWithParam<int> {};

TEST_P(LossDecrease, DefaultStepReducesLossInNinetyPercentOfSeeds) {
  // Default step sizes; each trial takes the step from a state warmed up by
  // ten SGD steps on the same layer.
  OptimizerSpec opt = GetParam() == 0 ? OptimizerSpec::sgd()
                      : GetParam() == 1 ? OptimizerSpec::muon(OptimizerSpec{}.muon_eta)
                                        : OptimizerSpec::hf();
  int ok = 0;
  for (int seed = 0; seed < 50; ++seed) {
    const auto layer = TttLayerParams<double>::make(32, 2, 64, static_cast<std::uint64_t>(seed), 1e-4);
    auto w = init_fast_weights(layer, static_cast<std::uint64_t>(seed) + 77);
    std::mt19937_64 rng(static_cast<std::uint64_t>(seed) + 5);
    for (int t = 0; t < 10; ++t) {
      w = ttt_step(TokenBatch<double>::visual(random_matrix(32, 32, rng)), w, layer, OptimizerSpec::sgd()).weights;
    }
    const auto r = ttt_step(TokenBatch<double>::visual(random_matrix(32, 32, rng)), w, layer, opt);
    ok += r.metrics.loss_after <= r.metrics.loss_before;
  }
  EXPECT_GE(ok, 45) << "optimizer " << to_string(opt.kind);
}

INSTANTIATE_TEST_SUITE_P(Optimizers, LossDecrease, ::testing::Values(0, 1, 2));

TEST(TttStep, FloatPathTracksDouble) {
  const auto ld = small_layer(19);
  std::mt19937_64 rng(19);
  const auto x = random_matrix(6, 8, rng);
  const auto lf = TttLayerParams<float>::make(8, 2, 6, 19, 0.1f);
  const auto wd = init_fast_weights(ld, 4);
  const auto wf = init_fast_weights(lf, 4);
  const auto rd = ttt_step(TokenBatch<double>::visual(x), wd, ld, OptimizerSpec::hf(3));
  const auto rf = ttt_step(TokenBatch<float>::visual(cast_matrix<float>(x)), wf, lf, OptimizerSpec::hf(3));
  EXPECT_LE(fastmem::test::max_abs_diff(to_double(rf.output).values(), rd.output.values()), 1e-3);
}
