#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "graftnet/optim.hpp"
#include "graftnet/tape.hpp"
#include "support/gradcheck.hpp"
#include "support/layer_gradchecks.hpp"

namespace graftnet {
namespace {

using testing::grad_check;
using testing::random_projection;
using testing::random_tensor;
using testing::random_tensor_away_from_zero;

// Direct-summation cross-correlation, independent of im2col/GEMM.
TensorD conv_oracle(const TensorD& x, const TensorD& w, const TensorD& b,
                    std::size_t s, std::size_t p) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t o = w.dim(0), k = w.dim(2);
  const std::size_t oh = (h + 2 * p - k) / s + 1, ow = (wd + 2 * p - k) / s + 1;
  TensorD y({n, o, oh, ow});
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t oi = 0; oi < o; ++oi)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = b[oi];
          for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t a = 0; a < k; ++a)
              for (std::size_t bb = 0; bb < k; ++bb) {
                const long r = static_cast<long>(i * s + a) - static_cast<long>(p);
                const long q = static_cast<long>(j * s + bb) - static_cast<long>(p);
                if (r < 0 || q < 0 || r >= static_cast<long>(h) ||
                    q >= static_cast<long>(wd))
                  continue;
                acc += x.at4(ni, ci, r, q) * w.at4(oi, ci, a, bb);
              }
          y.at4(ni, oi, i, j) = acc;
        }
  return y;
}

TEST(Conv2d, TwoByTwoExample) {
  Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor w({1, 1, 2, 2}, {1, 0, 0, 1});
  Tensor b({1}, {0});
  auto y = kernels::conv2d_forward(x, w, b, 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_FLOAT_EQ(y[0], 5.0f);
}

TEST(Conv2d, IdentityKernelAndZeroInput) {
  std::mt19937_64 rng(1);
  auto xd = random_tensor({2, 3, 4, 5}, rng);
  Tensor x = xd.cast<float>();
  Tensor w({3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) w.at4(c, c, 0, 0) = 1.0f;
  EXPECT_EQ(kernels::conv2d_forward(x, w, Tensor({3}), 1, 0), x);

  Tensor zeros({1, 2, 3, 3});
  Tensor w3({4, 2, 3, 3}, 0.7f);
  Tensor b({4}, {1, -2, 3, 0.5});
  auto y = kernels::conv2d_forward(zeros, w3, b, 1, 1);
  for (std::size_t o = 0; o < 4; ++o)
    for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(y[o * 9 + i], b[o]);
}

TEST(Conv2d, MatchesDirectSummation) {
  std::mt19937_64 rng(7);
  for (auto [s, p, k] : {std::tuple{1, 1, 3}, {2, 1, 3}, {1, 0, 2}, {2, 0, 3}}) {
    auto x = random_tensor({2, 3, 7, 6}, rng);
    auto w = random_tensor({4, 3, std::size_t(k), std::size_t(k)}, rng);
    auto b = random_tensor({4}, rng);
    auto got = kernels::conv2d_forward(x, w, b, s, p);
    auto want = conv_oracle(x, w, b, s, p);
    ASSERT_EQ(got.shape(), want.shape());
    for (std::size_t i = 0; i < got.numel(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(Conv2d, ShapeMismatchNamesBothShapes) {
  Tensor x({1, 2, 4, 4});
  Tensor w({1, 3, 3, 3});
  try {
    kernels::conv2d_forward(x, w, Tensor({1}), 1, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kShapeMismatch);
    EXPECT_NE(std::string(e.what()).find("[1x2x4x4]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[1x3x3x3]"), std::string::npos);
  }
  EXPECT_THROW(kernels::conv2d_forward(Tensor({1, 1, 2, 2}), Tensor({1, 1, 5, 5}),
                                       Tensor({1}), 1, 1),
               Error);
}

TEST(BatchNorm, ConstantBatchNormalisesToZero) {
  BatchNormState st("bn", 2);
  Tensor x({3, 2, 2, 2}, 4.5f);
  kernels::BatchNormCache<float> cache;
  auto y = kernels::batch_norm_train(x, st, cache);
  for (float v : y.data()) EXPECT_EQ(v, 0.0f);
}

TEST(BatchNorm, PlusMinusOne) {
  BatchNormState st("bn", 1);
  Tensor x({2, 1, 1, 2}, {-1, 1, -1, 1});
  kernels::BatchNormCache<float> cache;
  auto y = kernels::batch_norm_train(x, st, cache);
  const float expect = 1.0f / std::sqrt(1.0f + st.epsilon);
  for (std::size_t i = 0; i < 4; ++i)
    EXPECT_FLOAT_EQ(y[i], (i % 2 ? 1.0f : -1.0f) * expect);
}

TEST(BatchNorm, AffineMap) {
  BatchNormState st("bn", 1);
  st.gamma.value[0] = 2;
  st.beta.value[0] = 3;
  Tensor x({2, 1, 1, 2}, {-1, 1, -1, 1});
  kernels::BatchNormCache<float> cache;
  auto y = kernels::batch_norm_train(x, st, cache);
  for (std::size_t i = 0; i < 4; ++i)
    EXPECT_FLOAT_EQ(y[i], 2.0f * cache.xhat[i] + 3.0f);
}

TEST(BatchNorm, RunningStatsAndInferMode) {
  BatchNormState st("bn", 1);
  st.momentum = 0.5f;
  Tensor x({1, 1, 1, 4}, {0, 2, 4, 6});
  kernels::BatchNormCache<float> cache;
  kernels::batch_norm_train(x, st, cache);
  EXPECT_FLOAT_EQ(st.running_mean[0], 1.5f);               // 0.5 * 3
  EXPECT_FLOAT_EQ(st.running_var[0], 0.5f + 0.5f * 20.0f / 3.0f);

  // Infer mode ignores the batch entirely.
  BatchNormState inf("bn", 1);
  inf.running_mean[0] = 1;
  inf.running_var[0] = 4;
  auto y = kernels::batch_norm_infer(x, inf);
  for (std::size_t i = 0; i < 4; ++i)
    EXPECT_FLOAT_EQ(y[i], (x[i] - 1.0f) / std::sqrt(4.0f + inf.epsilon));

  st.stats_frozen = true;
  const auto rm = st.running_mean, rv = st.running_var;
  kernels::batch_norm_train(x, st, cache);
  EXPECT_EQ(st.running_mean, rm);
  EXPECT_EQ(st.running_var, rv);
}

TEST(BatchNorm, NonFiniteInputRejected) {
  BatchNormState st("bn", 1);
  Tensor x({1, 1, 1, 2}, {1.0f, std::nanf("")});
  kernels::BatchNormCache<float> cache;
  try {
    kernels::batch_norm_train(x, st, cache);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNonFinite);
  }
  x[1] = INFINITY;
  EXPECT_THROW(kernels::batch_norm_infer(x, st), Error);
}

TEST(Relu, Examples) {
  EXPECT_EQ(kernels::relu_forward(Tensor({3}, {-1, 0, 2})), Tensor({3}, {0, 0, 2}));
  EXPECT_EQ(kernels::relu_forward(Tensor({2}, {-1, -3})), Tensor({2}, {0, 0}));
  EXPECT_EQ(kernels::relu_forward(Tensor({2}, {1, 3})), Tensor({2}, {1, 3}));
  // Subgradient at exactly zero is zero.
  auto d = kernels::relu_backward(Tensor({1}, {0}), Tensor({1}, {1}));
  EXPECT_EQ(d[0], 0.0f);
}

TEST(GlobalAvgPool, Examples) {
  auto y = kernels::global_avg_pool_forward(Tensor({1, 1, 2, 2}, {1, 2, 3, 4}));
  EXPECT_EQ(y.shape(), (Shape{1, 1}));
  EXPECT_FLOAT_EQ(y[0], 2.5f);
  auto c = kernels::global_avg_pool_forward(Tensor({2, 3, 4, 4}, 1.25f));
  for (float v : c.data()) EXPECT_FLOAT_EQ(v, 1.25f);
  Tensor one({2, 3, 1, 1}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(kernels::global_avg_pool_forward(one).data().size(), 6u);
  EXPECT_EQ(kernels::global_avg_pool_forward(one), one.reshaped({2, 3}));
}

TEST(BilinearPool, HandOuterProduct) {
  auto y = kernels::bilinear_pool_forward(Tensor({1, 2, 1, 1}, {1, 0}));
  ASSERT_EQ(y.shape(), (Shape{1, 4}));
  EXPECT_FLOAT_EQ(y[0], 1.0f);
  EXPECT_EQ(y[1], 0.0f);
  EXPECT_EQ(y[2], 0.0f);
  EXPECT_EQ(y[3], 0.0f);
}

TEST(BilinearPool, ZeroInputGivesZeroVector) {
  auto y = kernels::bilinear_pool_forward(Tensor({2, 3, 2, 2}));
  for (float v : y.data()) {
    EXPECT_FALSE(std::isnan(v));
    EXPECT_EQ(v, 0.0f);
  }
}

TEST(BilinearPool, SymmetricFeature) {
  for (float a : {0.3f, 1.0f, -2.0f}) {
    auto y = kernels::bilinear_pool_forward(Tensor({1, 2, 1, 1}, {a, a}));
    for (float v : y.data()) EXPECT_NEAR(v, 0.5f, 1e-6f);
  }
}

TEST(BilinearPool, OutputNormIsZeroOrOne) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = random_tensor({3, 4, 3, 2}, rng).cast<float>();
    if (trial % 5 == 0) x.fill(0.0f);
    auto y = kernels::bilinear_pool_forward(x);
    for (std::size_t s = 0; s < 3; ++s) {
      double sq = 0;
      for (std::size_t i = 0; i < 16; ++i) sq += double(y[s * 16 + i]) * y[s * 16 + i];
      const double n = std::sqrt(sq);
      EXPECT_TRUE(n == 0.0 || std::abs(n - 1.0) < 1e-5) << n;
    }
  }
}

TEST(Dense, Examples) {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor v({1, 2}, {1, 2});
  EXPECT_EQ(kernels::dense_forward(v, eye, Tensor({2})), v);
  EXPECT_EQ(kernels::dense_forward(Tensor({1, 2}), eye, Tensor({2}, {4, 5})),
            Tensor({1, 2}, {4, 5}));
  EXPECT_EQ(kernels::dense_forward(v, Tensor({2, 2}, {1, 1, 0, 1}), Tensor({2})),
            Tensor({1, 2}, {3, 2}));
  EXPECT_THROW(kernels::dense_forward(Tensor({1, 3}), eye, Tensor({2})), Error);
}

TEST(CrossEntropy, Examples) {
  std::vector<int> labels{0, 1};
  auto r = kernels::softmax_cross_entropy(Tensor({2, 2}, 0.3f), labels);
  EXPECT_NEAR(r.loss, std::log(2.0f), 1e-6);
  std::vector<int> l5{4};
  EXPECT_NEAR(kernels::softmax_cross_entropy(Tensor({1, 5}, -1.0f), l5).loss,
              std::log(5.0f), 1e-6);
  std::vector<int> l0{0};
  EXPECT_LT(kernels::softmax_cross_entropy(Tensor({1, 3}, {40, 0, 0}), l0).loss, 1e-12);
  std::vector<int> bad{2};
  try {
    kernels::softmax_cross_entropy(Tensor({1, 2}), bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kOutOfRange);
  }
}

TEST(Backward, SumGivesOnes) {
  Tape<float> tape;
  Var x = tape.input(Tensor({2, 3}, 5.0f));
  tape.backward(sum(tape, x));
  for (float g : tape.grad(x).data()) EXPECT_EQ(g, 1.0f);
}

TEST(Backward, BeforeForwardIsAnError) {
  Tape<float> tape;
  try {
    tape.backward(Var{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kState);
  }
}

TEST(Backward, NonScalarLossRejected) {
  Tape<float> tape;
  Var x = tape.input(Tensor({2}));
  EXPECT_THROW(tape.backward(x), Error);
}

TEST(Backward, FrozenParameterGradientStaysZero) {
  Parameter w("w", Tensor({2, 2}, 0.5f), /*train=*/false);
  Parameter b("b", Tensor({2}, 0.1f));
  Tape<float> tape;
  Var v = tape.input(Tensor({3, 2}, 1.0f));
  std::vector<int> labels{0, 1, 1};
  Var loss = softmax_cross_entropy(tape, dense(tape, v, tape.param(w), tape.param(b)),
                                   labels);
  tape.backward(loss);
  for (float g : w.grad.data()) EXPECT_EQ(g, 0.0f);
  float norm = 0;
  for (float g : b.grad.data()) norm += std::abs(g);
  EXPECT_GT(norm, 0.0f);
}

TEST(Backward, DeterministicGradients) {
  auto run = [] {
    std::mt19937_64 rng(11);
    BasicParameter<float> w("w", random_tensor({4, 3, 3, 3}, rng).cast<float>());
    BasicParameter<float> b("b", Tensor({4}));
    BatchNormState bn("bn", 4);
    Tape<float> tape;
    Var x = tape.constant(random_tensor({2, 3, 6, 6}, rng).cast<float>());
    Var y = relu(tape, batch_norm(tape, conv2d(tape, x, tape.param(w), tape.param(b), 1, 1),
                                  bn, Mode::kTrain));
    tape.backward(sum(tape, global_avg_pool(tape, y)));
    return std::pair{w.grad, bn.gamma.grad};
  };
  EXPECT_EQ(run(), run());
}

// Composite conv -> BN -> GAP -> dense -> CE against central differences.
TEST(Backward, CompositeMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  std::vector<BasicParameter<double>> inputs;
  inputs.emplace_back("x", random_tensor({3, 2, 5, 5}, rng));
  inputs.emplace_back("w", random_tensor({3, 2, 3, 3}, rng));
  inputs.emplace_back("b", random_tensor({3}, rng));
  inputs.emplace_back("gamma", random_tensor({3}, rng, 0.5, 1.5));
  inputs.emplace_back("beta", random_tensor({3}, rng));
  inputs.emplace_back("W", random_tensor({2, 3}, rng));
  inputs.emplace_back("c", random_tensor({2}, rng));
  std::vector<int> labels{0, 1, 1};
  auto bn = std::make_shared<BasicBatchNormState<double>>("bn", 3);
  auto build = [&](Tape<double>& tape, std::vector<BasicParameter<double>>& in) {
    bn->gamma = in[3];
    bn->beta = in[4];
    Var y = conv2d(tape, tape.param(in[0]), tape.param(in[1]), tape.param(in[2]), 1, 1);
    y = batch_norm(tape, y, *bn, Mode::kTrain);
    Var logits = dense(tape, global_avg_pool(tape, y), tape.param(in[5]), tape.param(in[6]));
    return softmax_cross_entropy(tape, logits, labels);
  };
  auto collect = [&](std::vector<BasicParameter<double>>& in) {
    in[3].grad = bn->gamma.grad;
    in[4].grad = bn->beta.grad;
  };
  auto r = grad_check(build, inputs, 1e-4, 1e-6, collect);
  EXPECT_LT(r.max_rel_error, 1e-4);
  EXPECT_EQ(r.checked, 221u);
}

TEST(GradCheck, EveryLayerAtTenRandomPoints) {
  for (const auto& c : testing::check_all_layers(10, 42)) {
    EXPECT_LT(c.worst_rel_error, 1e-4) << c.layer;
    EXPECT_EQ(c.points, 10u);
  }
}

TEST(Sgd, Examples) {
  SgdMomentum<float> opt;
  Parameter w("w", Tensor({1}, 1.0f));
  std::vector<Parameter*> ps{&w};
  w.grad[0] = 0.5f;
  opt.step(ps, 0.0f, 0.0f);
  EXPECT_EQ(w.value[0], 1.0f);

  SgdMomentum<double> opt2;
  BasicParameter<double> w2("w", TensorD({1}, 1.0));
  std::vector<BasicParameter<double>*> ps2{&w2};
  w2.grad[0] = 0.5;
  opt2.step(ps2, 0.1, 0.0);
  EXPECT_DOUBLE_EQ(w2.value[0], 0.95);

  SgdMomentum<double> opt3;
  BasicParameter<double> w3("w", TensorD({1}, 0.0));
  std::vector<BasicParameter<double>*> ps3{&w3};
  w3.grad[0] = 1.0;
  opt3.step(ps3, 0.1, 0.9);
  EXPECT_NEAR(w3.value[0], -0.1, 1e-15);
  opt3.step(ps3, 0.1, 0.9);
  EXPECT_NEAR(w3.value[0], -0.1 - 0.19, 1e-15);
}

TEST(Sgd, FrozenParametersBitIdentical) {
  SgdMomentum<float> opt;
  Parameter frozen("f", Tensor({3}, {0.1f, 0.2f, 0.3f}), false);
  Parameter live("l", Tensor({3}, 1.0f));
  const auto before = frozen.value;
  std::vector<Parameter*> ps{&frozen, &live};
  for (int i = 0; i < 100; ++i) {
    frozen.grad.fill(0.3f);  // even a stray gradient must not move it
    live.grad.fill(0.3f);
    opt.step(ps, 0.05f, 0.9f);
  }
  EXPECT_EQ(frozen.value, before);
  EXPECT_NE(live.value[0], 1.0f);
}

}  // namespace
}  // namespace graftnet
