#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "mixres/gradcheck.hpp"
#include "mixres/ops.hpp"
#include "mixres/tensor.hpp"

using namespace mixres;

namespace {

// Direct six-loop cross-correlation, accumulating over (c, ki, kj) in order
// and adding the bias last. Out-of-bounds taps read zero.
template <class T>
Tensor<T> conv2d_direct(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b, std::size_t s, std::size_t p) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const std::size_t OH = (H + 2 * p - KH) / s + 1, OW = (W + 2 * p - KW) / s + 1;
  Tensor<T> y({N, O, OH, OW});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t oy = 0; oy < OH; ++oy)
        for (std::size_t ox = 0; ox < OW; ++ox) {
          T acc = 0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ki = 0; ki < KH; ++ki)
              for (std::size_t kj = 0; kj < KW; ++kj) {
                const long iy = long(oy * s + ki) - long(p), ix = long(ox * s + kj) - long(p);
                const T v = (iy >= 0 && iy < long(H) && ix >= 0 && ix < long(W))
                                ? x[((n * C + c) * H + iy) * W + ix]
                                : T(0);
                acc += v * w[((o * C + c) * KH + ki) * KW + kj];
              }
          y[((n * O + o) * OH + oy) * OW + ox] = b ? acc + (*b)[o] : acc;
        }
  return y;
}

template <class T>
Tensor<T> randn(Shape s, std::mt19937_64& rng, bool rg = false) {
  std::normal_distribution<double> d;
  Tensor<T> t(std::move(s));
  for (auto& v : t.data()) v = static_cast<T>(d(rng));
  return t.set_requires_grad(rg), t;
}

template <class T>
void expect_conv_matches_direct(std::uint64_t seed, double tol) {
  std::mt19937_64 rng(seed);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng() % 2, c = 1 + rng() % 4, o = 1 + rng() % 4;
    const std::size_t k = (rng() % 2) ? 3 : 1, s = 1 + rng() % 2, p = rng() % 2;
    std::size_t h, w;
    do {
      h = 3 + rng() % 6;
      w = 3 + rng() % 6;
    } while ((h + 2 * p - k) % s || (w + 2 * p - k) % s);
    auto x = randn<T>({n, c, h, w}, rng), wt = randn<T>({o, c, k, k}, rng), b = randn<T>({o}, rng);
    const bool bias = rng() % 2;
    auto got = conv2d<T>(x, wt, bias ? &b : nullptr, s, p);
    auto want = conv2d_direct<T>(x, wt, bias ? &b : nullptr, s, p);
    ASSERT_EQ(got.shape(), want.shape());
    for (std::size_t i = 0; i < got.numel(); ++i) {
      if (tol == 0)
        ASSERT_EQ(got[i], want[i]) << "trial " << trial << " element " << i;
      else
        ASSERT_NEAR(got[i], want[i], tol);
    }
  }
}

}  // namespace

TEST(Conv2d, OneByOneIdentityWeightReturnsInput) {
  std::mt19937_64 rng(1);
  auto x = randn<float>({2, 3, 4, 5}, rng);
  Tensor<float> w({3, 3, 1, 1});
  for (std::size_t i = 0; i < 3; ++i) w[i * 3 + i] = 1.0f;
  auto y = conv2d<float>(x, w);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Conv2d, AllOnesKernelSumsWindow) {
  std::vector<float> v(9);
  std::iota(v.begin(), v.end(), 1.0f);
  Tensor<float> x({1, 1, 3, 3}, v);
  Tensor<float> w({1, 1, 3, 3}, 1.0f);
  auto y = conv2d<float>(x, w);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y[0], 45.0f);
}

TEST(Conv2d, MatchesDirectLoopBitForBitInDouble) { expect_conv_matches_direct<double>(7, 0.0); }

TEST(Conv2d, MatchesDirectLoopInFloat) { expect_conv_matches_direct<float>(8, 1e-5); }

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  auto x = randn<float>({2, 3, 8, 8}, rng, true);
  auto w = randn<float>({4, 3, 3, 3}, rng, true);
  auto r = randn<float>({2, 4, 8, 8}, rng);
  Tape<float> tape;
  {
    Tape<float>::Scope scope(tape);
    auto loss = sum_all(mul(conv2d<float>(x, w, 1, 1), r));
    tape.backward(loss);
  }
  auto fx = [&](const Tensor<float>& xi) {
    auto y = conv2d<float>(xi, w, 1, 1);
    double s = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) s += double(y[i]) * r[i];
    return s;
  };
  auto fw = [&](const Tensor<float>& wi) {
    auto y = conv2d<float>(x, wi, 1, 1);
    double s = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) s += double(y[i]) * r[i];
    return s;
  };
  EXPECT_LT(relative_error<float>(x.grad(), finite_diff_grad<float>(fx, x, 1e-2).data()), 1e-3);
  EXPECT_LT(relative_error<float>(w.grad(), finite_diff_grad<float>(fw, w, 1e-2).data()), 1e-3);
}

TEST(Conv2d, RejectsChannelMismatchAndFractionalOutput) {
  Tensor<float> x({1, 3, 8, 8}), w({2, 4, 3, 3});
  EXPECT_THROW(conv2d<float>(x, w), DimensionError);
  Tensor<float> w2({2, 3, 3, 3});
  EXPECT_THROW(conv2d<float>(x, w2, 2, 0), ConfigError);  // (8 - 3) / 2 is not integral
}

TEST(Conv2d, FloorRoundingDropsUnreachedEdge) {
  std::mt19937_64 rng(12);
  auto x = randn<double>({2, 3, 8, 8}, rng, true);
  auto w = randn<double>({4, 3, 3, 3}, rng, true);
  EXPECT_THROW(conv2d<double>(x, w, nullptr, 2, 1), ConfigError);
  auto y = conv2d<double>(x, w, nullptr, 2, 1, ConvOutput::Floor);
  auto want = conv2d_direct<double>(x, w, nullptr, 2, 1);
  ASSERT_EQ(y.shape(), (Shape{2, 4, 4, 4}));
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_EQ(y[i], want[i]);

  auto r = randn<double>({2, 4, 4, 4}, rng);
  Tape<double> tape;
  {
    Tape<double>::Scope scope(tape);
    auto loss = sum_all(mul(conv2d<double>(x, w, nullptr, 2, 1, ConvOutput::Floor), r));
    tape.backward(loss);
  }
  auto project = [&](const Tensor<double>& xi, const Tensor<double>& wi) {
    auto yi = conv2d<double>(xi, wi, nullptr, 2, 1, ConvOutput::Floor);
    double s = 0;
    for (std::size_t i = 0; i < yi.numel(); ++i) s += yi[i] * r[i];
    return s;
  };
  auto fx = [&](const Tensor<double>& xi) { return project(xi, w); };
  auto fw = [&](const Tensor<double>& wi) { return project(x, wi); };
  EXPECT_LT(relative_error<double>(x.grad(), finite_diff_grad<double>(fx, x, 1e-6).data()), 1e-6);
  EXPECT_LT(relative_error<double>(w.grad(), finite_diff_grad<double>(fw, w, 1e-6).data()), 1e-6);
}

TEST(BatchNorm, ConstantChannelNormalizesToZero) {
  Tensor<float> x({2, 1, 2, 2}, 3.5f), g({1}, 1.0f), b({1}, 0.0f);
  BatchNormStats<float> st(1);
  auto y = batch_norm2d<float>(x, g, b, st, Mode::Train);
  for (float v : y.data()) EXPECT_EQ(v, 0.0f);
}

TEST(BatchNorm, TwoValuesMapToPlusMinusOne) {
  Tensor<double> x({2, 1, 1, 1}, {1.0, 3.0}), g({1}, 1.0), b({1}, 0.0);
  BatchNormStats<double> st(1);
  auto y = batch_norm2d<double>(x, g, b, st, Mode::Train, 0.0);
  EXPECT_DOUBLE_EQ(y[0], -1.0);
  EXPECT_DOUBLE_EQ(y[1], 1.0);
  // running stats: 0.9 * 0 + 0.1 * 2 and 0.9 * 1 + 0.1 * (unbiased var 2)
  EXPECT_NEAR(st.mean[0], 0.2, 1e-12);
  EXPECT_NEAR(st.var[0], 1.1, 1e-12);
}

TEST(BatchNorm, EvalModeUsesRunningStats) {
  Tensor<double> x({1, 1, 1, 2}, {5.0, 7.0}), g({1}, 2.0), b({1}, 1.0);
  BatchNormStats<double> st(1);
  st.mean[0] = 4.0;
  st.var[0] = 4.0;
  auto y = batch_norm2d<double>(x, g, b, st, Mode::Eval, 0.0);
  EXPECT_DOUBLE_EQ(y[0], 2.0 * 0.5 + 1.0);
  EXPECT_DOUBLE_EQ(y[1], 2.0 * 1.5 + 1.0);
  EXPECT_EQ(st.mean[0], 4.0);
}

TEST(BatchNorm, ChannelMismatchIsDimensionError) {
  Tensor<float> x({2, 3, 2, 2}), g({2}, 1.0f), b({2});
  BatchNormStats<float> st(2);
  EXPECT_THROW(batch_norm2d<float>(x, g, b, st, Mode::Train), DimensionError);
}

TEST(BatchNorm, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  auto x = randn<float>({2, 2, 3, 3}, rng, true);
  Tensor<float> g({2}, std::vector<float>{1.3f, 0.7f}, true), b({2}, std::vector<float>{0.1f, -0.2f}, true);
  auto r = randn<float>({2, 2, 3, 3}, rng);
  auto forward = [&](const Tensor<float>& xi) {
    BatchNormStats<float> st(2);
    return batch_norm2d<float>(xi, g, b, st, Mode::Train);
  };
  Tape<float> tape;
  {
    Tape<float>::Scope scope(tape);
    auto loss = sum_all(mul(forward(x), r));
    tape.backward(loss);
  }
  auto f = [&](const Tensor<float>& xi) {
    auto y = forward(xi);
    double s = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) s += double(y[i]) * r[i];
    return s;
  };
  EXPECT_LT(relative_error<float>(x.grad(), finite_diff_grad<float>(f, x, 1e-2).data()), 1e-3);
}

TEST(Gelu, KnownValues) {
  Tensor<double> x({3}, {0.0, 1.0, -1.0});
  auto y = gelu(x);
  EXPECT_EQ(y[0], 0.0);
  EXPECT_NEAR(y[1], 0.841345, 1e-6);
  EXPECT_NEAR(y[2], -1.0 * (1.0 - 0.8413447460685429), 1e-12);
}

TEST(Gelu, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  auto x = randn<float>({64}, rng, true);
  Tape<float> tape;
  {
    Tape<float>::Scope scope(tape);
    auto loss = sum_all(gelu(x));
    tape.backward(loss);
  }
  auto f = [](const Tensor<float>& xi) {
    auto y = gelu(xi);
    double s = 0;
    for (float v : y.data()) s += v;
    return s;
  };
  EXPECT_LT(relative_error<float>(x.grad(), finite_diff_grad<float>(f, x, 1e-2).data()), 1e-4);
}

TEST(LogSoftmaxClamped, UniformLogits) {
  Tensor<float> z({1, 10}, 0.3f);
  auto y = log_softmax_clamped(z);
  for (float v : y.data()) EXPECT_NEAR(v, -2.302585f, 1e-6);
}

TEST(LogSoftmaxClamped, UnderflowIsClampedToFloor) {
  Tensor<float> z({1, 2}, {100.0f, 0.0f});
  auto y = log_softmax_clamped(z);
  EXPECT_NEAR(y[0], 0.0f, 1e-7);
  EXPECT_NEAR(y[1], -11.512925f, 1e-5);
}

TEST(LogSoftmaxClamped, SymmetricPair) {
  Tensor<double> z({1, 2}, {0.0, 0.0});
  auto y = log_softmax_clamped(z);
  EXPECT_DOUBLE_EQ(y[0], std::log(0.5));
  EXPECT_DOUBLE_EQ(y[1], std::log(0.5));
}

TEST(LogSoftmaxClamped, RejectsSingleClass) {
  Tensor<float> z({3, 1});
  EXPECT_THROW(log_softmax_clamped(z), DimensionError);
}

TEST(LogSoftmaxClamped, OutputsBoundedAndRowsNormalized) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> spread(0.1, 40.0);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 4, k = 2 + rng() % 9;
    auto z = randn<float>({n, k}, rng);
    const float sc = static_cast<float>(spread(rng));
    for (auto& v : z.data()) v *= sc;
    auto y = log_softmax_clamped(z);
    for (float v : y.data()) {
      ASSERT_GE(v, std::log(1e-5f));
      ASSERT_LE(v, 0.0f);
    }
    // Pre-clamp softmax from an independent double-precision computation.
    for (std::size_t r = 0; r < n; ++r) {
      double mx = -1e300, den = 0, sum = 0;
      for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, double(z[r * k + j]));
      for (std::size_t j = 0; j < k; ++j) den += std::exp(z[r * k + j] - mx);
      for (std::size_t j = 0; j < k; ++j) sum += std::exp(z[r * k + j] - mx) / den;
      ASSERT_NEAR(sum, 1.0, 1e-6);
    }
  }
}

TEST(LogSoftmaxClamped, ClampedEntryGetsNoGradientThroughItsLog) {
  Tensor<double> z({1, 2}, {30.0, 0.0}, true);
  Tape<double> tape;
  {
    Tape<double>::Scope scope(tape);
    Tensor<double> pick({1, 2}, {0.0, 1.0});
    auto loss = sum_all(mul(log_softmax_clamped(z), pick));
    tape.backward(loss);
  }
  // Only the clamped entry carries weight, so the gate zeroes everything.
  EXPECT_NEAR(z.grad()[0], 0.0, 1e-12);
  EXPECT_NEAR(z.grad()[1], 0.0, 1e-12);
}

TEST(Linear, IdentityAndHandValue) {
  Tensor<float> x({2, 2}, {1, 2, 3, 4}), eye({2, 2}, {1, 0, 0, 1}), zero({2});
  auto y = linear(x, eye, zero);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(y[i], x[i]);
  Tensor<float> a({1, 2}, {1, 2}), w({1, 2}, {3, 4}), b({1}, {5});
  EXPECT_EQ(linear(a, w, b)[0], 16.0f);
  Tensor<float> bad({1, 3});
  EXPECT_THROW(linear(a, bad, b), DimensionError);
}

TEST(Linear, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(21);
  auto x = randn<float>({3, 5}, rng, true), w = randn<float>({4, 5}, rng, true), b = randn<float>({4}, rng, true);
  auto r = randn<float>({3, 4}, rng);
  Tape<float> tape;
  {
    Tape<float>::Scope scope(tape);
    auto loss = sum_all(mul(linear(x, w, b), r));
    tape.backward(loss);
  }
  auto proj = [&](const Tensor<float>& y) {
    double s = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) s += double(y[i]) * r[i];
    return s;
  };
  auto fx = [&](const Tensor<float>& t) { return proj(linear(t, w, b)); };
  auto fw = [&](const Tensor<float>& t) { return proj(linear(x, t, b)); };
  auto fb = [&](const Tensor<float>& t) { return proj(linear(x, w, t)); };
  EXPECT_LT(relative_error<float>(x.grad(), finite_diff_grad<float>(fx, x, 1e-2).data()), 1e-4);
  EXPECT_LT(relative_error<float>(w.grad(), finite_diff_grad<float>(fw, w, 1e-2).data()), 1e-4);
  EXPECT_LT(relative_error<float>(b.grad(), finite_diff_grad<float>(fb, b, 1e-2).data()), 1e-4);
}

TEST(GlobalAvgPool, IdentityAndMean) {
  Tensor<float> x({2, 3, 1, 1}, {1, 2, 3, 4, 5, 6});
  auto y = global_avg_pool(x);
  ASSERT_EQ(y.shape(), (Shape{2, 3}));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(y[i], x[i]);
  Tensor<float> q({1, 1, 2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(global_avg_pool(q)[0], 2.5f);
}

TEST(GlobalAvgPool, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  auto x = randn<double>({2, 3, 3, 2}, rng, true);
  auto r = randn<double>({2, 3}, rng);
  Tape<double> tape;
  {
    Tape<double>::Scope scope(tape);
    auto loss = sum_all(mul(global_avg_pool(x), r));
    tape.backward(loss);
  }
  auto f = [&](const Tensor<double>& t) {
    auto y = global_avg_pool(t);
    double s = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) s += y[i] * r[i];
    return s;
  };
  EXPECT_LT(relative_error<double>(x.grad(), finite_diff_grad<double>(f, x, 1e-6).data()), 1e-5);
}

TEST(Elementwise, AddZeroSumAllAndShapeRules) {
  Tensor<float> x({2, 2}, {1, 2, 3, 4});
  auto y = add(x, Tensor<float>::scalar(0.0f));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(y[i], x[i]);
  EXPECT_EQ(sum_all(x).item(), 10.0f);
  EXPECT_THROW(add(x, Tensor<float>({4})), DimensionError);
  EXPECT_THROW(mul(x, Tensor<float>({2, 3})), DimensionError);
  auto s = scale(x, 2.0f);
  EXPECT_EQ(s[3], 8.0f);
}

TEST(Elementwise, MulGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(12);
  auto a = randn<double>({3, 4}, rng, true), b = randn<double>({3, 4}, rng, true);
  Tape<double> tape;
  {
    Tape<double>::Scope scope(tape);
    auto loss = sum_all(mul(a, b));
    tape.backward(loss);
  }
  auto f = [&](const Tensor<double>& t) { return sum_all(mul(t, b)).item(); };
  EXPECT_LT(relative_error<double>(a.grad(), finite_diff_grad<double>(f, a, 1e-6).data()), 1e-6);
}

TEST(Backward, SumGivesOnes) {
  Tensor<float> x({2, 3}, 0.5f, true);
  Tape<float> tape;
  Tape<float>::Scope scope(tape);
  auto loss = sum_all(x);
  tape.backward(loss);
  for (float g : x.grad()) EXPECT_EQ(g, 1.0f);
}

TEST(Backward, SquareAndFanOut) {
  Tensor<double> x({2}, {1.0, 2.0}, true);
  Tape<double> tape;
  {
    Tape<double>::Scope scope(tape);
    auto loss = sum_all(mul(x, x));
    tape.backward(loss);
  }
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_EQ(x.grad()[1], 4.0);

  Tensor<double> z({1}, {3.0}, true);
  Tape<double> tape2;
  {
    Tape<double>::Scope scope(tape2);
    auto loss = sum_all(add(z, z));
    tape2.backward(loss);
  }
  EXPECT_EQ(z.grad()[0], 2.0);
}

TEST(Backward, UsageErrors) {
  Tensor<float> x({2}, 1.0f, true);
  Tape<float> tape, other;
  Tape<float>::Scope scope(tape);
  auto y = scale(x, 2.0f);
  EXPECT_THROW(tape.backward(y), UsageError);
  auto loss = sum_all(y);
  EXPECT_THROW(other.backward(loss), UsageError);
}

TEST(Backward, RepeatedCyclesAreDeterministic) {
  std::mt19937_64 rng(2);
  auto x = randn<float>({2, 3, 6, 6}, rng);
  auto w = randn<float>({4, 3, 3, 3}, rng, true);
  Tensor<float> g({4}, 1.0f, true), b({4}, 0.0f, true);
  std::vector<std::vector<float>> grads;
  for (int cycle = 0; cycle < 2; ++cycle) {
    w.zero_grad();
    Tape<float> tape;
    Tape<float>::Scope scope(tape);
    BatchNormStats<float> st(4);
    auto loss = sum_all(gelu(batch_norm2d(conv2d(x, w, 1, 1), g, b, st, Mode::Train)));
    tape.backward(loss);
    grads.emplace_back(w.grad().begin(), w.grad().end());
  }
  EXPECT_EQ(grads[0], grads[1]);
}

TEST(FiniteDiff, SumAndSquare) {
  Tensor<double> x({3}, {0.3, -1.0, 2.0});
  auto g = finite_diff_grad<double>([](const Tensor<double>& t) { return sum_all(t).item(); }, x, 1e-4);
  for (double v : g.data()) EXPECT_NEAR(v, 1.0, 1e-9);
  Tensor<double> y({1}, {3.0});
  const double eps = 1e-3;
  auto h = finite_diff_grad<double>([](const Tensor<double>& t) { return t[0] * t[0]; }, y, eps);
  EXPECT_NEAR(h[0], 6.0, eps * eps);
  EXPECT_THROW(finite_diff_grad<double>([](const Tensor<double>&) { return 0.0; }, y, 0.0), UsageError);
}

TEST(FiniteDiff, AgreesWithBackwardOnTwoLayerNetwork) {
  std::mt19937_64 rng(17);
  auto x = randn<float>({4, 6}, rng);
  auto w1 = randn<float>({8, 6}, rng, true), b1 = randn<float>({8}, rng, true);
  auto w2 = randn<float>({3, 8}, rng, true), b2 = randn<float>({3}, rng, true);
  Tensor<float> target({4, 3}, 1.0f / 3.0f);
  auto net = [&](const Tensor<float>& first) {
    auto h = gelu(linear(x, first, b1));
    return sum_all(mul(log_softmax_clamped(linear(h, w2, b2)), target));
  };
  Tape<float> tape;
  {
    Tape<float>::Scope scope(tape);
    auto loss = net(w1);
    tape.backward(loss);
  }
  auto fd = finite_diff_grad<float>([&](const Tensor<float>& t) { return net(t).item(); }, w1, 1e-2);
  EXPECT_LT(relative_error<float>(w1.grad(), fd.data()), 1e-3);
}

TEST(GradCheckSuite, EveryOpPassesOnRandomShapes) {
  for (const auto& r : run_gradcheck_suite("", 25, 123)) {
    EXPECT_TRUE(r.passed()) << r.op << " " << r.precision << " worst " << r.worst_rel_error;
  }
}

TEST(GradCheckSuite, CorruptedBackwardIsCaught) {
  CorruptBackwardGuard guard("gelu");
  auto results = run_gradcheck_suite("gelu", 5, 1);
  for (const auto& r : results) EXPECT_FALSE(r.passed()) << r.precision;
}
