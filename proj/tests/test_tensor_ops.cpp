#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "metta/errors.hpp"
#include "metta/ops.hpp"
#include "metta/rng.hpp"
#include "metta/tensor.hpp"
#include "test_util.hpp"

namespace metta {
namespace {

using testing::expect_near_all;
using testing::grid;
using testing::vec;

TEST(Tensor, ShapeAndSize) {
  Tensor t({2, 3, 4}, 1.5f);
  EXPECT_EQ(t.rank(), 3u);
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.dim(1), 3u);
  EXPECT_FLOAT_EQ(t.at(1, 2, 3), 1.5f);
  EXPECT_FALSE(t.empty());
  EXPECT_TRUE(Tensor().empty());
}

TEST(Tensor, RejectsZeroDimensionAndLengthMismatch) {
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
}

TEST(Tensor, RowMajorLayout) {
  Tensor t = grid(2, 2, 3, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11});
  EXPECT_EQ(t.at(1, 0, 2), 8.0f);
  EXPECT_EQ(t.at(0, 1, 0), 3.0f);
}

TEST(Tensor, BitwiseEqualityDistinguishesSignedZero) {
  const Tensor a = vec({0.0f}), b = vec({-0.0f});
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(bitwise_equal(a, b));
  EXPECT_TRUE(bitwise_equal(a, a));
}

TEST(Tensor, FiniteCheck) {
  EXPECT_TRUE(all_finite(vec({1, 2})));
  EXPECT_FALSE(all_finite(vec({1, std::numeric_limits<float>::quiet_NaN()})));
  EXPECT_FALSE(all_finite(vec({std::numeric_limits<float>::infinity()})));
}

TEST(Tensor, CastRoundTrip) {
  const Tensor t = vec({0.1f, -2.5f});
  EXPECT_TRUE(bitwise_equal(t.cast<double>().cast<float>(), t));
}

TEST(Conv2d, IdentityKernelReturnsInput) {
  const Tensor x({1, 3, 3}, 1.0f);
  const Tensor k({1, 1, 1, 1}, 1.0f);
  EXPECT_TRUE(bitwise_equal(conv2d(x, k, 1, 0), x));
}

TEST(Conv2d, AllOnesKernelSumsWindow) {
  const Tensor out = conv2d(grid(1, 2, 2, {1, 2, 3, 4}), Tensor({1, 1, 2, 2}, 1.0f), 1, 0);
  ASSERT_EQ(out.shape(), (Shape{1, 1, 1}));
  EXPECT_FLOAT_EQ(out[0], 10.0f);
}

// Windows of the diagonal input against k = [[1,2],[3,4]] without flipping:
// (0,0) [[1,0],[0,1]] -> 1+4; (0,1) [[0,0],[1,0]] -> 3; (1,0) [[0,1],[0,0]] -> 2;
// (1,1) [[1,0],[0,1]] -> 5.
TEST(Conv2d, DiagonalInputAgainstHandEvaluation) {
  const Tensor x = grid(1, 3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const Tensor k({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  const Tensor out = conv2d(x, k, 1, 0);
  ASSERT_EQ(out.shape(), (Shape{1, 2, 2}));
  expect_near_all(out, {5, 3, 2, 5}, 0.0);
  // The flipped kernel gives the true-convolution result.
  expect_near_all(conv2d(x, Tensor({1, 1, 2, 2}, std::vector<float>{4, 3, 2, 1}), 1, 0), {5, 2, 3, 5}, 0.0);
}

TEST(Conv2d, StridePaddingGeometry) {
  const Tensor x({2, 7, 5}, 1.0f);
  const Tensor k({3, 2, 3, 3}, 1.0f);
  EXPECT_EQ(conv2d(x, k, 2, 1).shape(), (Shape{3, 4, 3}));  // (7+2-3)/2+1, (5+2-3)/2+1
  EXPECT_EQ(conv2d(x, k, 1, 0).shape(), (Shape{3, 5, 3}));
  // Zero padding: a corner output of an all-ones input sees 2x2 in-bounds taps per channel.
  EXPECT_FLOAT_EQ(conv2d(x, k, 1, 1).at(0, 0, 0), 8.0f);
}

TEST(Conv2d, Errors) {
  EXPECT_THROW(conv2d(Tensor({2, 4, 4}), Tensor({1, 3, 3, 3}), 1, 0), ShapeError);
  EXPECT_THROW(conv2d(Tensor({1, 2, 2}), Tensor({1, 1, 3, 3}), 1, 0), GeometryError);
  EXPECT_THROW(conv2d(Tensor({1, 4, 4}), Tensor({1, 1, 3, 3}), 0, 0), GeometryError);
  EXPECT_THROW(conv2d(Tensor({1, 4, 4}), Tensor({1, 1, 3, 3}), 1, -1), GeometryError);
}

// Direct nested-loop cross-correlation used as an independent reference.
Tensor naive_conv(const Tensor& x, const Tensor& k, long stride, long pad) {
  const long ci = static_cast<long>(x.dim(0)), h = static_cast<long>(x.dim(1)), w = static_cast<long>(x.dim(2));
  const long co = static_cast<long>(k.dim(0)), kh = static_cast<long>(k.dim(2)), kw = static_cast<long>(k.dim(3));
  const long oh = (h + 2 * pad - kh) / stride + 1, ow = (w + 2 * pad - kw) / stride + 1;
  Tensor out({static_cast<std::size_t>(co), static_cast<std::size_t>(oh), static_cast<std::size_t>(ow)});
  for (long o = 0; o < co; ++o)
    for (long r = 0; r < oh; ++r)
      for (long c = 0; c < ow; ++c) {
        double s = 0;
        for (long i = 0; i < ci; ++i)
          for (long a = 0; a < kh; ++a)
            for (long b = 0; b < kw; ++b) {
              const long y = r * stride - pad + a, xx = c * stride - pad + b;
              if (y < 0 || y >= h || xx < 0 || xx >= w) continue;
              s += static_cast<double>(x.at(i, y, xx)) * k.data()[((o * ci + i) * kh + a) * kw + b];
            }
        out.at(o, r, c) = static_cast<float>(s);
      }
  return out;
}

TEST(Conv2d, MatchesNaiveLoopOnRandomInputs) {
  for (std::uint64_t trial = 0; trial < 50; ++trial) {
    CounterRng rng({99, trial});
    const std::size_t ci = 1 + rng.below(3), co = 1 + rng.below(3), k = 1 + rng.below(3);
    const long stride = 1 + static_cast<long>(rng.below(2)), pad = static_cast<long>(rng.below(2));
    Tensor x({ci, k + rng.below(5), k + rng.below(5)}), kern({co, ci, k, k});
    for (float& v : x.data()) v = static_cast<float>(rng.uniform(-1, 1));
    for (float& v : kern.data()) v = static_cast<float>(rng.uniform(-1, 1));
    const Tensor fast = conv2d(x, kern, stride, pad), ref = naive_conv(x, kern, stride, pad);
    ASSERT_EQ(fast.shape(), ref.shape());
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(fast[i], ref[i], 1e-5);
  }
}

TEST(Relu, Elementwise) { expect_near_all(relu(vec({-1, 0, 2})), {0, 0, 2}, 0.0); }

TEST(MaxPool, WindowMaxAndFirstTie) {
  const Tensor x = grid(1, 4, 4, {1, 2, 5, 5, 3, 4, 0, 1, 9, 0, 2, 2, 0, 0, 2, 2});
  std::vector<std::size_t> arg;
  const Tensor out = maxpool2d(x, 2, 2, &arg);
  expect_near_all(out, {4, 5, 9, 2}, 0.0);
  EXPECT_EQ(arg[1], 2u);   // first of the tied 5s
  EXPECT_EQ(arg[3], 10u);  // first of the four tied 2s
  EXPECT_THROW(maxpool2d(Tensor({1, 2, 2}), 3, 1), GeometryError);
}

TEST(GlobalAvgPool, ConstantChannels) {
  const Tensor x = grid(2, 2, 2, {3, 3, 3, 3, -1, -1, -1, -1});
  expect_near_all(global_avg_pool(x), {3, -1}, 0.0);
}

TEST(Dense, IdentityAndMismatch) {
  const Tensor w({2, 2}, std::vector<float>{1, 0, 0, 1});
  expect_near_all(dense(vec({1, 2}), w, vec({0, 0})), {1, 2}, 0.0);
  EXPECT_THROW(dense(vec({1, 2, 3}), w, vec({0, 0})), ShapeError);
  EXPECT_THROW(dense(vec({1, 2}), w, vec({0})), ShapeError);
}

TEST(Softmax, Examples) {
  expect_near_all(softmax(vec({0, 0})), {0.5f, 0.5f}, 1e-7);
  expect_near_all(softmax(vec({1000, 1000, 1000})), {1 / 3.f, 1 / 3.f, 1 / 3.f}, 1e-7);
  const double p = 1.0 / (1.0 + std::exp(-2.0));  // logistic at 2
  expect_near_all(softmax(vec({2, 0})), {0.880797f, 0.119203f}, 1e-6);
  EXPECT_NEAR(softmax(vec({2, 0}))[0], p, 1e-7);
}

TEST(Softmax, ShiftInvariantArgmax) {
  for (std::uint64_t t = 0; t < 200; ++t) {
    CounterRng rng({5, t});
    Tensor z({1 + rng.below(8)});
    for (float& v : z.data()) v = static_cast<float>(rng.uniform(-20, 20));
    Tensor shifted = z;
    const float c = static_cast<float>(rng.uniform(-50, 50));
    for (float& v : shifted.data()) v += c;
    EXPECT_EQ(argmax(softmax(z)), argmax(softmax(shifted)));
  }
}

TEST(CrossEntropy, Examples) {
  EXPECT_NEAR(cross_entropy(Tensor({10}, 0.1f), 7), std::log(10.0), 1e-6);
  EXPECT_EQ(cross_entropy(vec({1, 0}), 0), 0.0);
  EXPECT_NEAR(cross_entropy(vec({0.880797f, 0.119203f}), 1), 2.126928, 1e-5);
  EXPECT_NEAR(cross_entropy(vec({1, 0}), 1), -std::log(kProbabilityFloor), 1e-9);
  EXPECT_THROW(cross_entropy(vec({0.5f, 0.5f}), 2), ValueError);
}

TEST(CrossEntropy, MatchesLogSumExpForm) {
  const Tensor z = vec({1.5f, -0.5f, 3.0f});
  for (std::size_t y = 0; y < 3; ++y) {
    EXPECT_NEAR(cross_entropy(softmax(z), y), log_sum_exp(z.data()) - z[y], 1e-5);
    EXPECT_NEAR(nll_from_logits(z, y), log_sum_exp(z.data()) - z[y], 1e-12);
  }
}

TEST(Argmax, LowestIndexOnTies) {
  EXPECT_EQ(argmax(vec({1, 3, 3, 2})), 1u);
  EXPECT_EQ(argmax(vec({0, 0})), 0u);
}

TEST(Reductions, RepeatedRunsBitwiseIdentical) {
  CounterRng rng({17});
  Tensor x({4, 9, 9}), k({8, 4, 3, 3});
  for (float& v : x.data()) v = static_cast<float>(rng.normal());
  for (float& v : k.data()) v = static_cast<float>(rng.normal());
  const Tensor a = global_avg_pool(conv2d(x, k, 1, 1));
  const Tensor b = global_avg_pool(conv2d(x, k, 1, 1));
  EXPECT_TRUE(bitwise_equal(a, b));
}

}  // namespace
}  // namespace metta
