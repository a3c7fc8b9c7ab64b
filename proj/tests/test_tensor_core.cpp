#include <atwb/autograd.hpp>
#include <atwb/ops.hpp>
#include <atwb/prng.hpp>
#include <atwb/tensor.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "support/check_support.hpp"

using namespace atwb;
using atwb::check::gradient_check;
using atwb::check::random_tensor;

namespace {

constexpr double kH = 1e-4;
constexpr double kTolerance = 1e-5;

Tensor<double> away_from_zero(const Shape& shape, Prng& rng) {
  Tensor<double> t(shape);
  for (auto& v : t.values()) {
    const double magnitude = rng.uniform(0.05, 1.0);
    v = rng.bernoulli(0.5) ? magnitude : -magnitude;
  }
  return t;
}

// Distinct values with at least `gap` between any two, shuffled.
Tensor<double> distinct_values(const Shape& shape, Prng& rng, double gap = 0.01) {
  Tensor<double> t(shape);
  std::vector<std::size_t> order(t.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  shuffle_in_place(order, rng);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = gap * static_cast<double>(order[i]) - 0.5;
  return t;
}

}  // namespace

TEST(Tensor, RejectsZeroExtentsAndCountMismatch) {
  EXPECT_THROW(Tensor<float>({2, 0, 3}), ShapeError);
  EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>(3)), ShapeError);
  Tensor<float> t({2, 3}, 1.5f);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(element_count(t.shape()), t.size());
}

TEST(Tensor, SliceReshapeAndStack) {
  Tensor<int> t({3, 2}, std::vector<int>{0, 1, 2, 3, 4, 5});
  const auto mid = t.slice_rows(1, 3);
  EXPECT_EQ(mid.shape(), (Shape{2, 2}));
  EXPECT_EQ(mid[0], 2);
  EXPECT_THROW(t.slice_rows(2, 4), ShapeError);
  EXPECT_EQ(t.reshaped({6}).shape(), (Shape{6}));
  EXPECT_THROW(t.reshaped({4}), ShapeError);
  const std::vector<Tensor<int>> rows{mid, mid};
  const auto stacked = stack_rows<int>(rows);
  EXPECT_EQ(stacked.shape(), (Shape{2, 2, 2}));
  EXPECT_EQ(stacked[4], 2);
}

TEST(Prng, SameSeedSameStreamAndDerivedStreamsDiffer) {
  Prng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) {
    const auto va = a.next_u64();
    EXPECT_EQ(va, b.next_u64());
    EXPECT_NE(va, c.next_u64());
  }
  EXPECT_NE(derive_seed(1, {0}), derive_seed(1, {1}));
  EXPECT_NE(derive_seed(1, {0, 1}), derive_seed(1, {1, 0}));
  Prng u(9);
  for (int i = 0; i < 1000; ++i) {
    const double v = u.uniform();
    EXPECT_GE(v, 0.0);
    EXPECT_LT(v, 1.0);
    EXPECT_LT(u.below(7), 7u);
  }
}

TEST(Prng, ShuffleIsAPermutation) {
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  Prng rng(3);
  shuffle_in_place(v, rng);
  EXPECT_EQ(std::set<int>(v.begin(), v.end()).size(), 50u);
  std::vector<int> w(50);
  std::iota(w.begin(), w.end(), 0);
  Prng again(3);
  shuffle_in_place(w, again);
  EXPECT_EQ(v, w);
}

TEST(Conv2d, OnesKernelSumsWindows) {
  Tape<double> tape;
  const auto x = Var<double>::constant(Tensor<double>({1, 1, 3, 3}, 1.0));
  const auto k = Var<double>::constant(Tensor<double>({1, 1, 2, 2}, 1.0));
  const auto y = conv2d(tape, x, k, Var<double>(), {1, 0});
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  for (double v : y.value().values()) EXPECT_EQ(v, 4.0);
}

TEST(Conv2d, CenteredDeltaKernelIsIdentity) {
  Prng rng(1);
  Tape<double> tape;
  const auto x = Var<double>::constant(random_tensor({2, 1, 5, 5}, rng));
  Tensor<double> delta({1, 1, 3, 3}, 0.0);
  delta.at(0, 0, 1, 1) = 1.0;
  const auto y = conv2d(tape, x, Var<double>::constant(delta), Var<double>(), {1, 1});
  EXPECT_TRUE(y.value().bitwise_equal(x.value()));
}

TEST(Conv2d, MatchesDirectLoopOracle) {
  Prng rng(2);
  for (std::size_t stride : {1u, 2u}) {
    for (std::size_t pad : {0u, 1u}) {
      const auto x = random_tensor({1, 2, 5, 5}, rng);
      const auto k = random_tensor({3, 2, 3, 3}, rng);
      const auto b = random_tensor({3}, rng);
      Tape<double> tape;
      const auto y = conv2d(tape, Var<double>::constant(x), Var<double>::constant(k),
                            Var<double>::constant(b), {stride, pad});
      EXPECT_LE(check::max_abs_diff(y.value(), check::naive_conv2d(x, k, &b, stride, pad)), 1e-6);
    }
  }
}

TEST(Conv2d, ShapeErrorsNameTheAxis) {
  Tape<float> tape;
  const auto x = Var<float>::constant(Tensor<float>({1, 2, 4, 4}));
  const auto k = Var<float>::constant(Tensor<float>({1, 3, 3, 3}));
  try {
    conv2d(tape, x, k, Var<float>());
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("C"), std::string::npos);
  }
  const auto big = Var<float>::constant(Tensor<float>({1, 2, 5, 5}));
  EXPECT_THROW(conv2d(tape, x, big, Var<float>()), ShapeError);
}

TEST(MaxPool, ValuesOracleAndErrors) {
  Tape<double> tape;
  const auto small = Var<double>::constant(Tensor<double>({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4}));
  EXPECT_EQ(maxpool2d(tape, small).value()[0], 4.0);
  const auto constant = Var<double>::constant(Tensor<double>({1, 2, 4, 4}, 0.25));
  const auto pooled = maxpool2d(tape, constant);
  for (double v : pooled.value().values()) EXPECT_EQ(v, 0.25);
  Prng rng(4);
  const auto x = random_tensor({2, 3, 4, 4}, rng);
  EXPECT_EQ(check::max_abs_diff(maxpool2d(tape, Var<double>::constant(x)).value(),
                                  check::naive_maxpool2d(x, 2, 2)),
            0.0);
  EXPECT_THROW(maxpool2d(tape, Var<double>::constant(Tensor<double>({1, 1, 5, 4}))), ShapeError);
}

TEST(Dense, IdentityZeroWeightAndOracle) {
  Prng rng(5);
  Tape<double> tape;
  const auto x = random_tensor({3, 4}, rng);
  Tensor<double> eye({4, 4}, 0.0);
  for (std::size_t i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
  const auto zero_bias = Var<double>::constant(Tensor<double>({4}, 0.0));
  EXPECT_TRUE(dense(tape, Var<double>::constant(x), Var<double>::constant(eye), zero_bias).value().bitwise_equal(x));
  const auto b = random_tensor({4}, rng);
  const auto rows = dense(tape, Var<double>::constant(x), Var<double>::constant(Tensor<double>({4, 4}, 0.0)),
                          Var<double>::constant(b));
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(rows.value()[r * 4 + j], b[j]);
  const auto w = random_tensor({4, 2}, rng);
  const auto b2 = random_tensor({2}, rng);
  EXPECT_LE(check::max_abs_diff(
                dense(tape, Var<double>::constant(x), Var<double>::constant(w), Var<double>::constant(b2)).value(),
                check::naive_dense(x, w, &b2)),
            1e-12);
  EXPECT_THROW(dense(tape, Var<double>::constant(x), Var<double>::constant(Tensor<double>({3, 2})),
                     Var<double>::constant(b2)),
               ShapeError);
}

TEST(Elementwise, ReluConcatAndGlobalAveragePool) {
  Tape<double> tape;
  const auto r = relu(tape, Var<double>::constant(Tensor<double>({3}, std::vector<double>{-1, 0, 2})));
  EXPECT_EQ(r.value(), (Tensor<double>({3}, std::vector<double>{0, 0, 2})));

  const auto a = Var<double>::constant(Tensor<double>({1, 3, 4, 4}, 1.0));
  const auto b = Var<double>::constant(Tensor<double>({1, 5, 4, 4}, 2.0));
  const auto c = concat_channels(tape, a, b);
  EXPECT_EQ(c.shape(), (Shape{1, 8, 4, 4}));
  EXPECT_EQ(c.value().at(0, 2, 3, 3), 1.0);
  EXPECT_EQ(c.value().at(0, 3, 0, 0), 2.0);
  EXPECT_THROW(concat_channels(tape, a, Var<double>::constant(Tensor<double>({1, 5, 2, 4}))), ShapeError);

  const auto flat = global_avg_pool(tape, Var<double>::constant(Tensor<double>({2, 3, 4, 4}, 0.7)));
  for (double v : flat.value().values()) EXPECT_NEAR(v, 0.7, 1e-15);
  Prng rng(6);
  const auto x = random_tensor({2, 3, 4, 5}, rng);
  const auto g = global_avg_pool(tape, Var<double>::constant(x));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t ch = 0; ch < 3; ++ch) {
      double mean = 0.0;
      for (std::size_t i = 0; i < 20; ++i) mean += x[(n * 3 + ch) * 20 + i];
      EXPECT_NEAR(g.value()[n * 3 + ch], mean / 20.0, 1e-12);
    }
}

TEST(Dropout, IdentityCasesErrorsAndExpectation) {
  Prng rng(7);
  Tape<float> tape;
  const auto x = Var<float>::constant(Tensor<float>({1000}, 3.0f));
  EXPECT_TRUE(dropout(tape, x, 0.0, rng, true).value().bitwise_equal(x.value()));
  EXPECT_TRUE(dropout(tape, x, 0.9, rng, false).value().bitwise_equal(x.value()));
  EXPECT_THROW(dropout(tape, x, 1.0, rng, true), ValueError);
  EXPECT_THROW(dropout(tape, x, -0.1, rng, true), ValueError);

  const auto ones = Var<float>::constant(Tensor<float>({1000000}, 1.0f));
  const auto y = dropout(tape, ones, 0.5, rng, true);
  double mean = 0.0;
  for (float v : y.value().values()) {
    EXPECT_TRUE(v == 0.0f || v == 2.0f);
    mean += v;
  }
  mean /= 1e6;
  EXPECT_GE(mean, 0.99);
  EXPECT_LE(mean, 1.01);
}

TEST(CrossEntropy, KnownValuesAndErrors) {
  Tape<double> tape;
  const std::vector<int> label{2};
  const auto uniform = softmax_cross_entropy(tape, Var<double>::constant(Tensor<double>({1, 4}, 0.3)), label);
  EXPECT_NEAR(uniform.loss.value()[0], std::log(4.0), 1e-12);
  const auto confident = softmax_cross_entropy(
      tape, Var<double>::constant(Tensor<double>({1, 4}, std::vector<double>{0, 0, 100, 0})), label);
  EXPECT_LT(confident.loss.value()[0], 1e-6);

  Prng rng(8);
  const auto logits = random_tensor({5, 3}, rng, -20, 20);
  const std::vector<int> labels{0, 1, 2, 1, 0};
  const auto ce = softmax_cross_entropy(tape, Var<double>::constant(logits), labels);
  for (std::size_t r = 0; r < 5; ++r) {
    double row = 0.0;
    for (std::size_t k = 0; k < 3; ++k) row += ce.probabilities[r * 3 + k];
    EXPECT_NEAR(row, 1.0, 1e-6);
  }
  EXPECT_GE(ce.loss.value()[0], 0.0);
  const std::vector<int> bad{0, 1, 3, 1, 0};
  EXPECT_THROW(softmax_cross_entropy(tape, Var<double>::constant(logits), bad), ValueError);
}

TEST(CrossEntropy, GradientIsWeightedProbabilityMinusOneHot) {
  Prng rng(9);
  const auto logits = random_tensor({4, 3}, rng, -2, 2);
  const std::vector<int> labels{0, 2, 1, 2};
  const Tensor<double> weights({3}, std::vector<double>{0.5, 1.0, 1.5});
  Tape<double> tape;
  auto x = Var<double>::leaf(logits, true);
  const auto ce = softmax_cross_entropy(tape, x, labels, &weights);
  tape.backward(ce.loss);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t k = 0; k < 3; ++k) {
      const double y = static_cast<int>(k) == labels[r] ? 1.0 : 0.0;
      const double expected = (ce.probabilities[r * 3 + k] - y) * weights[labels[r]] / 4.0;
      EXPECT_NEAR(x.grad()[r * 3 + k], expected, 1e-14);
    }
  const auto check = gradient_check(
      [&](Tape<double>& t, const std::vector<Var<double>>& in) {
        return softmax_cross_entropy(t, in[0], labels, &weights).loss;
      },
      {logits}, kH);
  EXPECT_LT(check.max_relative_error, kTolerance) << check.worst;
}

TEST(Backward, SumGivesOnesAndFanOutAccumulates) {
  Tape<double> tape;
  auto x = Var<double>::leaf(Tensor<double>({2, 3}, 0.5), true);
  tape.backward(sum(tape, x));
  for (double g : x.grad().values()) EXPECT_EQ(g, 1.0);

  Tape<double> fan;
  auto y = Var<double>::leaf(Tensor<double>({3}, std::vector<double>{1, 2, 3}), true);
  fan.backward(sum(fan, add(fan, y, y)));
  for (double g : y.grad().values()) EXPECT_EQ(g, 2.0);
}

TEST(Backward, ConstantsGetNoBufferAndNonScalarLossThrows) {
  Tape<double> tape;
  auto x = Var<double>::leaf(Tensor<double>({1, 1, 2, 2}, 1.0), true);
  const auto k = Var<double>::constant(Tensor<double>({1, 1, 1, 1}, 2.0));
  const auto y = conv2d(tape, x, k, Var<double>());
  EXPECT_THROW(tape.backward(y), Error);
  tape.backward(sum(tape, y));
  EXPECT_FALSE(k.has_grad());
  EXPECT_TRUE(x.has_grad());

  Tape<double> empty;
  EXPECT_THROW(empty.backward(sum(empty, Var<double>::constant(Tensor<double>({2}, 1.0)))), Error);
}

TEST(Backward, RepeatedPassesReplaceGradients) {
  Tape<double> tape;
  auto x = Var<double>::leaf(Tensor<double>({2}, 1.0), true);
  const auto loss = sum(tape, x);
  tape.backward(loss);
  tape.backward(loss);
  for (double g : x.grad().values()) EXPECT_EQ(g, 1.0);
}

// ---- finite-difference checks for every differentiable op -------------------

TEST(GradientCheck, Conv2dAllArgumentsStridesAndPadding) {
  Prng rng(10);
  for (std::size_t stride : {1u, 2u}) {
    for (std::size_t pad : {0u, 1u}) {
      const std::size_t out = (5 + 2 * pad - 3) / stride + 1;
      const auto selector = random_tensor({2, 3, out, out}, rng);
      const auto check = gradient_check(
          [&](Tape<double>& t, const std::vector<Var<double>>& in) {
            return weighted_sum(t, conv2d(t, in[0], in[1], in[2], {stride, pad}), selector);
          },
          {random_tensor({2, 2, 5, 5}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)}, kH);
      EXPECT_LT(check.max_relative_error, kTolerance) << check.worst << " stride " << stride << " pad " << pad;
    }
  }
}

TEST(GradientCheck, MaxPoolDenseReluConcatAndPooling) {
  Prng rng(11);
  const auto w4 = random_tensor({2, 3, 2, 2}, rng);
  auto check = gradient_check(
      [&](Tape<double>& t, const std::vector<Var<double>>& in) { return weighted_sum(t, maxpool2d(t, in[0]), w4); },
      {distinct_values({2, 3, 4, 4}, rng)}, kH);
  EXPECT_LT(check.max_relative_error, kTolerance) << check.worst;

  const auto w2 = random_tensor({3, 2}, rng);
  check = gradient_check(
      [&](Tape<double>& t, const std::vector<Var<double>>& in) {
        return weighted_sum(t, dense(t, in[0], in[1], in[2]), w2);
      },
      {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng), random_tensor({2}, rng)}, kH);
  EXPECT_LT(check.max_relative_error, kTolerance) << check.worst;

  const auto w3 = random_tensor({2, 3, 3}, rng);
  check = gradient_check(
      [&](Tape<double>& t, const std::vector<Var<double>>& in) { return weighted_sum(t, relu(t, in[0]), w3); },
      {away_from_zero({2, 3, 3}, rng)}, kH);
  EXPECT_LT(check.max_relative_error, kTolerance) << check.worst;

  const auto wc = random_tensor({1, 5, 2, 3}, rng);
  check = gradient_check(
      [&](Tape<double>& t, const std::vector<Var<double>>& in) {
        return weighted_sum(t, concat_channels(t, in[0], in[1]), wc);
      },
      {random_tensor({1, 2, 2, 3}, rng), random_tensor({1, 3, 2, 3}, rng)}, kH);
  EXPECT_LT(check.max_relative_error, kTolerance) << check.worst;

  const auto wg = random_tensor({2, 3}, rng);
  check = gradient_check(
      [&](Tape<double>& t, const std::vector<Var<double>>& in) {
        return weighted_sum(t, global_avg_pool(t, in[0]), wg);
      },
      {random_tensor({2, 3, 3, 4}, rng)}, kH);
  EXPECT_LT(check.max_relative_error, kTolerance) << check.worst;
}

TEST(GradientCheck, DropoutWithFixedMask) {
  Prng rng(12);
  const auto w = random_tensor({4, 5}, rng);
  const auto check = gradient_check(
      [&](Tape<double>& t, const std::vector<Var<double>>& in) {
        Prng mask(99);  // same mask on every evaluation
        return weighted_sum(t, dropout(t, in[0], 0.5, mask, true), w);
      },
      {random_tensor({4, 5}, rng)}, kH);
  EXPECT_LT(check.max_relative_error, kTolerance) << check.worst;
}

TEST(GradientCheck, AttentionPrimitives) {
  Prng rng(13);
  const auto w = random_tensor({2, 3, 3, 4}, rng);
  auto check = gradient_check(
      [&](Tape<double>& t, const std::vector<Var<double>>& in) { return weighted_sum(t, add(t, in[0], in[1]), w); },
      {random_tensor({2, 3, 3, 4}, rng), random_tensor({2, 3, 3, 4}, rng)}, kH);
  EXPECT_LT(check.max_relative_error, kTolerance) << check.worst;

  check = gradient_check(
      [&](Tape<double>& t, const std::vector<Var<double>>& in) { return weighted_sum(t, scale(t, in[0], in[1]), w); },
      {random_tensor({1}, rng), random_tensor({2, 3, 3, 4}, rng)}, kH);
  EXPECT_LT(check.max_relative_error, kTolerance) << check.worst;

  check = gradient_check(
      [&](Tape<double>& t, const std::vector<Var<double>>& in) {
        return weighted_sum(t, multiply_spatial(t, in[0], in[1]), w);
      },
      {random_tensor({2, 1, 3, 4}, rng), random_tensor({2, 3, 3, 4}, rng)}, kH);
  EXPECT_LT(check.max_relative_error, kTolerance) << check.worst;

  check = gradient_check(
      [&](Tape<double>& t, const std::vector<Var<double>>& in) {
        return weighted_sum(t, spatial_softmax(t, in[0]), w);
      },
      {random_tensor({2, 3, 3, 4}, rng, -3, 3)}, kH);
  EXPECT_LT(check.max_relative_error, kTolerance) << check.worst;

  const auto w1 = random_tensor({2, 1, 3, 4}, rng);
  check = gradient_check(
      [&](Tape<double>& t, const std::vector<Var<double>>& in) { return weighted_sum(t, sum_channels(t, in[0]), w1); },
      {random_tensor({2, 3, 3, 4}, rng)}, kH);
  EXPECT_LT(check.max_relative_error, kTolerance) << check.worst;

  const auto wr = random_tensor({6, 12}, rng);
  check = gradient_check(
      [&](Tape<double>& t, const std::vector<Var<double>>& in) {
        return weighted_sum(t, reshape(t, in[0], {6, 12}), wr);
      },
      {random_tensor({2, 3, 3, 4}, rng)}, kH);
  EXPECT_LT(check.max_relative_error, kTolerance) << check.worst;
}

TEST(GradientCheck, CompositeConvReluPoolDenseLoss) {
  Prng rng(14);
  const std::vector<int> labels{1, 0, 2};
  for (int attempt = 0;; ++attempt) {
    ASSERT_LT(attempt, 50) << "no kink-free sample found";
    const std::vector<Tensor<double>> inputs{random_tensor({3, 2, 6, 6}, rng), random_tensor({4, 2, 3, 3}, rng),
                                             random_tensor({4}, rng), random_tensor({4, 3}, rng),
                                             random_tensor({3}, rng)};
    auto f = [&](Tape<double>& t, const std::vector<Var<double>>& in) {
      const auto h = relu(t, conv2d(t, in[0], in[1], in[2], {1, 1}));
      const auto g = global_avg_pool(t, h);
      return softmax_cross_entropy(t, dense(t, g, in[3], in[4]), labels).loss;
    };
    Tape<double> probe;
    std::vector<Var<double>> vars;
    for (const auto& x : inputs) vars.push_back(Var<double>::leaf(x, true));
    f(probe, vars);
    if (check::kink_margin(probe) < 1e-3) continue;
    const auto check = gradient_check(f, inputs, kH);
    EXPECT_LT(check.max_relative_error, kTolerance) << check.worst;
    break;
  }
}
