#include <atwb/model.hpp>
#include <atwb/ops.hpp>
#include <atwb/soft_attention.hpp>

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "support/check_support.hpp"

using namespace atwb;
using atwb::check::gradient_check;
using atwb::check::random_tensor;

namespace {

SoftAttentionBlock<double> make_block(std::size_t channels, std::size_t heads, std::uint64_t seed) {
  Prng rng(seed);
  return SoftAttentionBlock<double>::create(channels, heads, rng);
}

double spatial_sum(const Tensor<double>& t, std::size_t n, std::size_t c) {
  double s = 0.0;
  for (std::size_t h = 0; h < t.dim(2); ++h) {
    for (std::size_t w = 0; w < t.dim(3); ++w) s += t.at(n, c, h, w);
  }
  return s;
}

}  // namespace

TEST(SoftAttention, ConstantFeaturesGiveUniformHeads) {
  auto block = make_block(3, 4, 1);
  Tape<double> tape;
  const auto features = Var<double>::constant(Tensor<double>({2, 3, 4, 6}, 0.3));
  // Zero padding makes border scores differ, so use a kernel that only reads the centre tap.
  Tensor<double> kernel({4, 3, 3, 3});
  for (std::size_t k = 0; k < 4; ++k) {
    for (std::size_t c = 0; c < 3; ++c) kernel.at(k, c, 1, 1) = 0.5 * static_cast<double>(k + c);
  }
  block.kernel = Var<double>::constant(kernel);
  const auto maps = compute_attention(tape, block, features);
  for (double v : maps.heads.value().values()) EXPECT_NEAR(v, 1.0 / 24.0, 1e-15);
  for (double v : maps.alpha.value().values()) EXPECT_NEAR(v, 4.0 / 24.0, 1e-14);
}

TEST(SoftAttention, SingleHeadSinglePixelAlphaIsOne) {
  auto block = make_block(2, 1, 2);
  Tape<double> tape;
  Prng rng(3);
  const auto features = Var<double>::constant(random_tensor({3, 2, 1, 1}, rng));
  const auto maps = compute_attention(tape, block, features);
  for (double v : maps.alpha.value().values()) EXPECT_EQ(v, 1.0);

  block.gamma.value()[0] = 1.0;
  const auto out = soft_attention_forward(tape, block, features);
  EXPECT_TRUE(out.value().bitwise_equal(features.value()));
}

TEST(SoftAttention, EveryHeadSumsToOneOverSpace) {
  auto block = make_block(5, 16, 4);
  Prng rng(5);
  Tape<double> tape;
  const auto features = Var<double>::constant(random_tensor({3, 5, 4, 4}, rng, -3.0, 3.0));
  const auto maps = compute_attention(tape, block, features);
  ASSERT_EQ(maps.heads.shape(), (Shape{3, 16, 4, 4}));
  ASSERT_EQ(maps.alpha.shape(), (Shape{3, 1, 4, 4}));
  for (std::size_t n = 0; n < 3; ++n) {
    for (std::size_t k = 0; k < 16; ++k) EXPECT_NEAR(spatial_sum(maps.heads.value(), n, k), 1.0, 1e-5);
    EXPECT_NEAR(spatial_sum(maps.alpha.value(), n, 0), 16.0, 16e-5);
  }

  Tape<float> ftape;
  Prng frng(4);
  const auto fblock = SoftAttentionBlock<float>::create(5, 16, frng);
  const auto fmaps =
      compute_attention(ftape, fblock, Var<float>::constant(features.value().cast<float>()));
  for (std::size_t n = 0; n < 3; ++n) {
    for (std::size_t k = 0; k < 16; ++k) {
      float s = 0.0F;
      for (std::size_t h = 0; h < 4; ++h) {
        for (std::size_t w = 0; w < 4; ++w) s += fmaps.heads.value().at(n, k, h, w);
      }
      EXPECT_NEAR(s, 1.0F, 1e-5F);
    }
  }
}

TEST(SoftAttention, GammaStartsAtZeroAndZeroesTheOutput) {
  auto block = make_block(4, 16, 6);
  EXPECT_EQ(block.gamma.shape(), (Shape{1}));
  EXPECT_EQ(block.gamma.value()[0], 0.0);
  EXPECT_EQ(block.kernel.shape(), (Shape{16, 4, 3, 3}));
  Prng rng(7);
  Tape<double> tape;
  const auto out = soft_attention_forward(tape, block, Var<double>::constant(random_tensor({2, 4, 4, 4}, rng)));
  EXPECT_EQ(out.shape(), (Shape{2, 4, 4, 4}));
  for (double v : out.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(SoftAttention, ChannelMismatchAndBadConstruction) {
  auto block = make_block(4, 2, 8);
  Tape<double> tape;
  EXPECT_THROW(compute_attention(tape, block, Var<double>::constant(Tensor<double>({1, 3, 4, 4}))), ShapeError);
  EXPECT_THROW(soft_attention_forward(tape, block, Var<double>::constant(Tensor<double>({1, 5, 4, 4}))),
               ShapeError);
  Prng rng(0);
  EXPECT_THROW(SoftAttentionBlock<double>::create(0, 2, rng), ValueError);
  EXPECT_THROW(SoftAttentionBlock<double>::create(2, 0, rng), ValueError);
}

TEST(SoftAttention, GammaGradientEqualsAlphaWeightedFeatureSum) {
  auto block = make_block(3, 4, 9);
  Prng rng(10);
  const auto x = random_tensor({2, 3, 4, 4}, rng);
  block.gamma = Var<double>::leaf(Tensor<double>({1}, 0.4), true);
  Tape<double> tape;
  const auto features = Var<double>::constant(x);
  const auto out = soft_attention_forward(tape, block, features);
  tape.backward(sum(tape, out));
  const double analytic = block.gamma.grad()[0];

  Tape<double> probe;
  const auto alpha = compute_attention(probe, block, features).alpha.value();
  double expected = 0.0;
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t h = 0; h < 4; ++h) {
        for (std::size_t w = 0; w < 4; ++w) expected += alpha.at(n, 0, h, w) * x.at(n, c, h, w);
      }
    }
  }
  EXPECT_NEAR(analytic, expected, 1e-10 * std::max(1.0, std::abs(expected)));

  auto total = [&](double g) {
    auto b = block;
    b.gamma = Var<double>::constant(Tensor<double>({1}, g));
    Tape<double> t;
    double s = 0.0;
    for (double v : soft_attention_forward(t, b, features).value().values()) s += v;
    return s;
  };
  const double h = 1e-4;
  const double numeric = (total(0.4 + h) - total(0.4 - h)) / (2 * h);
  EXPECT_LT(std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-6}), 1e-5);
}

TEST(AttentiveHead, ZeroGammaSplitsIntoZerosAndPooledFeatures) {
  auto block = make_block(3, 16, 11);
  Prng rng(12);
  const auto x = random_tensor({2, 3, 6, 4}, rng);
  Tape<double> tape;
  Prng drop(0);
  const auto out = attentive_head(tape, block, Var<double>::constant(x), 0.5, drop, false);
  ASSERT_EQ(out.shape(), (Shape{2, 6}));
  const auto pooled = check::naive_maxpool2d(x, 2, 2);
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t c = 0; c < 3; ++c) {
      EXPECT_EQ(out.value()[n * 6 + c], 0.0);
      double mean = 0.0;
      for (std::size_t h = 0; h < 3; ++h) {
        for (std::size_t w = 0; w < 2; ++w) mean += std::max(0.0, pooled.at(n, c, h, w));
      }
      EXPECT_NEAR(out.value()[n * 6 + 3 + c], mean / 6.0, 1e-15);
    }
  }
}

TEST(AttentiveHead, WidthIsTwiceTheChannelsForAnyEvenGrid) {
  Prng drop(0);
  for (std::size_t side : {2u, 4u, 8u}) {
    auto block = make_block(5, 3, side);
    Tape<double> tape;
    const auto out =
        attentive_head(tape, block, Var<double>::constant(Tensor<double>({1, 5, side, side + 2})), 0.5, drop, false);
    EXPECT_EQ(out.shape(), (Shape{1, 10}));
  }
}

TEST(AttentiveHead, OddExtentsThrow) {
  auto block = make_block(2, 2, 13);
  Tape<double> tape;
  Prng drop(0);
  EXPECT_THROW(attentive_head(tape, block, Var<double>::constant(Tensor<double>({1, 2, 3, 4})), 0.5, drop, false),
               ShapeError);
  EXPECT_THROW(attentive_head(tape, block, Var<double>::constant(Tensor<double>({1, 2, 4, 5})), 0.5, drop, false),
               ShapeError);
}

TEST(AttentiveHead, MatchesStepByStepRecomputation) {
  auto block = make_block(4, 3, 14);
  block.gamma.value()[0] = 0.7;
  Prng rng(15);
  const auto x = random_tensor({1, 4, 4, 4}, rng, -2.0, 2.0);
  Tape<double> tape;
  Prng drop(0);
  const auto out = attentive_head(tape, block, Var<double>::constant(x), 0.5, drop, false);

  // Scores from a naive convolution, softmax per head by hand, sum over heads.
  const auto scores = check::naive_conv2d(x, block.kernel.value(), nullptr, 1, 1);
  Tensor<double> alpha({1, 1, 4, 4});
  for (std::size_t k = 0; k < 3; ++k) {
    double top = -1e300;
    for (std::size_t h = 0; h < 4; ++h) {
      for (std::size_t w = 0; w < 4; ++w) top = std::max(top, scores.at(0, k, h, w));
    }
    double z = 0.0;
    for (std::size_t h = 0; h < 4; ++h) {
      for (std::size_t w = 0; w < 4; ++w) z += std::exp(scores.at(0, k, h, w) - top);
    }
    for (std::size_t h = 0; h < 4; ++h) {
      for (std::size_t w = 0; w < 4; ++w) alpha.at(0, 0, h, w) += std::exp(scores.at(0, k, h, w) - top) / z;
    }
  }
  Tensor<double> attended(x.shape());
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t h = 0; h < 4; ++h) {
      for (std::size_t w = 0; w < 4; ++w) attended.at(0, c, h, w) = 0.7 * alpha.at(0, 0, h, w) * x.at(0, c, h, w);
    }
  }
  const auto pa = check::naive_maxpool2d(attended, 2, 2);
  const auto pf = check::naive_maxpool2d(x, 2, 2);
  for (std::size_t c = 0; c < 8; ++c) {
    const auto& src = c < 4 ? pa : pf;
    double mean = 0.0;
    for (std::size_t h = 0; h < 2; ++h) {
      for (std::size_t w = 0; w < 2; ++w) mean += std::max(0.0, src.at(0, c % 4, h, w));
    }
    EXPECT_NEAR(out.value()[c], mean / 4.0, 1e-12) << "channel " << c;
  }
}

TEST(AttentiveHead, TrainingDropoutIsSeededAndInert) {
  auto block = make_block(3, 2, 16);
  Prng rng(17);
  const auto x = Var<double>::constant(random_tensor({2, 3, 4, 4}, rng));
  Tape<double> tape;
  Prng a(5);
  Prng b(5);
  const auto ya = attentive_head(tape, block, x, 0.5, a, true);
  const auto yb = attentive_head(tape, block, x, 0.5, b, true);
  EXPECT_TRUE(ya.value().bitwise_equal(yb.value()));
  Prng c(0);
  const auto eval = attentive_head(tape, block, x, 0.5, c, false);
  EXPECT_FALSE(ya.value().bitwise_equal(eval.value()));
}

TEST(AttentiveHead, GradientCheckThroughEveryInput) {
  Prng rng(18);
  for (int trial = 0; trial < 10; ++trial) {
    const auto x = random_tensor({2, 3, 4, 4}, rng, -1.0, 1.0);
    const auto kernel = random_tensor({2, 3, 3, 3}, rng, -0.5, 0.5);
    const auto gamma = Tensor<double>({1}, rng.uniform(0.5, 1.5));
    const auto selector = random_tensor({2, 6}, rng);
    const check::ScalarFn f = [&](Tape<double>& t, const std::vector<Var<double>>& in) {
      SoftAttentionBlock<double> block;
      block.channels = 3;
      block.heads = 2;
      block.kernel = in[1];
      block.gamma = in[2];
      Prng drop(0);
      return weighted_sum(t, attentive_head(t, block, in[0], 0.5, drop, false), selector);
    };
    Tape<double> probe;
    f(probe, {Var<double>::constant(x), Var<double>::constant(kernel), Var<double>::constant(gamma)});
    if (check::kink_margin(probe) < 1e-3) continue;
    const auto result = gradient_check(f, {x, kernel, gamma}, 1e-4);
    EXPECT_LT(result.max_relative_error, 1e-5) << result.worst;
    return;
  }
  FAIL() << "no sample cleared the kink margin";
}

TEST(AttentiveHead, ZeroGammaLogitsIgnoreTheAttentionKernel) {
  ModelConfig config;
  config.height = 16;
  config.width = 16;
  config.stage_channels = {4, 8};
  config.blocks_per_stage = 1;
  config.head = HeadKind::attention;
  config.init_seed = 19;
  ModelGraph<double> model(config);
  Prng rng(20);
  const auto batch = random_tensor({3, 1, 16, 16}, rng, 0.0, 1.0);
  const auto reference = model.evaluate_logits(batch);
  for (int trial = 0; trial < 20; ++trial) {
    auto& kernel = model.parameters().at("attn.kernel").value();
    for (auto& v : kernel.values()) v = rng.uniform(-5.0, 5.0);
    EXPECT_TRUE(model.evaluate_logits(batch).bitwise_equal(reference)) << "trial " << trial;
  }
}
