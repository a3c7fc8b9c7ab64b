#include <atwb/model.hpp>
#include <atwb/ops.hpp>

#include <gtest/gtest.h>

#include <cmath>

#include "support/check_support.hpp"

using namespace atwb;
using atwb::check::random_tensor;

namespace {

ModelConfig small_config(HeadKind head, std::uint64_t seed = 1) {
  ModelConfig c;
  c.channels = 1;
  c.height = 32;
  c.width = 32;
  c.class_count = 2;
  c.head = head;
  c.stage_channels = {4, 6, 8};
  c.blocks_per_stage = 2;
  c.attention_heads = 16;
  c.init_seed = seed;
  return c;
}

// conv weights + biases, summed layer by layer.
std::size_t expected_parameter_count(const ModelConfig& c) {
  auto conv = [](std::size_t out, std::size_t in, std::size_t k) { return out * in * k * k + out; };
  std::size_t total = conv(c.stage_channels[0], c.channels, 3);
  std::size_t in = c.stage_channels[0];
  for (std::size_t out : c.stage_channels) {
    for (std::size_t b = 0; b < c.blocks_per_stage; ++b) {
      total += conv(out, in, 3) + conv(out, out, 3);
      if (b == 0) total += conv(out, in, 1);
      in = out;
    }
  }
  if (c.head == HeadKind::attention) {
    total += c.attention_heads * in * 9 + 1;
    total += 2 * in * c.class_count + c.class_count;
  } else {
    total += in * c.class_count + c.class_count;
  }
  return total;
}

}  // namespace

TEST(ModelBuilder, ParameterCountMatchesClosedForm) {
  for (HeadKind head : {HeadKind::baseline, HeadKind::attention}) {
    auto config = small_config(head);
    EXPECT_EQ(ModelGraph<float>(config).parameter_count(), expected_parameter_count(config));
    config.stage_channels = {16, 32, 64};
    config.class_count = 3;
    EXPECT_EQ(ModelGraph<float>(config).parameter_count(), expected_parameter_count(config));
  }
  const auto base = ModelGraph<float>(small_config(HeadKind::baseline)).parameter_count();
  const auto attn = ModelGraph<float>(small_config(HeadKind::attention)).parameter_count();
  EXPECT_GT(attn, base);
}

TEST(ModelBuilder, LogitsShapeAndGammaStartsAtZero) {
  const ModelGraph<float> attn(small_config(HeadKind::attention));
  EXPECT_EQ(attn.parameters().at("attn.gamma").value()[0], 0.0F);
  EXPECT_EQ(attn.parameters().at("attn.kernel").shape(), (Shape{16, 8, 3, 3}));
  EXPECT_EQ(attn.evaluate_logits(Tensor<float>({5, 1, 32, 32}, 0.5F)).shape(), (Shape{5, 2}));
  const ModelGraph<float> base(small_config(HeadKind::baseline));
  EXPECT_EQ(base.evaluate_logits(Tensor<float>({3, 1, 32, 32}, 0.5F)).shape(), (Shape{3, 2}));
  EXPECT_FALSE(base.parameters().contains("attn.gamma"));
  EXPECT_EQ(base.default_cam_layer(), "stage3.block2");
  EXPECT_EQ(base.layers().size(), 8u);
}

TEST(ModelBuilder, BiasesStartAtZeroAndWeightsWithinKaimingBound) {
  const ModelGraph<double> model(small_config(HeadKind::attention));
  for (const auto& p : model.parameters()) {
    const auto& shape = p.var.shape();
    if (p.name.ends_with(".bias") || p.name == "attn.gamma") {
      for (double v : p.var.value().values()) EXPECT_EQ(v, 0.0) << p.name;
      continue;
    }
    const std::size_t fan_in = shape.size() == 4 ? shape[1] * shape[2] * shape[3] : shape[0];
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (double v : p.var.value().values()) EXPECT_LE(std::abs(v), bound) << p.name;
  }
}

TEST(ModelBuilder, InvalidConfigsAreRejected) {
  auto c = small_config(HeadKind::baseline);
  c.height = 20;
  EXPECT_THROW(ModelGraph<float>{c}, ValueError);
  c = small_config(HeadKind::baseline);
  c.class_count = 1;
  EXPECT_THROW(ModelGraph<float>{c}, ValueError);
  c = small_config(HeadKind::attention);
  c.height = 8;
  c.width = 8;  // 1x1 feature grid cannot be max pooled
  EXPECT_THROW(ModelGraph<float>{c}, ValueError);
  c = small_config(HeadKind::baseline);
  c.stage_channels = {};
  EXPECT_THROW(ModelGraph<float>{c}, ValueError);
  EXPECT_THROW(parse_head_kind("resnet"), ValueError);
}

TEST(ModelBuilder, HeadsShareABitwiseIdenticalBackbone) {
  const ModelGraph<float> base(small_config(HeadKind::baseline, 42));
  const ModelGraph<float> attn(small_config(HeadKind::attention, 42));
  std::size_t shared = 0;
  for (const auto& p : base.parameters()) {
    if (p.name.starts_with("head.")) continue;
    ASSERT_TRUE(attn.parameters().contains(p.name));
    EXPECT_TRUE(p.var.value().bitwise_equal(attn.parameters().at(p.name).value())) << p.name;
    ++shared;
  }
  EXPECT_EQ(shared, base.parameters().size() - 2);
  const ModelGraph<float> other(small_config(HeadKind::baseline, 43));
  EXPECT_FALSE(other.parameters().at("stem.conv.weight").value().bitwise_equal(
      base.parameters().at("stem.conv.weight").value()));
}

TEST(ModelBuilder, ShapeMismatchThrows) {
  const ModelGraph<float> model(small_config(HeadKind::baseline));
  EXPECT_THROW(model.evaluate_logits(Tensor<float>({1, 1, 16, 32})), ShapeError);
  EXPECT_THROW(model.evaluate_logits(Tensor<float>({1, 3, 32, 32})), ShapeError);
  EXPECT_THROW(model.evaluate_logits(Tensor<float>({32, 32})), ShapeError);
  EXPECT_THROW(model.layer_index("nope"), ValueError);
}

TEST(Forward, IdenticalImagesGiveIdenticalRows) {
  for (HeadKind head : {HeadKind::baseline, HeadKind::attention}) {
    ModelGraph<float> model(small_config(head));
    if (head == HeadKind::attention) model.parameters().at("attn.gamma").value()[0] = 0.5F;
    Prng rng(3);
    const auto image = random_tensor({1, 1, 32, 32}, rng, 0.0, 1.0).cast<float>();
    Tensor<float> batch({3, 1, 32, 32});
    for (std::size_t n = 0; n < 3; ++n) {
      for (std::size_t i = 0; i < 1024; ++i) batch[n * 1024 + i] = n == 1 ? 0.25F : image[i];
    }
    const auto logits = model.evaluate_logits(batch);
    EXPECT_EQ(logits[0], logits[4]);
    EXPECT_EQ(logits[1], logits[5]);
  }
}

TEST(Forward, EvaluationIsBitwiseRepeatableAndBatchIndependent) {
  ModelGraph<float> model(small_config(HeadKind::attention));
  model.parameters().at("attn.gamma").value()[0] = 0.5F;
  Prng rng(4);
  const auto batch = random_tensor({70, 1, 32, 32}, rng, 0.0, 1.0).cast<float>();
  const auto a = model.evaluate_logits(batch);
  const auto b = model.evaluate_logits(batch);
  EXPECT_TRUE(a.bitwise_equal(b));
  const auto single = model.evaluate_logits(batch.slice_rows(69, 70));
  EXPECT_EQ(single[0], a[138]);
  EXPECT_EQ(single[1], a[139]);
}

TEST(Forward, SoftmaxRowsSumToOne) {
  const ModelGraph<double> model(small_config(HeadKind::baseline));
  Prng rng(5);
  const auto probs = softmax_rows(model.evaluate_logits(random_tensor({6, 1, 32, 32}, rng, 0.0, 1.0)));
  for (std::size_t n = 0; n < 6; ++n) EXPECT_NEAR(probs[2 * n] + probs[2 * n + 1], 1.0, 1e-6);
}

TEST(Forward, TrainingModeNeedsARandomStream) {
  const ModelGraph<float> model(small_config(HeadKind::attention));
  Tape<float> tape;
  EXPECT_THROW(model.forward(tape, Var<float>::constant(Tensor<float>({1, 1, 32, 32})), ForwardOptions{true, nullptr}),
               ValueError);
}

TEST(Predict, ArgmaxWithLowerIndexTieBreak) {
  EXPECT_EQ(argmax_rows(Tensor<double>({1, 2}, std::vector<double>{0.1, 0.9})), (std::vector<int>{1}));
  EXPECT_EQ(argmax_rows(Tensor<double>({1, 2}, std::vector<double>{0.5, 0.5})), (std::vector<int>{0}));
  EXPECT_EQ(argmax_rows(Tensor<double>({1, 3}, std::vector<double>{0.2, 0.7, 0.7})), (std::vector<int>{1}));
  Prng rng(6);
  const auto logits = random_tensor({50, 4}, rng, -3.0, 3.0);
  EXPECT_EQ(argmax_rows(logits), argmax_rows(softmax_rows(logits)));
}

TEST(Predict, AgreesWithLogits) {
  const ModelGraph<float> model(small_config(HeadKind::baseline));
  Prng rng(7);
  const auto batch = random_tensor({10, 1, 32, 32}, rng, 0.0, 1.0).cast<float>();
  EXPECT_EQ(model.predict(batch), argmax_rows(model.evaluate_logits(batch)));
}

TEST(ParameterSet, CopiesAreDeep) {
  ModelGraph<float> model(small_config(HeadKind::attention));
  ModelGraph<float> copy = model;
  copy.parameters().at("stem.conv.weight").value()[0] += 1.0F;
  EXPECT_NE(copy.parameters().at("stem.conv.weight").value()[0],
            model.parameters().at("stem.conv.weight").value()[0]);
  ParameterSet<float> set;
  set.add("a", Var<float>::leaf(Tensor<float>({2}), true));
  EXPECT_THROW(set.add("a", Var<float>::leaf(Tensor<float>({2}), true)), ValueError);
  EXPECT_THROW(set.at("b"), ValueError);
}

TEST(ParameterSet, ConvertedModelKeepsValues) {
  const ModelGraph<float> model(small_config(HeadKind::baseline));
  const auto wide = model.converted<double>();
  const auto& a = model.parameters().at("head.dense.weight").value();
  const auto& b = wide.parameters().at("head.dense.weight").value();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(static_cast<double>(a[i]), b[i]);
}

TEST(ModelConfig, JsonRoundTrip) {
  auto c = small_config(HeadKind::attention, 77);
  c.dropout_p = 0.25;
  const auto back = ModelConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.head, HeadKind::attention);
  EXPECT_EQ(back.init_seed, 77u);
}

// Whole network, every parameter and the input, in double precision.
TEST(GradientCheck, FullModelMicroConfigBothHeads) {
  for (HeadKind head : {HeadKind::baseline, HeadKind::attention}) {
    ModelConfig c;
    c.height = 8;
    c.width = 8;
    c.head = head;
    c.stage_channels = head == HeadKind::attention ? std::vector<std::size_t>{2, 3}
                                                   : std::vector<std::size_t>{2, 3, 3};
    c.blocks_per_stage = 2;
    c.attention_heads = 2;
    ModelGraph<double> model(c);
    std::vector<std::string> names;
    for (const auto& p : model.parameters()) names.push_back(p.name);

    Prng rng(8);
    bool checked = false;
    for (int trial = 0; trial < 40 && !checked; ++trial) {
      c.init_seed = 100 + static_cast<std::uint64_t>(trial);
      ModelGraph<double> candidate(c);
      if (head == HeadKind::attention) candidate.parameters().at("attn.gamma").value()[0] = 0.8;
      for (const auto& name : names) {
        if (name.ends_with(".bias")) {
          for (auto& v : candidate.parameters().at(name).value().values()) v = rng.uniform(-0.1, 0.1);
        }
      }
      const auto images = random_tensor({2, 1, 8, 8}, rng, 0.0, 1.0);
      const std::vector<int> labels{0, 1};
      const check::ScalarFn f = [&](Tape<double>& t, const std::vector<Var<double>>& in) {
        for (std::size_t i = 0; i < names.size(); ++i) candidate.parameters().at(names[i]) = in[i + 1];
        const auto logits = candidate.forward(t, in[0], ForwardOptions{false, nullptr, true});
        return softmax_cross_entropy<double>(t, logits, labels).loss;
      };
      std::vector<Tensor<double>> inputs{images};
      for (const auto& name : names) inputs.push_back(candidate.parameters().at(name).value());

      std::vector<Var<double>> probe_in;
      for (const auto& t : inputs) probe_in.push_back(Var<double>::constant(t));
      Tape<double> probe;
      f(probe, probe_in);
      if (check::kink_margin(probe) < 1e-3) continue;

      const auto result = check::gradient_check(f, inputs, 1e-4);
      EXPECT_LT(result.max_relative_error, 1e-4) << to_string(head) << " " << result.worst;
      EXPECT_GT(result.checked, 100u);
      checked = true;
    }
    EXPECT_TRUE(checked) << "no draw cleared the kink margin for " << to_string(head);
  }
}
