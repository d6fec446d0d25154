#include <gtest/gtest.h>

#include "support.hpp"

using namespace backx;

namespace {

ModelHandle two_pixel_model(std::vector<double> w, std::vector<double> b = {}) {
  return make_linear_model({1, 1, 2}, w.size() / 2, w, b);
}

ImageBatch separable_set(std::size_t n, std::uint64_t seed) {
  // Class 0: bright left half, class 1: bright right half.
  ImageBatch b{Tensor({n, 1, 4, 4}), {}, {}};
  Rng rng(seed);
  std::uniform_real_distribution<double> noise(0.0, 0.2);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y = i % 2;
    for (std::size_t p = 0; p < 16; ++p) {
      const bool left = p % 4 < 2;
      b.pixels[i * 16 + p] = ((left == (y == 0)) ? 0.8 : 0.0) + noise(rng);
    }
    b.labels.push_back(y);
  }
  return b;
}

}  // namespace

TEST(Model, LinearForwardByHand) {
  auto m = two_pixel_model({1, 2});
  Tensor x({1, 1, 1, 2}, std::vector<double>{3, 1});
  EXPECT_DOUBLE_EQ(forward(m, x)[0], 5.0);
  auto zero = two_pixel_model({0, 0});
  EXPECT_DOUBLE_EQ(forward(zero, x)[0], 0.0);
}

TEST(Model, ShapeMismatchIsRejected) {
  auto m = two_pixel_model({1, 2});
  EXPECT_THROW(forward(m, Tensor({1, 1, 2, 1})), ShapeError);
}

TEST(Model, SelectedOutputs) {
  auto m = make_linear_model({1, 1, 1}, 3, std::vector<double>{2, 1, 0});
  Tensor x({1, 1, 1, 1}, std::vector<double>{1});
  Tensor logits = forward(m, x);
  // softmax(2,1,0)[0] = e^2 / (e^2 + e + 1)
  EXPECT_NEAR(select_output(logits, {OutputKind::probability, 0})[0], 0.665240955774822, 1e-12);
  // contrastive: 2 - log(e + 1)
  EXPECT_NEAR(select_output(logits, {OutputKind::contrastive, 0})[0], 2.0 - std::log(std::exp(1.0) + 1.0), 1e-12);
  auto m3 = make_linear_model({1, 1, 1}, 3, std::vector<double>{3, 0, 0});
  EXPECT_NEAR(select_output(forward(m3, x), {OutputKind::contrastive, 0})[0], 3.0 - std::log(2.0), 1e-12);
  auto tie = make_linear_model({1, 1, 1}, 2, std::vector<double>{5, 5});
  EXPECT_DOUBLE_EQ(select_output(forward(tie, x), {OutputKind::probability, 1})[0], 0.5);
}

TEST(Model, ClassIndexOutOfRange) {
  auto m = two_pixel_model({1, 2});
  Tensor x({1, 1, 1, 2});
  EXPECT_THROW(input_gradient(m, x, {OutputKind::logit, 1}), IndexError);
  EXPECT_THROW(input_gradient(m, x, {OutputKind::contrastive, 0}), CapabilityError);
}

TEST(Model, InputGradientMatchesFiniteDifferences) {
  auto m = make_desk_cnn({3, 8, 8}, 3, Normalization{{0.4, 0.5, 0.6}, {0.2, 0.25, 0.3}}, 9);
  Tensor x = support::random_pixels({1, 3, 8, 8}, 21);
  for (auto kind : {OutputKind::logit, OutputKind::probability, OutputKind::contrastive}) {
    OutputSelector sel{kind, 1};
    Tensor g = input_gradient(m, x, sel);
    for (std::size_t i = 0; i < x.size(); i += 11)
      EXPECT_NEAR(g[i], support::central_difference(m, x, sel, i, 1e-5), 1e-6) << to_string(kind) << " " << i;
  }
}

TEST(Model, SingleClassProbabilityHasZeroGradient) {
  auto m = make_linear_model({1, 1, 2}, 1, std::vector<double>{3, -1});
  Tensor x({1, 1, 1, 2}, std::vector<double>{0.3, 0.9});
  auto sg = value_and_input_gradient(m, x, {OutputKind::probability, 0});
  EXPECT_DOUBLE_EQ(sg.value[0], 1.0);
  for (double v : sg.gradient.storage()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(Model, BiasGradientShapes) {
  auto m = make_desk_cnn({3, 8, 8}, 3, Normalization::identity(3), 2);
  Tensor x = support::random_pixels({2, 3, 8, 8}, 4);
  auto b = layer_gradients(m, x, {OutputKind::logit, 0}, "relu3", true);
  EXPECT_EQ(b.layer_activation.shape(), (Shape{2, 16, 2, 2}));
  EXPECT_EQ(b.layer_gradient.shape(), b.layer_activation.shape());
  ASSERT_EQ(b.bias_gradients.size(), 5u);  // normalize, three convs, fc
  for (const auto& bg : b.bias_gradients) {
    EXPECT_EQ(bg.gradient.dim(0), 2u);
    EXPECT_EQ(bg.gradient.dim(1), bg.bias.size());
  }
  // The fc bias gradient of logit 0 is the indicator of class 0.
  const auto& fc = b.bias_gradients.back();
  EXPECT_EQ(fc.layer_id, "fc");
  EXPECT_DOUBLE_EQ(fc.gradient[0], 1.0);
  EXPECT_DOUBLE_EQ(fc.gradient[1], 0.0);
  EXPECT_THROW(layer_gradients(m, x, {OutputKind::logit, 0}, "nope"), LookupError);
}

TEST(Training, ZeroEpochsReturnsInitialWeights) {
  auto m = make_desk_cnn({1, 4, 4}, 2, Normalization::identity(1), 3);
  TrainingSchedule s;
  s.epochs = 0;
  auto out = fit(m, separable_set(8, 1), s);
  auto a = m.network.params(), b = out.network.params();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i]->value.storage(), b[i]->value.storage());
}

TEST(Training, SeparableSetIsLearnedDeterministically) {
  auto train = separable_set(64, 5);
  auto test = separable_set(32, 6);
  auto m = make_desk_cnn({1, 4, 4}, 2, Normalization::identity(1), 3);
  TrainingSchedule s;
  s.epochs = 15;
  s.learning_rate = 0.05;
  s.batch_size = 8;
  s.seed = 9;
  auto a = fit(m, train, s);
  auto b = fit(m, train, s);
  EXPECT_DOUBLE_EQ(accuracy(a, test), 1.0);
  auto pa = a.network.params(), pb = b.network.params();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value.storage(), pb[i]->value.storage());
}

TEST(Training, DivergenceRaises) {
  auto m = make_desk_cnn({1, 4, 4}, 2, Normalization::identity(1), 3);
  TrainingSchedule s;
  s.epochs = 3;
  s.learning_rate = 1e200;
  EXPECT_THROW(fit(m, separable_set(16, 1), s), TrainingError);
}

TEST(Training, CheckpointRoundTrip) {
  auto m = make_desk_cnn({3, 8, 8}, 3, Normalization{{0.1, 0.2, 0.3}, {1, 2, 3}}, 8);
  auto dir = support::temp_dir("checkpoint");
  save_model(m, dir);
  auto r = load_model(dir);
  EXPECT_EQ(r.architecture_id, "desk_cnn");
  EXPECT_EQ(r.feature_layer_id, "relu3");
  EXPECT_EQ(r.normalization.stddev, m.normalization.stddev);
  Tensor x = support::random_pixels({2, 3, 8, 8}, 3);
  EXPECT_EQ(forward(r, x).storage(), forward(m, x).storage());
  EXPECT_THROW(load_model(dir / "missing"), IngestionError);
}
