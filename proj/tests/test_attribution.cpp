#include <gtest/gtest.h>

#include "support.hpp"

using namespace backx;

namespace {

// logits = W x on a 1x1x3 image; class 0 row is w0.
ModelHandle linear3(std::vector<double> w0 = {2.0, -1.0, 0.5}) {
  std::vector<double> w = w0;
  w.insert(w.end(), {0.0, 0.0, 0.0});
  return make_linear_model({1, 1, 3}, 2, w);
}

ImageBatch one(std::vector<double> v, std::size_t c = 1, std::size_t h = 1) {
  const std::size_t w = v.size() / (c * h);
  return {Tensor({1, c, h, w}, std::move(v)), {0}, {0}};
}

// conv1x1 (1 -> 2 channels, weights 1 and 2) -> relu "feat" -> linear head.
ModelHandle cam_toy() {
  nn::Network net;
  auto conv = std::make_unique<nn::Conv2d>(1, 2, 1, 0);
  conv->weight()[0] = 1.0;
  conv->weight()[1] = 2.0;
  net.add("conv", std::move(conv));
  net.add("feat", std::make_unique<nn::ReLU>());
  net.add("flatten", std::make_unique<nn::Flatten>());
  auto fc = std::make_unique<nn::Linear>(8, 2, false);
  // class 0 reads every position of channel 0 and position 3 of channel 1 (x2);
  // class 1 reads nothing.
  for (std::size_t p = 0; p < 4; ++p) fc->weight()[p] = 1.0;
  fc->weight()[7] = 2.0;
  net.add("fc", std::move(fc));
  return {"toy", 2, {1, 2, 2}, Normalization::identity(1), std::move(net), "feat", 0, {}};
}

}  // namespace

TEST(Presets, FamilyDefaults) {
  EXPECT_EQ(preset(Method::gcam, 0).selector.kind, OutputKind::probability);
  EXPECT_EQ(preset(Method::gcam, 0).postprocess, PostProcess::original);
  EXPECT_EQ(preset(Method::grad, 0).postprocess, PostProcess::absolute);
  EXPECT_EQ(preset(Method::ig, 0).selector.kind, OutputKind::logit);
  for (Method m : kAllMethods) EXPECT_EQ(method_from_string(to_string(m)), m);
  EXPECT_THROW(method_from_string("occlusion"), DomainError);
  EXPECT_EQ(config_label(preset(Method::grad, 0)), "grad.logit.absolute");
  EXPECT_NE(config_hash(preset(Method::sg, 0, 1)), config_hash(preset(Method::sg, 0, 2)));
  auto c = config_from_json(to_json(preset(Method::agi, 3, 9)), 3, 9);
  EXPECT_EQ(config_hash(c), config_hash(preset(Method::agi, 3, 9)));
}

TEST(Gradient, LinearModelIsExact) {
  auto m = linear3();
  auto x = one({0.3, 0.6, 0.9});
  Tensor g = grad(m, x, {OutputKind::logit, 0});
  EXPECT_EQ(g.storage(), (std::vector<double>{2.0, -1.0, 0.5}));
  // Noise does not change a constant gradient.
  Tensor s = smoothgrad(m, x, {OutputKind::logit, 0}, 20, 0.3, 1);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(s[i], g[i], 1e-12);
  Tensor ig = integrated_gradients(m, x, {OutputKind::logit, 0}, 7);
  EXPECT_NEAR(ig[0], 0.6, 1e-12);
  EXPECT_NEAR(ig[1], -0.6, 1e-12);
  EXPECT_NEAR(ig[2], 0.45, 1e-12);
}

TEST(SmoothGrad, ZeroSigmaEqualsGradient) {
  auto m = make_desk_cnn({3, 8, 8}, 3, Normalization::identity(3), 2);
  ImageBatch x{support::random_pixels({2, 3, 8, 8}, 5), {0, 1}, {0, 1}};
  EXPECT_EQ(smoothgrad(m, x, {OutputKind::logit, 1}, 10, 0.0, 3).storage(),
            grad(m, x, {OutputKind::logit, 1}).storage());
}

TEST(IntegratedGradients, ReferenceEqualToInputGivesZero) {
  auto m = make_desk_cnn({3, 8, 8}, 3, Normalization::identity(3), 2);
  ImageBatch x{support::random_pixels({1, 3, 8, 8}, 6), {0}, {0}};
  Tensor ig = integrated_gradients(m, x, {OutputKind::logit, 0}, x.pixels, 10);
  for (double v : ig.storage()) EXPECT_EQ(v, 0.0);
}

TEST(IntegratedGradients, CompletenessOnSmallCnn) {
  auto m = make_desk_cnn({3, 8, 8}, 3, Normalization{{0.5, 0.5, 0.5}, {0.25, 0.25, 0.25}}, 4);
  ImageBatch x{support::random_pixels({1, 3, 8, 8}, 7), {0}, {0}};
  OutputSelector sel{OutputKind::logit, 2};
  Tensor ig = integrated_gradients(m, x, sel, 8000);
  double total = 0;
  for (double v : ig.storage()) total += v;
  const double fx = select_output(forward(m, x.pixels), sel)[0];
  const double f0 = select_output(forward(m, Tensor({1, 3, 8, 8})), sel)[0];
  EXPECT_NEAR(total, fx - f0, 1e-3 * std::max(1.0, std::abs(fx - f0)));
}

TEST(FullGrad, CompletenessForLogits) {
  auto m = make_desk_cnn({3, 8, 8}, 3, Normalization{{0.4, 0.5, 0.6}, {0.2, 0.3, 0.4}}, 6);
  ImageBatch x{support::random_pixels({3, 3, 8, 8}, 8), {0, 1, 2}, {0, 1, 2}};
  for (std::size_t c = 0; c < 3; ++c) {
    auto t = fullgrad_terms(m, x, {OutputKind::logit, c});
    for (std::size_t n = 0; n < 3; ++n) EXPECT_NEAR(t.total(n), t.value[n], 1e-3);
  }
  Tensor map = fullgrad(m, x, {OutputKind::logit, 0});
  EXPECT_EQ(map.shape(), (Shape{3, 1, 8, 8}));
  for (double v : map.storage()) EXPECT_GE(v, 0.0);
}

TEST(GradCam, HandComputedToy) {
  auto m = cam_toy();
  auto x = one({1, 2, 3, 4}, 1, 2);
  Tensor cam = gradcam(m, x, {OutputKind::logit, 0});
  // channel weights: mean(1,1,1,1) = 1 and mean(0,0,0,2) = 0.5; cam = x + 0.5 * 2x
  EXPECT_EQ(cam.storage(), (std::vector<double>{2, 4, 6, 8}));
  Tensor zero = gradcam(m, x, {OutputKind::logit, 1});
  for (double v : zero.storage()) EXPECT_EQ(v, 0.0);
}

TEST(GuidedGradCam, ProductOfCamAndGradientMagnitude) {
  auto m = cam_toy();
  auto x = one({1, 2, 3, 4}, 1, 2);
  Tensor gg = guided_gradcam(m, x, {OutputKind::logit, 0});
  // d logit0 / dx = 1 everywhere, plus 2 * 2 at position 3.
  EXPECT_EQ(gg.storage(), (std::vector<double>{2, 4, 6, 40}));
  Tensor z = guided_gradcam(m, x, {OutputKind::logit, 1});
  for (double v : z.storage()) EXPECT_EQ(v, 0.0);
  // A constant CAM leaves the ranking of |grad| unchanged.
  auto lin = cam_toy();
  auto flat = one({1, 1, 1, 1}, 1, 2);
  Tensor c = gradcam(lin, flat, {OutputKind::logit, 0});
  Tensor g = grad(lin, flat, {OutputKind::logit, 0});
  Tensor gc = guided_gradcam(lin, flat, {OutputKind::logit, 0});
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(gc[i], c[0] * std::abs(g[i]));
}

TEST(Agi, ZeroStepAndForcedFalseClass) {
  auto m = linear3();
  auto x = one({0.3, 0.6, 0.9});
  Tensor z = agi(m, x, {OutputKind::logit, 0}, 3, 4, 0.0, 1);
  for (double v : z.storage()) EXPECT_EQ(v, 0.0);
  for (std::size_t c : agi_false_classes(2, 0, 6, 1, 0)) EXPECT_EQ(c, 1u);
  for (std::size_t c : agi_false_classes(5, 2, 50, 1, 0)) EXPECT_NE(c, 2u);
  auto single = make_linear_model({1, 1, 3}, 1, std::vector<double>{1, 1, 1});
  EXPECT_THROW(agi(single, x, {OutputKind::logit, 0}, 1, 1, 0.1, 0), CapabilityError);
}

TEST(Agi, LinearWalkByHand) {
  // Class 1 logit = (0, 0, 1) x: ascent moves only pixel 2 upward by 0.05 per step.
  auto m = make_linear_model({1, 1, 3}, 2, std::vector<double>{2, -1, 0.5, 0, 0, 1});
  auto x = one({0.3, 0.6, 0.5});
  Tensor a = agi(m, x, {OutputKind::logit, 0}, 1, 4, 0.05, 0);
  EXPECT_DOUBLE_EQ(a[0], 0.0);
  EXPECT_DOUBLE_EQ(a[1], 0.0);
  EXPECT_NEAR(a[2], -0.5 * 0.2, 1e-12);
}

TEST(Lpi, CentroidReferencesAndTieRule) {
  // Centroid 0.5; distances 0.25, 0, 0.25: index 1 first, then index 0 beats 2.
  ImageBatch train{Tensor({3, 1, 1, 1}, std::vector<double>{0.0, 0.5, 1.0}), {0, 1, 1}, {}};
  auto refs = centroid_references(train, 2);
  ASSERT_EQ(refs.references.size(), 2u);
  EXPECT_EQ(refs.references[0][0], 0.5);
  EXPECT_EQ(refs.references[1][0], 0.0);
  auto m = make_linear_model({1, 1, 1}, 2, std::vector<double>{3, 0});
  auto x = one({0.9});
  // mean of 3 (0.9 - 0.5) and 3 (0.9 - 0)
  EXPECT_NEAR(lpi(m, x, {OutputKind::logit, 0}, train, 2, 5)[0], 3 * (0.9 - 0.25), 1e-12);
}

TEST(PostProcess, ModesAndChannelReduction) {
  Tensor raw({1, 2, 2, 2}, std::vector<double>{-3, 1, 2, -0.5, 1, -2, 0, 0});
  auto abs_sum_abs = reduce_channels(raw, PostProcess::absolute, ChannelReduce::sum_abs);
  EXPECT_EQ(abs_sum_abs.storage(), (std::vector<double>{4, 3, 2, 0.5}));
  auto orig_sum = reduce_channels(raw, PostProcess::original, ChannelReduce::sum);
  EXPECT_EQ(orig_sum.storage(), (std::vector<double>{-2, -1, 2, -0.5}));
  auto abs_sum = reduce_channels(raw, PostProcess::absolute, ChannelReduce::sum);
  EXPECT_EQ(abs_sum.storage(), (std::vector<double>{2, 1, 2, 0.5}));
  // Ranking differs between modes: pixel 0 is first under absolute, last under original.
  EXPECT_EQ(rank_pixels(abs_sum_abs.values()).front(), 0u);
  EXPECT_EQ(rank_pixels(orig_sum.values()).back(), 0u);
}

TEST(Capabilities, UnsupportedRequestsRaise) {
  auto lin = linear3();
  auto x = one({0.3, 0.6, 0.9});
  EXPECT_THROW(attribute(lin, x, preset(Method::gcam, 0)), CapabilityError);
  EXPECT_THROW(attribute(lin, x, preset(Method::ggcam, 0)), CapabilityError);
  EXPECT_THROW(attribute(lin, x, preset(Method::lpi, 0)), CapabilityError);
  auto nobias = linear3();
  nobias.capabilities.bias_gradients = false;
  EXPECT_THROW(attribute(nobias, x, preset(Method::fullgrad, 0)), CapabilityError);
  auto nograd = linear3();
  nograd.capabilities.input_gradients = false;
  EXPECT_THROW(attribute(nograd, x, preset(Method::grad, 0)), CapabilityError);
  EXPECT_THROW(attribute(lin, x, preset(Method::grad, 5)), IndexError);
}

TEST(Attribution, AllMethodsProduceFiniteMaps) {
  auto& t = support::small_trojan();
  auto batch = t.test.slice(0, 2);
  for (Method m : kAllMethods) {
    auto c = preset(m, 0, 1);
    auto map = attribute(t.card.model, batch, c, &t.train);
    EXPECT_EQ(map.values.shape(), (Shape{2, 16, 16})) << to_string(m);
    EXPECT_TRUE(map.values.all_finite()) << to_string(m);
    auto again = attribute(t.card.model, batch, c, &t.train);
    EXPECT_EQ(again.values.storage(), map.values.storage()) << to_string(m);
  }
}

TEST(Attribution, SaveLoadRoundTrip) {
  auto m = linear3();
  auto map = attribute(m, one({0.3, 0.6, 0.9}), preset(Method::ig, 0));
  auto dir = support::temp_dir("maps");
  auto path = save_attribution(map, 0, 17, dir, true);
  EXPECT_EQ(path.filename().string().rfind("s17_ig_", 0), 0u);
  Tensor back = load_attribution(path);
  EXPECT_EQ(back.storage(), std::vector<double>(map.values.storage()));
  write_tensor(path, Tensor({1, 3}, 9.0));
  EXPECT_THROW(load_attribution(path), IngestionError);
}

TEST(GuidedGradCam, RecallAtLeastGradCamOnTrojan) {
  auto& t = support::small_trojan();
  auto pairs = make_eval_pairs(t.test, t.plan.trigger, 0, 40);
  const double k = t.plan.trigger.ratio();
  auto recall = [&](Method m) {
    auto map = attribute(t.card.model, pairs.poisoned, preset(m, 0));
    std::vector<RecoveryMask> masks;
    for (std::size_t n = 0; n < pairs.size(); ++n) masks.push_back(topk_mask(map, n, k));
    return trigger_recall(masks, t.plan.trigger.mask);
  };
  EXPECT_GE(recall(Method::ggcam), recall(Method::gcam));
}
