#include <gtest/gtest.h>

#include "support.hpp"

using namespace backx;

TEST(Watermark, BlendInsideMaskZeroOutside) {
  Tensor pattern({1, 1, 2}, std::vector<double>{1.0, 1.0});
  Tensor mask({1, 2}, std::vector<double>{1, 0});
  Tensor x({1, 1, 2}, std::vector<double>{0.2, 0.7});
  Tensor v = make_watermark_trigger(pattern, mask, 0.5, x);
  EXPECT_DOUBLE_EQ(v[0], 0.6);  // 0.5 * 1 + 0.5 * 0.2
  EXPECT_DOUBLE_EQ(v[1], 0.0);
  EXPECT_DOUBLE_EQ(make_watermark_trigger(pattern, mask, 1.0, x)[0], 1.0);
  EXPECT_DOUBLE_EQ(make_watermark_trigger(pattern, mask, 0.0, x)[0], 0.2);
  EXPECT_THROW(make_watermark_trigger(pattern, mask, 1.5, x), DomainError);
  EXPECT_THROW(make_watermark_trigger(pattern, Tensor({1, 2}, std::vector<double>{0.5, 0}), 0.5, x), DomainError);
}

TEST(Stamp, WhitePatchChangesOnlyMaskedPixels) {
  auto t = make_fixed_trigger({3, 8, 8}, 2, 3, 3, 3, 1.0, "white");
  EXPECT_EQ(t.support(), 9u);
  EXPECT_DOUBLE_EQ(t.ratio(), 9.0 / 64.0);
  Tensor x({3, 8, 8}, 0.25);
  Tensor s = stamp_image(x, t, 0);
  std::size_t changed_pixels = 0;
  for (std::size_t p = 0; p < 64; ++p) {
    bool any = false;
    for (std::size_t c = 0; c < 3; ++c) any |= s[c * 64 + p] != x[c * 64 + p];
    changed_pixels += any;
    if (any) EXPECT_DOUBLE_EQ(s[p], 1.0);
  }
  EXPECT_EQ(changed_pixels, 9u);
  EXPECT_THROW(make_fixed_trigger({3, 8, 8}, 6, 6, 3, 3, 1.0), ShapeError);
}

TEST(Stamp, CornerCheckerboardPlacement) {
  auto t = make_corner_trigger({3, 32, 32}, 5, 6, 0.5);
  EXPECT_EQ(t.support(), 30u);
  EXPECT_EQ(t.mask[26 * 32 + 25], 1.0);
  EXPECT_EQ(t.mask[30 * 32 + 30], 1.0);
  EXPECT_EQ(t.mask[31 * 32 + 31], 0.0);
  EXPECT_EQ(t.mask[25 * 32 + 25], 0.0);
}

TEST(SampleSpecific, BoundedAndPerSample) {
  ImageBatch b{support::random_pixels({2, 3, 8, 8}, 3, 0.2, 0.8), {0, 1}, {0, 1}};
  auto t = make_sample_specific_trigger(77, b, 8.0 / 255.0);
  EXPECT_TRUE(t.full_mask());
  auto s = stamp(b, t);
  double max_diff = 0;
  for (std::size_t i = 0; i < s.pixels.size(); ++i) max_diff = std::max(max_diff, std::abs(s.pixels[i] - b.pixels[i]));
  EXPECT_NEAR(max_diff, 8.0 / 255.0, 1e-12);
  // The two samples receive different fields.
  Tensor u0 = sample_specific_field(77, 0, {3, 8, 8}), u1 = sample_specific_field(77, 1, {3, 8, 8});
  EXPECT_NE(u0.storage(), u1.storage());
  std::size_t agree = 0;
  for (std::size_t i = 0; i < u0.size(); ++i) agree += u0[i] == u1[i];
  // Independent 0.2 flips agree with probability 0.68.
  EXPECT_NEAR(static_cast<double>(agree) / static_cast<double>(u0.size()), 0.68, 0.1);
  EXPECT_THROW(make_sample_specific_trigger(77, b, 17.0 / 255.0), DomainError);
}

TEST(Poison, CountsAndRelabelling) {
  ImageBatch b{Tensor({1000, 1, 2, 2}, 0.5), std::vector<std::size_t>(1000, 1), {}};
  PoisonPlan plan;
  plan.trigger = make_fixed_trigger({1, 2, 2}, 0, 0, 1, 1, 1.0, "white");
  plan.poisoning_rate = 0.05;
  plan.target_label = 0;
  plan.seed = 4;
  auto p = poison_dataset(b, plan);
  EXPECT_EQ(p.poisoned_indices.size(), 50u);
  std::size_t relabelled = 0;
  for (auto y : p.data.labels) relabelled += y == 0;
  EXPECT_EQ(relabelled, 50u);
  for (auto i : p.poisoned_indices) EXPECT_DOUBLE_EQ(p.data.pixels[i * 4], 1.0);
  EXPECT_EQ(poison_dataset(b, plan).poisoned_indices, p.poisoned_indices);

  plan.poisoning_rate = 1.0;
  EXPECT_EQ(poison_dataset(b, plan).poisoned_indices.size(), 1000u);
  plan.poisoning_rate = 0.0005;  // floor(0.5) = 0
  EXPECT_THROW(poison_dataset(b, plan), DomainError);
  plan.poisoning_rate = 0.0;
  EXPECT_THROW(poison_dataset(b, plan), DomainError);
}

TEST(Gate, Thresholds) {
  auto ok = verify_trojan(1.0, 0.928, 0.943, 0.99, 0.02);
  EXPECT_TRUE(ok.pass);
  auto weak = verify_trojan(0.745, 0.928, 0.943, 0.99, 0.02);
  ASSERT_FALSE(weak.pass);
  EXPECT_NE(weak.reasons[0].find("weak trigger"), std::string::npos);
  auto degraded = verify_trojan(1.0, 0.90, 0.95, 0.99, 0.02);
  ASSERT_FALSE(degraded.pass);
  EXPECT_NE(degraded.reasons[0].find("clean degradation"), std::string::npos);
}

TEST(Trojan, SmallModelMeetsGate) {
  auto& t = support::small_trojan();
  EXPECT_GE(t.card.poisoned_accuracy, 0.99);
  EXPECT_TRUE(verify_trojan(t.card, 0.99, 0.02).pass);
  // The benign twin never saw the trigger.
  EXPECT_LT(t.card.benign_twin_poisoned_rate, 0.5);
}

TEST(Poison, ProvenanceRoundTrip) {
  ImageBatch b{support::random_pixels({20, 3, 4, 4}, 8), std::vector<std::size_t>(20, 2), {}};
  PoisonPlan plan;
  plan.trigger = make_corner_trigger({3, 4, 4}, 2, 2, 0.5);
  plan.poisoning_rate = 0.25;
  plan.seed = 6;
  auto p = poison_dataset(b, plan);
  auto dir = support::temp_dir("poison");
  save_poisoned_dataset(p, plan, dir);
  auto r = load_poisoned_dataset(dir);
  EXPECT_EQ(r.poisoned_indices, p.poisoned_indices);
  EXPECT_EQ(r.data.labels, p.data.labels);
  EXPECT_EQ(r.data.pixels.storage(), p.data.pixels.storage());
  EXPECT_TRUE(std::filesystem::exists(dir / "trigger_mask.png"));
}
