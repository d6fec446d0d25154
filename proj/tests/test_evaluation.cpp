#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "support.hpp"

using namespace backx;

TEST(TopK, MatchesBruteForceRanking) {
  Rng rng(3);
  std::uniform_int_distribution<int> coarse(0, 5);  // many ties
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> map(7 * 9);
    for (auto& v : map) v = coarse(rng);
    for (double k : {0.0, 0.05, 0.1, 0.37, 0.5, 1.0}) {
      auto m = topk_mask(map, 7, 9, k);
      const auto count = static_cast<std::size_t>(std::floor(k * 63 + 1e-9));
      EXPECT_EQ(m.count(), count);
      for (std::size_t i = 0; i < map.size(); ++i) {
        std::size_t before = 0;  // pixels ranked ahead of i
        for (std::size_t j = 0; j < map.size(); ++j) before += map[j] > map[i] || (map[j] == map[i] && j < i);
        EXPECT_EQ(m.bits[i] == 1.0, before < count) << "trial " << trial << " k " << k << " pixel " << i;
      }
    }
  }
}

TEST(TopK, HandExamples) {
  auto m = topk_mask(std::vector<double>{4, 3, 2, 1}, 2, 2, 0.5);
  EXPECT_EQ(m.bits.storage(), (std::vector<double>{1, 1, 0, 0}));
  auto r = topk_mask(std::vector<double>{1, 2, 3, 4}, 2, 2, 0.5);
  EXPECT_EQ(r.bits.storage(), (std::vector<double>{0, 0, 1, 1}));
  auto tie = topk_mask(std::vector<double>{7, 7, 7, 7}, 2, 2, 0.5);
  EXPECT_EQ(tie.bits.storage(), (std::vector<double>{1, 1, 0, 0}));
  EXPECT_EQ(mask_count(30.0 / 1024.0, 1024), 30u);
  EXPECT_EQ(mask_count(0.005, 1024), 5u);
  EXPECT_THROW(mask_count(1.5, 4), DomainError);
  EXPECT_THROW(mask_count(-0.1, 4), DomainError);
  EXPECT_THROW(topk_mask(std::vector<double>{1, NAN, 2, 3}, 2, 2, 0.5), DomainError);
  EXPECT_THROW(topk_mask(std::vector<double>{1, 2, 3}, 2, 2, 0.5), ShapeError);
}

TEST(Recovery, PixelsComeFromTheRightSource) {
  Tensor clean({2, 2, 2}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8});
  Tensor poisoned({2, 2, 2}, std::vector<double>{-1, -2, -3, -4, -5, -6, -7, -8});
  RecoveryMask m{Tensor({2, 2}, std::vector<double>{0, 1, 1, 0}), 0.5, ""};
  EXPECT_EQ(recover_sample(poisoned, clean, m).storage(), (std::vector<double>{-1, 2, 3, -4, -5, 6, 7, -8}));
  RecoveryMask wrong{Tensor({3, 2}), 0.5, ""};
  EXPECT_THROW(recover_sample(poisoned, clean, wrong), ShapeError);
}

TEST(Recovery, ExactTriggerMaskRestoresClean) {
  auto trigger = make_corner_trigger({3, 8, 8}, 2, 3, 0.5);
  ImageBatch test{support::random_pixels({6, 3, 8, 8}, 2), {0, 1, 2, 1, 0, 2}, {}};
  auto pairs = make_eval_pairs(test, trigger, 0);
  EXPECT_EQ(pairs.size(), 4u);
  std::vector<RecoveryMask> masks(pairs.size(), RecoveryMask{trigger.mask, trigger.ratio(), ""});
  EXPECT_EQ(recover_batch(pairs, masks).storage(), pairs.clean.pixels.storage());
  ImageBatch all_target{support::random_pixels({2, 3, 8, 8}, 2), {0, 0}, {}};
  EXPECT_THROW(make_eval_pairs(all_target, trigger, 0), EvaluationError);
}

TEST(AttackSuccess, SkipsTargetRows) {
  std::vector<std::size_t> pred{0, 0, 1, 0}, labels{0, 1, 1, 2};
  EXPECT_DOUBLE_EQ(attack_success_rate(pred, labels, 0), 2.0 / 3.0);
  std::vector<std::size_t> only{0, 0};
  EXPECT_THROW(attack_success_rate(only, only, 0), EvaluationError);
}

TEST(TriggerRecall, HandExampleAndUndefinedMasks) {
  Tensor trig({2, 4}, std::vector<double>{1, 1, 0, 0, 1, 1, 0, 0});
  RecoveryMask m{Tensor({2, 4}, std::vector<double>{1, 1, 1, 0, 1, 0, 0, 0}), 0.5, ""};
  EXPECT_DOUBLE_EQ(trigger_recall(std::vector<RecoveryMask>{m}, trig), 0.75);
  EXPECT_THROW(trigger_recall(std::vector<RecoveryMask>{m}, Tensor({2, 4})), DomainError);
  EXPECT_THROW(trigger_recall(std::vector<RecoveryMask>{m}, Tensor({2, 4}, 1.0)), DomainError);
  EXPECT_THROW(trigger_recall(std::vector<RecoveryMask>{}, trig), EvaluationError);
}

TEST(FractionalChange, HandValues) {
  // target output 1 -> 9 under the trigger, 5 after recovery; true class 8 -> 2, 5.
  auto r = fractional_change(8, 2, 5, 1, 9, 5);
  EXPECT_DOUBLE_EQ(r.target, 0.5);
  EXPECT_DOUBLE_EQ(r.true_class, 0.5);
  EXPECT_FALSE(r.excluded);
  auto over = fractional_change(8, 2, 11, 1, 9, -3);
  EXPECT_DOUBLE_EQ(over.true_raw, 1.5);
  EXPECT_DOUBLE_EQ(over.true_class, 1.0);
  EXPECT_DOUBLE_EQ(over.target_raw, -0.5);
  EXPECT_DOUBLE_EQ(over.target, 0.0);
  EXPECT_TRUE(fractional_change(8, 8 - 1e-8, 5, 1, 9, 5).excluded);
  EXPECT_TRUE(fractional_change(8, 2, 5, 1, 1 + 1e-8, 5).excluded);
}

TEST(FractionalChange, ModelFormUsesSelectedSpace) {
  // logits = (x0, x1): at x the true class 1 leads, the trigger moves mass to 0.
  auto m = make_linear_model({1, 1, 2}, 2, std::vector<double>{1, 0, 0, 1});
  Tensor x({1, 1, 2}, std::vector<double>{0.0, 1.0});
  Tensor p({1, 1, 2}, std::vector<double>{1.0, 0.0});
  Tensor h({1, 1, 2}, std::vector<double>{0.5, 0.5});
  auto l = fractional_change(m, x, p, h, 1, 0, Space::logit);
  EXPECT_DOUBLE_EQ(l.target, 0.5);
  EXPECT_DOUBLE_EQ(l.true_class, 0.5);
  auto pr = fractional_change(m, x, p, h, 1, 0, Space::probability);
  // softmax at h is (0.5, 0.5); at x it is (s, 1 - s) with s = 1 / (1 + e)
  EXPECT_NEAR(pr.target, 0.5, 1e-12);
  EXPECT_NEAR(pr.true_class, 0.5, 1e-12);
}

TEST(CombinedFlc, Endpoints) {
  EXPECT_DOUBLE_EQ(combined_flc(std::vector<double>{1.0}, std::vector<double>{0.0}), 2.0);
  EXPECT_DOUBLE_EQ(combined_flc(std::vector<double>{0.0}, std::vector<double>{1.0}), 0.0);
  EXPECT_DOUBLE_EQ(combined_flc(std::vector<double>{0.5}, std::vector<double>{0.5}), 0.5);
  EXPECT_DOUBLE_EQ(combined_flc(std::vector<double>{1.0, 0.0}, std::vector<double>{0.0, 1.0}), 1.0);
  EXPECT_THROW(combined_flc(std::vector<double>{}, std::vector<double>{}), EvaluationError);
  EXPECT_THROW(combined_flc(std::vector<double>{1.0}, std::vector<double>{}), ShapeError);
}

TEST(KGrid, DefaultIncludesTriggerRatio) {
  auto g = default_k_grid(30.0 / 1024.0);
  EXPECT_EQ(g.size(), 8u);
  EXPECT_TRUE(std::is_sorted(g.begin(), g.end()));
  EXPECT_NE(std::find(g.begin(), g.end(), 30.0 / 1024.0), g.end());
  EXPECT_EQ(default_k_grid(0.05).size(), 7u);
}

class SweepOnTrojan : public ::testing::Test {
 protected:
  support::SmallTrojan& t = support::small_trojan();
  EvalPairs pairs = make_eval_pairs(t.test, t.plan.trigger, 0);
  SweepOptions options(const std::string& name) {
    SweepOptions o;
    o.method = name;
    o.config_hash = "000000000000";
    o.seed = 4;
    o.trigger_mask = &t.plan.trigger.mask;
    return o;
  }
};

TEST_F(SweepOnTrojan, EndpointsOfTheGrid) {
  auto maps = random_maps(pairs.size(), 16, 16, 1);
  auto r = sweep_recovery_rates(t.card.model, pairs, maps, {0.0, 1.0}, options("random"));
  // k = 0 leaves x~ untouched: ASR is the poisoned accuracy on eligible rows.
  EXPECT_DOUBLE_EQ(r.asr[0], t.card.poisoned_accuracy);
  EXPECT_DOUBLE_EQ(r.tr[0], 0.0);
  EXPECT_DOUBLE_EQ(r.flc[0], 0.0);
  // k = 1 restores x exactly.
  auto pred = predict(t.card.model, pairs.clean.pixels);
  EXPECT_DOUBLE_EQ(r.asr[1], attack_success_rate(pred, pairs.clean.labels, 0));
  EXPECT_DOUBLE_EQ(r.tr[1], 1.0);
  EXPECT_DOUBLE_EQ(r.flc[1], 2.0);
  EXPECT_DOUBLE_EQ(r.delta_logit_y[1], 1.0);
  EXPECT_DOUBLE_EQ(r.delta_logit_target[1], 0.0);
  EXPECT_THROW(sweep_recovery_rates(t.card.model, pairs, maps, {0.1, 0.05}, options("x")), DomainError);
}

TEST_F(SweepOnTrojan, OracleRemovesTheBackdoor) {
  const double ratio = t.plan.trigger.ratio();
  auto r = sweep_recovery_rates(t.card.model, pairs, oracle_maps(t.plan.trigger.mask, pairs.size()),
                                default_k_grid(ratio), options("oracle"));
  const auto i = r.k_index(ratio);
  EXPECT_DOUBLE_EQ(r.tr[i], 1.0);
  EXPECT_LE(r.asr[i], 0.02);
  EXPECT_TRUE(r.tr_monotone);
  EXPECT_TRUE(r.asr_monotone);
}

TEST_F(SweepOnTrojan, RandomMapRecallTracksK) {
  auto maps = random_maps(pairs.size(), 16, 16, 7);
  std::vector<double> grid{0.05, 0.1, 0.25, 0.5};
  auto r = sweep_recovery_rates(t.card.model, pairs, maps, grid, options("random"));
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const double expected = static_cast<double>(mask_count(grid[i], 256)) / 256.0;
    EXPECT_NEAR(r.tr[i], expected, 4 * r.tr_stderr[i] + 0.01) << "k " << grid[i];
  }
}

TEST_F(SweepOnTrojan, ReportRoundTrip) {
  auto maps = random_maps(pairs.size(), 16, 16, 2);
  auto r = sweep_recovery_rates(t.card.model, pairs, maps, {0.02, 0.1}, options("random"));
  r.context = {{"dataset", "synthetic"}};
  auto dir = support::temp_dir("report");
  auto path = save_report(r, dir);
  auto back = load_report(path);
  EXPECT_EQ(to_json(back).dump(), to_json(r).dump());
  std::ifstream csv(path.parent_path() / (path.stem().string() + ".csv"));
  std::string header, line;
  std::getline(csv, header);
  EXPECT_EQ(header + "\n", csv_header());
  std::size_t rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 2u);

  r.tr_defined = false;
  auto j = to_json(r);
  EXPECT_TRUE(j["tr"].is_null());
  EXPECT_FALSE(report_from_json(j).tr_defined);
  EXPECT_NE(csv_rows(r).find(",,,"), std::string::npos);
  EXPECT_THROW(r.k_index(0.3), LookupError);
}

TEST(Sweep, SampleSpecificTriggerHasNoRecall) {
  ImageBatch test{support::random_pixels({4, 3, 8, 8}, 5), {1, 2, 1, 2}, {0, 1, 2, 3}};
  auto trig = make_sample_specific_trigger(3, test, 8.0 / 255.0);
  auto pairs = make_eval_pairs(test, trig, 0);
  auto model = make_desk_cnn({3, 8, 8}, 3, Normalization::identity(3), 1);
  SweepOptions o;
  o.method = "random";
  o.trigger_mask = &trig.mask;
  auto r = sweep_recovery_rates(model, pairs, random_maps(4, 8, 8, 1), {0.1}, o);
  EXPECT_FALSE(r.tr_defined);
  EXPECT_TRUE(r.tr.empty());
}
