#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "backx/backx.hpp"

namespace support {

/// Central difference of the selected output along one input coordinate.
inline double central_difference(backx::ModelHandle& model, const backx::Tensor& x, const backx::OutputSelector& sel,
                                 std::size_t i, double h = 1e-4) {
  backx::Tensor a = x, b = x;
  a[i] += h;
  b[i] -= h;
  const double fa = backx::select_output(backx::forward(model, a), sel)[0];
  const double fb = backx::select_output(backx::forward(model, b), sel)[0];
  return (fa - fb) / (2 * h);
}

inline backx::Tensor random_pixels(const backx::Shape& shape, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  backx::Tensor t(shape);
  backx::Rng rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.storage()) v = u(rng);
  return t;
}

/// Trojan trained once per process on a 16x16 synthetic set with a 3x3
/// corner checkerboard (alpha 0.5, rate 0.1, target 0).
struct SmallTrojan {
  backx::DatasetHandle data;
  backx::ImageBatch train, test;
  backx::PoisonPlan plan;
  backx::TrojanModelCard card;
};

inline SmallTrojan& small_trojan() {
  static SmallTrojan t = [] {
    SmallTrojan s;
    s.data = backx::synthesize_dataset(4, 150, 16, 7, 40);
    s.train = s.data.train.materialize();
    s.test = s.data.test.materialize();
    s.plan.trigger = backx::make_corner_trigger({3, 16, 16}, 3, 3, 0.5);
    s.plan.poisoning_rate = 0.1;
    s.plan.target_label = 0;
    s.plan.seed = 11;
    auto poisoned = backx::poison_dataset(s.train, s.plan);
    backx::TrainingSchedule sch;
    sch.epochs = 8;
    sch.learning_rate = 0.01;
    sch.decay_epochs = {6};
    sch.seed = 3;
    auto init = backx::make_desk_cnn({3, 16, 16}, 4, s.data.normalization, 5);
    s.card = backx::trojan_train(init, s.train, poisoned, s.test, sch, s.plan);
    return s;
  }();
  return t;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("backx_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace support
