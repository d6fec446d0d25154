#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "backx/datasets.hpp"
#include "backx/error.hpp"
#include "backx/image.hpp"
#include "backx/model.hpp"
#include "backx/png_io.hpp"
#include "backx/random.hpp"
#include "backx/tensor.hpp"

namespace backx {

enum class TriggerKind { fixed_watermark, sample_specific };

inline std::string to_string(TriggerKind k) {
  return k == TriggerKind::fixed_watermark ? "fixed_watermark" : "sample_specific";
}

inline TriggerKind trigger_kind_from_string(const std::string& s) {
  if (s == "fixed_watermark") return TriggerKind::fixed_watermark;
  if (s == "sample_specific") return TriggerKind::sample_specific;
  throw DomainError("unknown trigger kind '" + s + "'");
}

/// Largest perturbation a sample-specific trigger may use.
inline constexpr double kMaxSampleSpecificAmplitude = 16.0 / 255.0;

struct TriggerSpec {
  TriggerKind kind = TriggerKind::fixed_watermark;
  Tensor pattern;  // (C, H, W) in [0,1]; fixed_watermark only
  Tensor mask;     // (H, W), entries in {0, 1}
  double alpha = 1.0;
  std::uint64_t key = 0;   // sample_specific only
  double amplitude = 0.0;  // sample_specific only

  std::size_t height() const { return mask.dim(0); }
  std::size_t width() const { return mask.dim(1); }
  std::size_t support() const {
    return static_cast<std::size_t>(std::count(mask.storage().begin(), mask.storage().end(), 1.0));
  }
  /// Fraction of pixels inside the trigger mask.
  double ratio() const { return static_cast<double>(support()) / static_cast<double>(mask.size()); }
  bool full_mask() const { return support() == mask.size(); }
};

namespace detail {
inline void check_alpha(double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw DomainError("trigger visibility alpha must lie in [0, 1]");
}
inline void check_mask(const Tensor& mask) {
  if (mask.rank() != 2) throw ShapeError("trigger mask must be (H, W)");
  for (double v : mask.storage())
    if (v != 0.0 && v != 1.0) throw DomainError("trigger mask entries must be 0 or 1");
}
}  // namespace detail

/// v^(alpha) = alpha * v + (1 - alpha) * x (.) S*, evaluated inside the
/// mask; zero outside it. `pattern` and `x` are (C, H, W), `mask` is (H, W).
inline Tensor make_watermark_trigger(const Tensor& pattern, const Tensor& mask, double alpha, const Tensor& x) {
  detail::check_alpha(alpha);
  detail::check_mask(mask);
  require_same_shape(pattern, x, "watermark trigger");
  if (x.rank() != 3 || x.dim(1) != mask.dim(0) || x.dim(2) != mask.dim(1))
    throw ShapeError("mask " + shape_str(mask.shape()) + " does not match image " + shape_str(x.shape()));
  Tensor out(x.shape());
  const std::size_t plane = mask.size();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double s = mask[i % plane];
    out[i] = s * (alpha * pattern[i] + (1.0 - alpha) * x[i]);
  }
  return out;
}

/// Rectangular fixed trigger. `style` is "checkerboard" (alternating 0/1
/// pixels) or "white".
inline TriggerSpec make_fixed_trigger(const Shape& image_shape, std::size_t top, std::size_t left,
                                      std::size_t patch_h, std::size_t patch_w, double alpha,
                                      const std::string& style = "checkerboard") {
  detail::check_alpha(alpha);
  const std::size_t c = image_shape.at(0), h = image_shape.at(1), w = image_shape.at(2);
  if (top + patch_h > h || left + patch_w > w) throw ShapeError("trigger patch does not fit the image");
  if (style != "checkerboard" && style != "white") throw DomainError("unknown trigger style '" + style + "'");
  TriggerSpec t;
  t.kind = TriggerKind::fixed_watermark;
  t.alpha = alpha;
  t.mask = Tensor({h, w});
  t.pattern = Tensor({c, h, w});
  for (std::size_t y = top; y < top + patch_h; ++y)
    for (std::size_t x = left; x < left + patch_w; ++x) {
      t.mask[y * w + x] = 1.0;
      const double v = style == "white" ? 1.0 : static_cast<double>((y + x) % 2);
      for (std::size_t ch = 0; ch < c; ++ch) t.pattern[(ch * h + y) * w + x] = v;
    }
  return t;
}

/// Fixed trigger in the bottom-right corner.
inline TriggerSpec make_corner_trigger(const Shape& image_shape, std::size_t patch_h, std::size_t patch_w, double alpha,
                                       const std::string& style = "checkerboard") {
  return make_fixed_trigger(image_shape, image_shape.at(1) - patch_h - 1, image_shape.at(2) - patch_w - 1, patch_h,
                            patch_w, alpha, style);
}

/// Per-sample perturbation field u(key, index) with entries in {-1, +1}: a
/// key-wide sign field in which each pixel flips independently for each
/// sample with probability 0.2. The shared component is what a model can
/// learn; the flips make each sample's trigger unique.
inline Tensor sample_specific_field(std::uint64_t key, std::size_t index, const Shape& image_shape) {
  Tensor u(image_shape);
  for (std::size_t p = 0; p < u.size(); ++p) {
    const double base = (mix64(derive_seed(key, 0x5eed, p)) & 1) ? 1.0 : -1.0;
    const std::uint64_t r = mix64(derive_seed(key, index + 1, p));
    const bool flip = static_cast<double>(r >> 11) * 0x1.0p-53 < 0.2;
    u[p] = flip ? -base : base;
  }
  return u;
}

/// Sample-specific invisible trigger keyed by `key`; the mask is all ones.
inline TriggerSpec make_sample_specific_trigger(std::uint64_t key, const ImageBatch& x, double amplitude) {
  if (!(amplitude >= 0.0 && amplitude <= kMaxSampleSpecificAmplitude + 1e-12))
    throw DomainError("sample-specific amplitude must lie in [0, 16/255]");
  TriggerSpec t;
  t.kind = TriggerKind::sample_specific;
  t.key = key;
  t.amplitude = amplitude;
  t.alpha = 1.0;
  t.mask = Tensor({x.height(), x.width()}, 1.0);
  return t;
}

/// Stamps one (C, H, W) image whose source index is `index`. Pixels outside
/// the mask are copied unchanged; results are clipped to [0, 1].
inline Tensor stamp_image(const Tensor& x, const TriggerSpec& trigger, std::size_t index) {
  if (x.rank() != 3 || x.dim(1) != trigger.height() || x.dim(2) != trigger.width())
    throw ShapeError("trigger " + shape_str(trigger.mask.shape()) + " does not match image " + shape_str(x.shape()));
  Tensor out = x;
  const std::size_t plane = trigger.mask.size();
  if (trigger.kind == TriggerKind::fixed_watermark) {
    if (trigger.pattern.shape() != x.shape()) throw ShapeError("trigger pattern does not match image");
    const Tensor v = make_watermark_trigger(trigger.pattern, trigger.mask, trigger.alpha, x);
    for (std::size_t i = 0; i < x.size(); ++i)
      if (trigger.mask[i % plane] != 0.0) out[i] = std::clamp(v[i], 0.0, 1.0);
  } else {
    const Tensor u = sample_specific_field(trigger.key, index, x.shape());
    for (std::size_t i = 0; i < x.size(); ++i)
      if (trigger.mask[i % plane] != 0.0) out[i] = std::clamp(x[i] + trigger.amplitude * u[i], 0.0, 1.0);
  }
  return out;
}

/// Poisoned copy x~ of a batch, stamped in raw pixel space.
inline ImageBatch stamp(const ImageBatch& x, const TriggerSpec& trigger) {
  ImageBatch out = x;
  const Shape img = x.image_shape();
  for (std::size_t n = 0; n < x.size(); ++n) {
    auto src = x.pixels.sample(n);
    Tensor one(img, std::vector<double>(src.begin(), src.end()));
    Tensor s = stamp_image(one, trigger, x.indices.empty() ? n : x.indices[n]);
    std::copy(s.storage().begin(), s.storage().end(), out.pixels.data() + n * one.size());
  }
  return out;
}

inline std::string trigger_checksum(const TriggerSpec& t) {
  Fnv1a h;
  h.update(to_string(t.kind)).update(t.pattern.values()).update(t.mask.values());
  h.update(&t.alpha, sizeof t.alpha).update(&t.key, sizeof t.key).update(&t.amplitude, sizeof t.amplitude);
  return hex64(h.digest());
}

// ---------------------------------------------------------------------------
// Poisoning

struct PoisonPlan {
  TriggerSpec trigger;
  double poisoning_rate = 0.1;
  std::size_t target_label = 0;
  bool relabel = true;
  std::uint64_t seed = 0;
};

/// Default target label: class 0, or class index 2 (the third class) for
/// GTSRB-style datasets.
inline std::size_t default_target_label(const std::string& dataset_name) {
  std::string lower = dataset_name;
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  return lower.find("gtsrb") != std::string::npos ? 2 : 0;
}

struct PoisonedDataset {
  ImageBatch data;
  std::vector<std::size_t> poisoned_indices;  // sorted, positions within the split
};

inline std::size_t poison_count(double rate, std::size_t n) {
  if (!(rate > 0.0 && rate <= 1.0)) throw DomainError("poisoning rate must lie in (0, 1]");
  return static_cast<std::size_t>(std::floor(rate * static_cast<double>(n) + 1e-9));
}

/// Indices chosen for poisoning: a seeded permutation prefix of size
/// floor(rate * n), returned sorted.
inline std::vector<std::size_t> select_poison_indices(double rate, std::size_t n, std::uint64_t seed) {
  const std::size_t count = poison_count(rate, n);
  if (count == 0) throw DomainError("poisoning rate selects no samples (floor(rate * N) = 0)");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, 0x9015));
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(count);
  std::sort(order.begin(), order.end());
  return order;
}

inline PoisonedDataset poison_dataset(const ImageBatch& train, const PoisonPlan& plan) {
  if (!plan.relabel) throw DomainError("poisoning without relabelling is not supported");
  auto chosen = select_poison_indices(plan.poisoning_rate, train.size(), plan.seed);
  PoisonedDataset out{train, chosen};
  if (out.data.indices.empty())
    for (std::size_t i = 0; i < train.size(); ++i) out.data.indices.push_back(i);
  const Shape img = train.image_shape();
  for (std::size_t i : chosen) {
    auto src = train.pixels.sample(i);
    Tensor one(img, std::vector<double>(src.begin(), src.end()));
    Tensor s = stamp_image(one, plan.trigger, out.data.indices[i]);
    std::copy(s.storage().begin(), s.storage().end(), out.data.pixels.data() + i * one.size());
    out.data.labels[i] = plan.target_label;
  }
  return out;
}

/// Rows of `batch` whose label differs from the target (the y != y~ set).
inline std::vector<std::size_t> eligible_rows(const ImageBatch& batch, std::size_t target_label) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < batch.size(); ++i)
    if (batch.labels[i] != target_label) rows.push_back(i);
  return rows;
}

// ---------------------------------------------------------------------------
// Trojan training and verification

struct TrojanModelCard {
  ModelHandle model;
  ModelHandle benign_twin;
  PoisonPlan plan;
  double clean_accuracy = 0;
  double poisoned_accuracy = 0;
  double benign_twin_accuracy = 0;
  /// Benign twin's rate of predicting the target on stamped inputs.
  double benign_twin_poisoned_rate = 0;
  std::vector<double> trojan_losses, benign_losses;
};

/// Fraction of stamped samples (y != target) predicted as the target.
inline double poisoned_success_rate(ModelHandle& model, const ImageBatch& test, const PoisonPlan& plan) {
  auto rows = eligible_rows(test, plan.target_label);
  if (rows.empty()) throw EvaluationError("no test samples with label different from the target");
  auto stamped = stamp(test.select(rows), plan.trigger);
  auto pred = predict(model, stamped.pixels);
  std::size_t hit = 0;
  for (std::size_t p : pred) hit += p == plan.target_label;
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

/// Trains the trojan on the poisoned set and a benign twin on the clean set
/// from the same initialisation and schedule, then measures both.
inline TrojanModelCard trojan_train(const ModelHandle& init, const ImageBatch& clean_train,
                                    const PoisonedDataset& poisoned, const ImageBatch& test,
                                    const TrainingSchedule& schedule, const PoisonPlan& plan) {
  TrojanModelCard card;
  card.plan = plan;
  card.model = fit(init, poisoned.data, schedule, &card.trojan_losses);
  card.benign_twin = fit(init, clean_train, schedule, &card.benign_losses);
  card.clean_accuracy = accuracy(card.model, test);
  card.poisoned_accuracy = poisoned_success_rate(card.model, test, plan);
  card.benign_twin_accuracy = accuracy(card.benign_twin, test);
  card.benign_twin_poisoned_rate = poisoned_success_rate(card.benign_twin, test, plan);
  return card;
}

struct GateResult {
  bool pass = true;
  std::vector<std::string> reasons;
};

/// Verification gate: the trigger must flip predictions reliably and the
/// trojan must not lose much clean accuracy against its benign twin.
inline GateResult verify_trojan(double poisoned_accuracy, double clean_accuracy, double benign_twin_accuracy,
                                double min_poisoned_acc, double max_clean_drop) {
  GateResult r;
  if (!(poisoned_accuracy >= min_poisoned_acc)) {
    r.pass = false;
    r.reasons.push_back("weak trigger: poisoned accuracy " + std::to_string(poisoned_accuracy) + " < " +
                        std::to_string(min_poisoned_acc));
  }
  if (!(benign_twin_accuracy - clean_accuracy <= max_clean_drop + 1e-12)) {
    r.pass = false;
    r.reasons.push_back("clean degradation: drop " + std::to_string(benign_twin_accuracy - clean_accuracy) + " > " +
                        std::to_string(max_clean_drop));
  }
  return r;
}

inline GateResult verify_trojan(const TrojanModelCard& card, double min_poisoned_acc, double max_clean_drop) {
  return verify_trojan(card.poisoned_accuracy, card.clean_accuracy, card.benign_twin_accuracy, min_poisoned_acc,
                       max_clean_drop);
}

// ---------------------------------------------------------------------------
// Persistence

inline nlohmann::json trigger_to_json(const TriggerSpec& t) {
  return {{"kind", to_string(t.kind)},   {"alpha", t.alpha},
          {"key", t.key},                {"amplitude", t.amplitude},
          {"ratio", t.ratio()},          {"support", t.support()},
          {"checksum", trigger_checksum(t)}};
}

inline nlohmann::json plan_to_json(const PoisonPlan& p) {
  return {{"trigger", trigger_to_json(p.trigger)},
          {"poisoning_rate", p.poisoning_rate},
          {"target_label", p.target_label},
          {"relabel", p.relabel},
          {"seed", p.seed}};
}

/// Trigger pattern and mask as PNG files.
inline void save_trigger_pngs(const TriggerSpec& t, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  if (t.kind == TriggerKind::fixed_watermark && t.pattern.dim(0) == 3) png::write(dir / "trigger.png", t.pattern);
  if (t.kind == TriggerKind::sample_specific) {
    // Render the key-wide field at amplitude scale around mid-grey.
    Tensor u = sample_specific_field(t.key, 0, {3, t.height(), t.width()});
    for (auto& v : u.storage()) v = 0.5 + 0.5 * v;
    png::write(dir / "trigger.png", u);
  }
  png::write(dir / "trigger_mask.png", t.mask.reshaped({1, t.height(), t.width()}));
}

/// Writes images.bxt (float64 tensor), labels.json and provenance.json.
inline void save_poisoned_dataset(const PoisonedDataset& d, const PoisonPlan& plan, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_tensor(dir / "images.bxt", d.data.pixels);
  std::ofstream(dir / "labels.json") << nlohmann::json(d.data.labels).dump() << '\n';
  nlohmann::json prov = {{"poisoned_indices", d.poisoned_indices},
                         {"poisoned_count", d.poisoned_indices.size()},
                         {"size", d.data.size()},
                         {"plan", plan_to_json(plan)},
                         {"seed", plan.seed},
                         {"trigger_checksum", trigger_checksum(plan.trigger)},
                         {"images_checksum", checksum(d.data.pixels.values())}};
  std::ofstream(dir / "provenance.json") << prov.dump(2) << '\n';
  save_trigger_pngs(plan.trigger, dir);
}

inline PoisonedDataset load_poisoned_dataset(const std::filesystem::path& dir) {
  PoisonedDataset d;
  d.data.pixels = read_tensor(dir / "images.bxt");
  std::ifstream lf(dir / "labels.json");
  if (!lf) throw IngestionError((dir / "labels.json").string(), "missing labels");
  d.data.labels = nlohmann::json::parse(lf).get<std::vector<std::size_t>>();
  std::ifstream pf(dir / "provenance.json");
  if (!pf) throw IngestionError((dir / "provenance.json").string(), "missing provenance");
  auto prov = nlohmann::json::parse(pf);
  d.poisoned_indices = prov.at("poisoned_indices").get<std::vector<std::size_t>>();
  if (checksum(d.data.pixels.values()) != prov.at("images_checksum").get<std::string>())
    throw IngestionError((dir / "images.bxt").string(), "image checksum mismatch");
  for (std::size_t i = 0; i < d.data.size(); ++i) d.data.indices.push_back(i);
  return d;
}

}  // namespace backx
