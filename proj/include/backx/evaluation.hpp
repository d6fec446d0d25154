#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "backx/attribution.hpp"
#include "backx/backdoor.hpp"
#include "backx/error.hpp"
#include "backx/image.hpp"
#include "backx/model.hpp"
#include "backx/random.hpp"
#include "backx/tensor.hpp"

namespace backx {

/// Binary (H, W) pixel mask, broadcast across channels.
struct RecoveryMask {
  Tensor bits;
  double k = 0;
  std::string source_map_hash;

  std::size_t count() const {
    return static_cast<std::size_t>(std::count(bits.storage().begin(), bits.storage().end(), 1.0));
  }
};

/// Number of pixels a mask at rate k selects out of `pixels`.
inline std::size_t mask_count(double k, std::size_t pixels) {
  if (!(k >= 0.0 && k <= 1.0)) throw DomainError("recovery rate k must lie in [0, 1]");
  return std::min(pixels, static_cast<std::size_t>(std::floor(k * static_cast<double>(pixels) + 1e-9)));
}

/// Pixel indices ordered by descending score; equal scores keep ascending
/// row-major order.
inline std::vector<std::size_t> rank_pixels(std::span<const double> map) {
  for (double v : map)
    if (!std::isfinite(v)) throw DomainError("attribution map contains non-finite values");
  std::vector<std::size_t> order(map.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return map[a] > map[b]; });
  return order;
}

inline RecoveryMask mask_from_ranking(const std::vector<std::size_t>& order, std::size_t h, std::size_t w, double k,
                                      std::string hash = {}) {
  RecoveryMask m{Tensor({h, w}), k, std::move(hash)};
  const std::size_t c = mask_count(k, h * w);
  for (std::size_t i = 0; i < c; ++i) m.bits[order[i]] = 1.0;
  return m;
}

inline RecoveryMask topk_mask(std::span<const double> map, std::size_t h, std::size_t w, double k) {
  if (map.size() != h * w) throw ShapeError("attribution map size does not match " + std::to_string(h) + "x" +
                                            std::to_string(w));
  return mask_from_ranking(rank_pixels(map), h, w, k, checksum(map));
}

inline RecoveryMask topk_mask(const AttributionMap& map, std::size_t row, double k) {
  return topk_mask(map.values.sample(row), map.values.dim(1), map.values.dim(2), k);
}

/// x^ = x~ (.) (1 - S) + x (.) S, with S broadcast over channels.
inline Tensor recover_sample(const Tensor& poisoned, const Tensor& clean, const RecoveryMask& mask) {
  require_same_shape(poisoned, clean, "recover_sample");
  if (poisoned.rank() != 3 || mask.bits.rank() != 2 || poisoned.dim(1) != mask.bits.dim(0) ||
      poisoned.dim(2) != mask.bits.dim(1))
    throw ShapeError("mask " + shape_str(mask.bits.shape()) + " does not match image " + shape_str(poisoned.shape()));
  const std::size_t plane = mask.bits.size();
  Tensor out = poisoned;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (mask.bits[i % plane] != 0.0) out[i] = clean[i];
  return out;
}

/// Clean/poisoned test pairs restricted to y != target. Built once and shared
/// by every metric.
struct EvalPairs {
  ImageBatch clean;
  ImageBatch poisoned;
  std::size_t target_label = 0;

  std::size_t size() const { return clean.size(); }
};

inline EvalPairs make_eval_pairs(const ImageBatch& test, const TriggerSpec& trigger, std::size_t target_label,
                                 std::size_t max_samples = 0) {
  auto rows = eligible_rows(test, target_label);
  if (max_samples && rows.size() > max_samples) rows.resize(max_samples);
  if (rows.empty()) throw EvaluationError("no eligible test pairs (every label equals the target)");
  EvalPairs p;
  p.clean = test.select(rows);
  p.poisoned = stamp(p.clean, trigger);
  p.target_label = target_label;
  return p;
}

inline Tensor recover_batch(const EvalPairs& pairs, std::span<const RecoveryMask> masks) {
  if (masks.size() != pairs.size()) throw ShapeError("one recovery mask per pair is required");
  Tensor out = pairs.poisoned.pixels;
  const std::size_t d = out.stride0();
  const Shape img = pairs.clean.image_shape();
  for (std::size_t n = 0; n < pairs.size(); ++n) {
    auto a = pairs.poisoned.pixels.sample(n);
    auto b = pairs.clean.pixels.sample(n);
    Tensor r = recover_sample(Tensor(img, {a.begin(), a.end()}), Tensor(img, {b.begin(), b.end()}), masks[n]);
    std::copy(r.storage().begin(), r.storage().end(), out.data() + n * d);
  }
  return out;
}

/// Fraction of predictions equal to the target over rows with label != target.
inline double attack_success_rate(std::span<const std::size_t> predictions, std::span<const std::size_t> labels,
                                  std::size_t target_label) {
  if (predictions.size() != labels.size()) throw ShapeError("predictions and labels differ in length");
  std::size_t hit = 0, n = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == target_label) continue;
    ++n;
    hit += predictions[i] == target_label;
  }
  if (n == 0) throw EvaluationError("attack success rate over an empty eligible set");
  return static_cast<double>(hit) / static_cast<double>(n);
}

inline double attack_success_rate(ModelHandle& model, const EvalPairs& pairs, std::span<const RecoveryMask> masks) {
  auto pred = predict(model, recover_batch(pairs, masks));
  return attack_success_rate(pred, pairs.clean.labels, pairs.target_label);
}

namespace detail {
inline void check_trigger_mask(const Tensor& trigger_mask) {
  if (trigger_mask.rank() != 2) throw ShapeError("trigger mask must be (H, W)");
  std::size_t s = 0;
  for (double v : trigger_mask.storage()) s += v != 0.0;
  if (s == 0) throw DomainError("trigger recall is undefined for an empty trigger mask");
  if (s == trigger_mask.size())
    throw DomainError("trigger recall is undefined for an all-ones (sample-specific) trigger mask");
}
}  // namespace detail

/// |S n S*| / |S*| for each mask.
inline std::vector<double> trigger_recall_per_sample(std::span<const RecoveryMask> masks, const Tensor& trigger_mask) {
  detail::check_trigger_mask(trigger_mask);
  std::size_t support = 0;
  for (double v : trigger_mask.storage()) support += v != 0.0;
  std::vector<double> out;
  for (const auto& m : masks) {
    if (m.bits.shape() != trigger_mask.shape()) throw ShapeError("recovery mask and trigger mask differ in shape");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < m.bits.size(); ++i) hit += m.bits[i] != 0.0 && trigger_mask[i] != 0.0;
    out.push_back(static_cast<double>(hit) / static_cast<double>(support));
  }
  return out;
}

inline double trigger_recall(std::span<const RecoveryMask> masks, const Tensor& trigger_mask) {
  if (masks.empty()) throw EvaluationError("trigger recall over no masks");
  auto v = trigger_recall_per_sample(masks, trigger_mask);
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// ---------------------------------------------------------------------------
// Fractional change

enum class Space { logit, probability };

inline std::string to_string(Space s) { return s == Space::logit ? "logit" : "probability"; }

inline constexpr double kMinDenominator = 1e-6;

struct FractionalChange {
  double target = 0;      // Delta for y~, clipped to [0, 1]
  double true_class = 0;  // Delta for y, clipped to [0, 1]
  double target_raw = 0;
  double true_raw = 0;
  bool excluded = false;  // a denominator fell below kMinDenominator
};

/// Outputs f(.) of the true class y and target y~ at x, x~ and x^.
inline FractionalChange fractional_change(double fy_x, double fy_poisoned, double fy_recovered, double ft_x,
                                          double ft_poisoned, double ft_recovered) {
  FractionalChange r;
  const double dt = ft_poisoned - ft_x, dy = fy_x - fy_poisoned;
  if (std::abs(dt) < kMinDenominator || std::abs(dy) < kMinDenominator) {
    r.excluded = true;
    return r;
  }
  r.target_raw = (ft_recovered - ft_x) / dt;
  r.true_raw = (fy_recovered - fy_poisoned) / dy;
  r.target = std::clamp(r.target_raw, 0.0, 1.0);
  r.true_class = std::clamp(r.true_raw, 0.0, 1.0);
  return r;
}

/// Single-sample form on (C, H, W) images.
inline FractionalChange fractional_change(ModelHandle& model, const Tensor& x, const Tensor& poisoned,
                                          const Tensor& recovered, std::size_t y, std::size_t target, Space space) {
  require_same_shape(x, poisoned, "fractional_change");
  require_same_shape(x, recovered, "fractional_change");
  if (y >= model.num_classes || target >= model.num_classes) throw IndexError("class index out of range");
  Tensor logits = forward(model, stack(std::vector<Tensor>{x, poisoned, recovered}));
  if (space == Space::probability) logits = softmax_rows(logits);
  const std::size_t K = model.num_classes;
  return fractional_change(logits[y], logits[K + y], logits[2 * K + y], logits[target], logits[K + target],
                           logits[2 * K + target]);
}

/// mean(Delta_y^2 + (1 - Delta_y~)^2): 2 at perfect recovery, 0 at none.
inline double combined_flc(std::span<const double> delta_true, std::span<const double> delta_target) {
  if (delta_true.size() != delta_target.size()) throw ShapeError("combined_flc inputs differ in length");
  if (delta_true.empty()) throw EvaluationError("combined_flc over no samples");
  double s = 0;
  for (std::size_t i = 0; i < delta_true.size(); ++i)
    s += delta_true[i] * delta_true[i] + (1.0 - delta_target[i]) * (1.0 - delta_target[i]);
  return s / static_cast<double>(delta_true.size());
}

// ---------------------------------------------------------------------------
// Sweeps

/// Default recovery-rate grid plus the exact trigger ratio, sorted.
inline std::vector<double> default_k_grid(double trigger_ratio) {
  std::vector<double> g{0.005, 0.01, 0.02, 0.03, 0.05, 0.08, 0.1};
  if (trigger_ratio > 0 && trigger_ratio <= 1 &&
      std::none_of(g.begin(), g.end(), [&](double k) { return std::abs(k - trigger_ratio) < 1e-12; }))
    g.push_back(trigger_ratio);
  std::sort(g.begin(), g.end());
  return g;
}

struct MetricReport {
  std::string method;
  std::string label;
  std::string config_hash;
  nlohmann::json config;
  nlohmann::json context = nlohmann::json::object();  // dataset, trigger visibility, poisoning rate
  std::vector<double> k_values;
  std::vector<double> asr, asr_stderr;
  bool tr_defined = true;
  std::vector<double> tr, tr_stderr;
  std::vector<double> delta_logit_y, delta_logit_target, delta_prob_y, delta_prob_target;
  std::vector<double> delta_logit_y_unclipped, delta_logit_target_unclipped;
  std::vector<double> delta_prob_y_unclipped, delta_prob_target_unclipped;
  std::vector<double> flc, flc_prob;
  std::vector<std::size_t> excluded_logit, excluded_prob;
  std::size_t sample_count = 0;
  std::uint64_t seed = 0;
  bool asr_monotone = true;  // ASR at the largest k <= ASR at the smallest k
  bool tr_monotone = true;   // TR non-decreasing in k

  /// Index of k in the grid (within 1e-12); throws if absent.
  std::size_t k_index(double k) const {
    for (std::size_t i = 0; i < k_values.size(); ++i)
      if (std::abs(k_values[i] - k) < 1e-12) return i;
    throw LookupError("k = " + std::to_string(k) + " is not in the report grid");
  }
};

inline nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json j = {{"method", r.method},
                      {"label", r.label},
                      {"config_hash", r.config_hash},
                      {"config", r.config},
                      {"context", r.context},
                      {"k", r.k_values},
                      {"asr", r.asr},
                      {"asr_stderr", r.asr_stderr},
                      {"tr_defined", r.tr_defined},
                      {"delta_logit_y", r.delta_logit_y},
                      {"delta_logit_target", r.delta_logit_target},
                      {"delta_prob_y", r.delta_prob_y},
                      {"delta_prob_target", r.delta_prob_target},
                      {"delta_logit_y_unclipped", r.delta_logit_y_unclipped},
                      {"delta_logit_target_unclipped", r.delta_logit_target_unclipped},
                      {"delta_prob_y_unclipped", r.delta_prob_y_unclipped},
                      {"delta_prob_target_unclipped", r.delta_prob_target_unclipped},
                      {"flc", r.flc},
                      {"flc_prob", r.flc_prob},
                      {"excluded_logit", r.excluded_logit},
                      {"excluded_prob", r.excluded_prob},
                      {"sample_count", r.sample_count},
                      {"seed", r.seed},
                      {"asr_monotone", r.asr_monotone},
                      {"tr_monotone", r.tr_monotone}};
  j["tr"] = r.tr_defined ? nlohmann::json(r.tr) : nlohmann::json(nullptr);
  j["tr_stderr"] = r.tr_defined ? nlohmann::json(r.tr_stderr) : nlohmann::json(nullptr);
  return j;
}

inline MetricReport report_from_json(const nlohmann::json& j) {
  MetricReport r;
  r.method = j.at("method");
  r.label = j.value("label", r.method);
  r.config_hash = j.at("config_hash");
  r.config = j.value("config", nlohmann::json::object());
  r.context = j.value("context", nlohmann::json::object());
  j.at("k").get_to(r.k_values);
  j.at("asr").get_to(r.asr);
  j.at("asr_stderr").get_to(r.asr_stderr);
  r.tr_defined = j.at("tr_defined");
  if (r.tr_defined) {
    j.at("tr").get_to(r.tr);
    j.at("tr_stderr").get_to(r.tr_stderr);
  }
  j.at("delta_logit_y").get_to(r.delta_logit_y);
  j.at("delta_logit_target").get_to(r.delta_logit_target);
  j.at("delta_prob_y").get_to(r.delta_prob_y);
  j.at("delta_prob_target").get_to(r.delta_prob_target);
  j.at("delta_logit_y_unclipped").get_to(r.delta_logit_y_unclipped);
  j.at("delta_logit_target_unclipped").get_to(r.delta_logit_target_unclipped);
  j.at("delta_prob_y_unclipped").get_to(r.delta_prob_y_unclipped);
  j.at("delta_prob_target_unclipped").get_to(r.delta_prob_target_unclipped);
  j.at("flc").get_to(r.flc);
  j.at("flc_prob").get_to(r.flc_prob);
  j.at("excluded_logit").get_to(r.excluded_logit);
  j.at("excluded_prob").get_to(r.excluded_prob);
  r.sample_count = j.at("sample_count");
  r.seed = j.at("seed");
  r.asr_monotone = j.at("asr_monotone");
  r.tr_monotone = j.at("tr_monotone");
  return r;
}

inline std::string csv_header() {
  return "method,label,config_hash,seed,k,asr,asr_stderr,tr,tr_stderr,delta_logit_y,delta_logit_target,"
         "delta_prob_y,delta_prob_target,flc,flc_prob,excluded_logit,excluded_prob,sample_count\n";
}

/// One row per k; TR cells are empty when undefined.
inline std::string csv_rows(const MetricReport& r) {
  std::ostringstream o;
  o.precision(17);
  for (std::size_t i = 0; i < r.k_values.size(); ++i) {
    o << r.method << ',' << r.label << ',' << r.config_hash << ',' << r.seed << ',' << r.k_values[i] << ','
      << r.asr[i] << ',' << r.asr_stderr[i] << ',';
    if (r.tr_defined) o << r.tr[i] << ',' << r.tr_stderr[i];
    else o << ',';
    o << ',' << r.delta_logit_y[i] << ',' << r.delta_logit_target[i] << ',' << r.delta_prob_y[i] << ','
      << r.delta_prob_target[i] << ',' << r.flc[i] << ',' << r.flc_prob[i] << ',' << r.excluded_logit[i] << ','
      << r.excluded_prob[i] << ',' << r.sample_count << '\n';
  }
  return o.str();
}

/// Writes <stem>.json and <stem>.csv, stem = <label>_<hash>_s<seed>.
inline std::filesystem::path save_report(const MetricReport& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::string stem = r.label + "_" + r.config_hash + "_s" + std::to_string(r.seed);
  std::ofstream(dir / (stem + ".json")) << to_json(r).dump(2) << '\n';
  std::ofstream(dir / (stem + ".csv")) << csv_header() << csv_rows(r);
  return dir / (stem + ".json");
}

inline MetricReport load_report(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IngestionError(path.string(), "cannot open metric report");
  return report_from_json(nlohmann::json::parse(f));
}

namespace detail {

inline double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

inline double stderr_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
}

}  // namespace detail

struct SweepOptions {
  std::string method;
  std::string label;
  std::string config_hash;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json context = nlohmann::json::object();
  std::uint64_t seed = 0;
  const Tensor* trigger_mask = nullptr;  // (H, W); TR is reported only for fixed masks
};

/// Every metric at every k for maps (N, H, W) aligned with `pairs`.
inline MetricReport sweep_recovery_rates(ModelHandle& model, const EvalPairs& pairs, const Tensor& maps,
                                         const std::vector<double>& k_grid, const SweepOptions& opt) {
  if (k_grid.empty()) throw DomainError("empty k grid");
  if (!std::is_sorted(k_grid.begin(), k_grid.end())) throw DomainError("k grid must be sorted ascending");
  for (double k : k_grid) mask_count(k, 1);
  const std::size_t N = pairs.size();
  if (N == 0) throw EvaluationError("no eligible pairs to evaluate");
  if (maps.rank() != 3 || maps.dim(0) != N || maps.dim(1) != pairs.clean.height() ||
      maps.dim(2) != pairs.clean.width())
    throw ShapeError("maps " + shape_str(maps.shape()) + " do not match " + std::to_string(N) + " pairs");
  const std::size_t H = maps.dim(1), W = maps.dim(2), K = model.num_classes, t = pairs.target_label;

  MetricReport r;
  r.method = opt.method;
  r.label = opt.label.empty() ? opt.method : opt.label;
  r.config_hash = opt.config_hash;
  r.config = opt.config;
  r.context = opt.context;
  r.seed = opt.seed;
  r.k_values = k_grid;
  r.sample_count = N;
  r.tr_defined = false;
  if (opt.trigger_mask) {
    std::size_t s = 0;
    for (double v : opt.trigger_mask->storage()) s += v != 0.0;
    r.tr_defined = s > 0 && s < opt.trigger_mask->size();
  }

  std::vector<std::vector<std::size_t>> order(N);
  for (std::size_t n = 0; n < N; ++n) order[n] = rank_pixels(maps.sample(n));

  const Tensor lx = forward_chunked(model, pairs.clean.pixels);
  const Tensor lp = forward_chunked(model, pairs.poisoned.pixels);
  const Tensor px = softmax_rows(lx), pp = softmax_rows(lp);

  for (double k : k_grid) {
    std::vector<RecoveryMask> masks;
    masks.reserve(N);
    for (std::size_t n = 0; n < N; ++n) masks.push_back(mask_from_ranking(order[n], H, W, k));
    const Tensor lr = forward_chunked(model, recover_batch(pairs, masks));
    const Tensor pr = softmax_rows(lr);

    std::size_t hit = 0;
    std::vector<double> ly, lt, py, pt, ly_raw, lt_raw, py_raw, pt_raw;
    std::size_t ex_l = 0, ex_p = 0;
    for (std::size_t n = 0; n < N; ++n) {
      auto row = lr.sample(n);
      const std::size_t pred = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      hit += pred == t;
      const std::size_t y = pairs.clean.labels[n];
      auto fl = fractional_change(lx[n * K + y], lp[n * K + y], lr[n * K + y], lx[n * K + t], lp[n * K + t],
                                  lr[n * K + t]);
      if (fl.excluded) ++ex_l;
      else {
        ly.push_back(fl.true_class), lt.push_back(fl.target);
        ly_raw.push_back(fl.true_raw), lt_raw.push_back(fl.target_raw);
      }
      auto fp = fractional_change(px[n * K + y], pp[n * K + y], pr[n * K + y], px[n * K + t], pp[n * K + t],
                                  pr[n * K + t]);
      if (fp.excluded) ++ex_p;
      else {
        py.push_back(fp.true_class), pt.push_back(fp.target);
        py_raw.push_back(fp.true_raw), pt_raw.push_back(fp.target_raw);
      }
    }
    const double a = static_cast<double>(hit) / static_cast<double>(N);
    r.asr.push_back(a);
    r.asr_stderr.push_back(std::sqrt(a * (1 - a) / static_cast<double>(N)));
    if (r.tr_defined) {
      auto tr = trigger_recall_per_sample(masks, *opt.trigger_mask);
      r.tr.push_back(detail::mean_of(tr));
      r.tr_stderr.push_back(detail::stderr_of(tr));
    }
    r.delta_logit_y.push_back(detail::mean_of(ly));
    r.delta_logit_target.push_back(detail::mean_of(lt));
    r.delta_prob_y.push_back(detail::mean_of(py));
    r.delta_prob_target.push_back(detail::mean_of(pt));
    r.delta_logit_y_unclipped.push_back(detail::mean_of(ly_raw));
    r.delta_logit_target_unclipped.push_back(detail::mean_of(lt_raw));
    r.delta_prob_y_unclipped.push_back(detail::mean_of(py_raw));
    r.delta_prob_target_unclipped.push_back(detail::mean_of(pt_raw));
    r.flc.push_back(ly.empty() ? 0.0 : combined_flc(ly, lt));
    r.flc_prob.push_back(py.empty() ? 0.0 : combined_flc(py, pt));
    r.excluded_logit.push_back(ex_l);
    r.excluded_prob.push_back(ex_p);
  }
  r.asr_monotone = r.asr.back() <= r.asr.front();
  if (r.tr_defined)
    for (std::size_t i = 1; i < r.tr.size(); ++i) r.tr_monotone = r.tr_monotone && r.tr[i] >= r.tr[i - 1];
  return r;
}

// ---------------------------------------------------------------------------
// Pseudo-methods

/// The trigger mask itself as an attribution map for every pair.
inline Tensor oracle_maps(const Tensor& trigger_mask, std::size_t n) {
  if (trigger_mask.rank() != 2) throw ShapeError("trigger mask must be (H, W)");
  Tensor out({n, trigger_mask.dim(0), trigger_mask.dim(1)});
  for (std::size_t i = 0; i < n; ++i)
    std::copy(trigger_mask.storage().begin(), trigger_mask.storage().end(), out.data() + i * trigger_mask.size());
  return out;
}

/// Independent uniform [0, 1) scores per pixel and sample.
inline Tensor random_maps(std::size_t n, std::size_t h, std::size_t w, std::uint64_t seed) {
  Tensor out({n, h, w});
  Rng rng(derive_seed(seed, 0x4a4d));
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (auto& v : out.storage()) v = uni(rng);
  return out;
}

}  // namespace backx
