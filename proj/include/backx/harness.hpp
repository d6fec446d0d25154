#pragma once

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "backx/attribution.hpp"
#include "backx/backdoor.hpp"
#include "backx/datasets.hpp"
#include "backx/error.hpp"
#include "backx/evaluation.hpp"
#include "backx/model.hpp"
#include "backx/plot.hpp"
#include "backx/png_io.hpp"
#include "backx/random.hpp"

namespace backx {

inline constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Experiment configuration

struct DatasetSpec {
  std::string name = "synthetic";
  std::string root;  // on-disk datasets only
  std::size_t num_classes = 4;
  std::size_t samples_per_class = 500;
  std::size_t test_per_class = 100;
  std::size_t image_size = 32;
};

struct ModelSpec {
  std::string architecture = "desk_cnn";
  std::vector<std::size_t> widths{8, 16, 16};
};

struct TriggerConfig {
  std::string kind = "fixed_watermark";
  std::size_t patch_h = 5, patch_w = 6;
  std::optional<std::size_t> top, left;  // default: bottom-right corner
  double alpha = 0.5;
  std::string style = "checkerboard";
  double amplitude = 8.0 / 255.0;     // sample_specific only
  std::optional<std::uint64_t> key;  // sample_specific only; default derived from the seed
};

struct PoisonConfig {
  TriggerConfig trigger;
  double rate = 0.1;
  std::optional<std::size_t> target_label;
};

struct GateConfig {
  double min_poisoned_accuracy = 0.99;
  double max_clean_drop = 0.02;
};

struct ExperimentConfig {
  DatasetSpec dataset;
  ModelSpec model;
  TrainingSchedule schedule;
  PoisonConfig poison;
  GateConfig gate;
  std::vector<nlohmann::json> methods;  // attribution presets, e.g. {"method": "grad"}
  std::vector<double> k_grid;           // empty: default grid
  bool include_oracle = true;
  bool include_random = true;
  std::size_t max_eval_samples = 0;  // 0: every eligible test pair
  std::size_t png_samples = 4;       // heatmaps written per method
  std::string out = "runs/desk";
  std::uint64_t seed = 0;
};

namespace detail {
template <class T>
nlohmann::json opt_json(const std::optional<T>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}
template <class T>
std::optional<T> opt_from(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<T>();
}
}  // namespace detail

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json schedule = c.schedule;
  const auto& t = c.poison.trigger;
  return {{"dataset",
           {{"name", c.dataset.name},
            {"root", c.dataset.root},
            {"num_classes", c.dataset.num_classes},
            {"samples_per_class", c.dataset.samples_per_class},
            {"test_per_class", c.dataset.test_per_class},
            {"image_size", c.dataset.image_size}}},
          {"model", {{"architecture", c.model.architecture}, {"widths", c.model.widths}}},
          {"schedule", schedule},
          {"poison",
           {{"trigger",
             {{"kind", t.kind},
              {"patch_h", t.patch_h},
              {"patch_w", t.patch_w},
              {"top", detail::opt_json(t.top)},
              {"left", detail::opt_json(t.left)},
              {"alpha", t.alpha},
              {"style", t.style},
              {"amplitude", t.amplitude},
              {"key", detail::opt_json(t.key)}}},
            {"rate", c.poison.rate},
            {"target_label", detail::opt_json(c.poison.target_label)}}},
          {"gate", {{"min_poisoned_accuracy", c.gate.min_poisoned_accuracy}, {"max_clean_drop", c.gate.max_clean_drop}}},
          {"methods", c.methods},
          {"k_grid", c.k_grid},
          {"include_oracle", c.include_oracle},
          {"include_random", c.include_random},
          {"max_eval_samples", c.max_eval_samples},
          {"png_samples", c.png_samples},
          {"out", c.out},
          {"seed", c.seed}};
}

/// Missing fields keep their defaults; a missing "methods" list means every
/// method with its preset.
inline ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  const nlohmann::json empty = nlohmann::json::object();
  const auto& d = j.contains("dataset") ? j.at("dataset") : empty;
  c.dataset.name = d.value("name", c.dataset.name);
  c.dataset.root = d.value("root", c.dataset.root);
  c.dataset.num_classes = d.value("num_classes", c.dataset.num_classes);
  c.dataset.samples_per_class = d.value("samples_per_class", c.dataset.samples_per_class);
  c.dataset.test_per_class = d.value("test_per_class", c.dataset.test_per_class);
  c.dataset.image_size = d.value("image_size", c.dataset.image_size);
  const auto& m = j.contains("model") ? j.at("model") : empty;
  c.model.architecture = m.value("architecture", c.model.architecture);
  c.model.widths = m.value("widths", c.model.widths);
  if (j.contains("schedule")) c.schedule = j.at("schedule").get<TrainingSchedule>();
  const auto& p = j.contains("poison") ? j.at("poison") : empty;
  const auto& t = p.contains("trigger") ? p.at("trigger") : empty;
  auto& tc = c.poison.trigger;
  tc.kind = t.value("kind", tc.kind);
  tc.patch_h = t.value("patch_h", tc.patch_h);
  tc.patch_w = t.value("patch_w", tc.patch_w);
  tc.top = detail::opt_from<std::size_t>(t, "top");
  tc.left = detail::opt_from<std::size_t>(t, "left");
  tc.alpha = t.value("alpha", tc.alpha);
  tc.style = t.value("style", tc.style);
  tc.amplitude = t.value("amplitude", tc.amplitude);
  tc.key = detail::opt_from<std::uint64_t>(t, "key");
  c.poison.rate = p.value("rate", c.poison.rate);
  c.poison.target_label = detail::opt_from<std::size_t>(p, "target_label");
  const auto& g = j.contains("gate") ? j.at("gate") : empty;
  c.gate.min_poisoned_accuracy = g.value("min_poisoned_accuracy", c.gate.min_poisoned_accuracy);
  c.gate.max_clean_drop = g.value("max_clean_drop", c.gate.max_clean_drop);
  if (j.contains("methods")) {
    for (const auto& e : j.at("methods")) c.methods.push_back(e.is_string() ? nlohmann::json{{"method", e}} : e);
  } else {
    for (Method mm : kAllMethods) c.methods.push_back({{"method", to_string(mm)}});
  }
  c.k_grid = j.value("k_grid", c.k_grid);
  c.include_oracle = j.value("include_oracle", c.include_oracle);
  c.include_random = j.value("include_random", c.include_random);
  c.max_eval_samples = j.value("max_eval_samples", c.max_eval_samples);
  c.png_samples = j.value("png_samples", c.png_samples);
  c.out = j.value("out", c.out);
  c.seed = j.value("seed", c.seed);
  return c;
}

inline ExperimentConfig load_experiment(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IngestionError(path.string(), "cannot open config");
  try {
    return experiment_from_json(nlohmann::json::parse(f));
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError(path.string(), std::string("invalid config: ") + e.what());
  }
}

/// Pure function of every field.
inline std::string experiment_hash(const ExperimentConfig& c) { return checksum(to_json(c).dump()); }

/// Stage keys: each covers only the fields its stage and its upstream read.
inline std::string poison_stage_hash(const ExperimentConfig& c) {
  auto j = to_json(c);
  return checksum(nlohmann::json{{"dataset", j["dataset"]}, {"poison", j["poison"]}, {"seed", c.seed}, {"v", kVersion}}
                      .dump());
}

inline std::string train_stage_hash(const ExperimentConfig& c) {
  auto j = to_json(c);
  return checksum(
      nlohmann::json{{"up", poison_stage_hash(c)}, {"model", j["model"]}, {"schedule", j["schedule"]}, {"gate", j["gate"]}}
          .dump());
}

inline std::string attribute_stage_hash(const ExperimentConfig& c) {
  return checksum(nlohmann::json{{"up", train_stage_hash(c)},
                                 {"methods", c.methods},
                                 {"max_eval_samples", c.max_eval_samples},
                                 {"png_samples", c.png_samples}}
                      .dump());
}

inline std::string evaluate_stage_hash(const ExperimentConfig& c) {
  return checksum(nlohmann::json{{"up", attribute_stage_hash(c)},
                                 {"k_grid", c.k_grid},
                                 {"include_oracle", c.include_oracle},
                                 {"include_random", c.include_random}}
                      .dump());
}

// ---------------------------------------------------------------------------
// Run ledger

namespace detail {

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream o;
  o << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return o.str();
}

inline std::string platform_fingerprint() {
  std::string os =
#if defined(__linux__)
      "linux";
#elif defined(__APPLE__)
      "macos";
#else
      "unknown";
#endif
  std::string arch =
#if defined(__x86_64__)
      "x86_64";
#elif defined(__aarch64__)
      "aarch64";
#else
      "unknown";
#endif
#if defined(__VERSION__)
  return os + "/" + arch + "/" + __VERSION__;
#else
  return os + "/" + arch;
#endif
}

inline std::string single_file_checksum(const std::filesystem::path& p) { return file_checksum({p}); }

inline std::vector<std::filesystem::path> files_under(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  if (!std::filesystem::exists(dir)) return out;
  if (std::filesystem::is_regular_file(dir)) return {dir};
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

struct StageRecord {
  std::string hash;
  std::string started, finished;
  bool cache_hit = false;
  std::vector<std::string> artifacts;
};

/// ledger.json: config hash, per-stage timestamps and artifacts, checksums
/// of every artifact, software version and platform.
class RunLedger {
 public:
  std::string config_hash;
  std::string version = kVersion;
  std::string platform = detail::platform_fingerprint();
  std::map<std::string, StageRecord> stages;
  std::map<std::string, std::string> artifacts;  // absolute path -> checksum
  std::vector<std::string> unreferenced;         // files found under the output directory at close

  static RunLedger load(const std::filesystem::path& path) {
    RunLedger l;
    std::ifstream f(path);
    if (!f) return l;
    auto j = nlohmann::json::parse(f);
    l.config_hash = j.value("config_hash", "");
    for (const auto& [name, s] : j.at("stages").items())
      l.stages[name] = {s.at("hash"), s.at("started"), s.at("finished"), s.at("cache_hit"),
                        s.at("artifacts").get<std::vector<std::string>>()};
    l.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
    return l;
  }

  void record(const std::string& stage, const std::string& hash, const std::string& started, bool cache_hit,
              const std::vector<std::filesystem::path>& files) {
    if (auto it = stages.find(stage); it != stages.end())
      for (const auto& a : it->second.artifacts) artifacts.erase(a);
    StageRecord r{hash, started, detail::utc_now(), cache_hit, {}};
    for (const auto& f : files) {
      const std::string p = std::filesystem::absolute(f).lexically_normal().string();
      r.artifacts.push_back(p);
      artifacts[p] = detail::single_file_checksum(f);
    }
    stages[stage] = std::move(r);
  }

  nlohmann::json json() const {
    nlohmann::json s = nlohmann::json::object();
    for (const auto& [name, r] : stages)
      s[name] = {{"hash", r.hash},
                 {"started", r.started},
                 {"finished", r.finished},
                 {"cache_hit", r.cache_hit},
                 {"artifacts", r.artifacts}};
    return {{"config_hash", config_hash}, {"version", version},       {"platform", platform},
            {"stages", s},                {"artifacts", artifacts},   {"unreferenced", unreferenced}};
  }

  void save(const std::filesystem::path& path) const {
    std::filesystem::create_directories(path.parent_path());
    std::ofstream(path) << json().dump(2) << '\n';
  }

  /// Verifies every referenced artifact exists with a matching checksum and
  /// lists files under `out` that no stage references.
  void close(const std::filesystem::path& out) {
    for (const auto& [p, sum] : artifacts) {
      if (!std::filesystem::exists(p)) throw Error("ledger artifact missing: " + p);
      if (detail::single_file_checksum(p) != sum) throw Error("ledger artifact changed: " + p);
    }
    unreferenced.clear();
    const auto self = std::filesystem::absolute(out / "ledger.json").lexically_normal().string();
    for (const auto& f : detail::files_under(out)) {
      const auto p = std::filesystem::absolute(f).lexically_normal().string();
      if (p != self && !artifacts.count(p)) unreferenced.push_back(p);
    }
  }
};

// ---------------------------------------------------------------------------
// Pipeline

using Logger = std::function<void(const std::string&)>;

inline Logger stderr_logger() {
  return [](const std::string& s) { std::cerr << s << '\n'; };
}

struct TrainResult {
  TrojanModelCard card;
  GateResult gate;
  std::filesystem::path dir;
  bool cache_hit = false;
};

struct MethodMaps {
  std::string label;
  AttributionConfig config;
  Tensor maps;  // (N, H, W)
};

struct AttributeResult {
  EvalPairs pairs;
  std::vector<std::size_t> test_rows;
  std::vector<MethodMaps> methods;
  std::filesystem::path dir;
  bool cache_hit = false;
};

struct ReportResult {
  std::vector<std::filesystem::path> files;
};

/// One experiment run rooted at an output directory. Stages cache their
/// artifacts under <cache>/<stage>/<stage hash>/ and record them in
/// <out>/ledger.json. With `force`, cached stages are recomputed.
class Pipeline {
 public:
  explicit Pipeline(ExperimentConfig config, bool force = false, Logger log = stderr_logger())
      : config_(std::move(config)), force_(force), log_(std::move(log)) {
    out_ = config_.out;
    const char* env = std::getenv("BACKX_CACHE");
    cache_ = env && *env ? std::filesystem::path(env) : out_ / "cache";
    ledger_ = RunLedger::load(ledger_path());
    ledger_.config_hash = experiment_hash(config_);
  }

  const ExperimentConfig& config() const { return config_; }
  const std::filesystem::path& out_dir() const { return out_; }
  const std::filesystem::path& cache_dir() const { return cache_; }
  std::filesystem::path ledger_path() const { return out_ / "ledger.json"; }
  std::filesystem::path reports_dir() const { return out_ / "reports"; }
  std::filesystem::path plots_dir() const { return out_ / "plots"; }
  std::filesystem::path poison_dir() const { return cache_ / "poison" / poison_stage_hash(config_); }
  std::filesystem::path train_dir() const { return cache_ / "train" / train_stage_hash(config_); }
  std::filesystem::path maps_dir() const { return cache_ / "maps" / attribute_stage_hash(config_); }
  RunLedger& ledger() { return ledger_; }

  const DatasetHandle& dataset() {
    if (!dataset_) {
      const auto& d = config_.dataset;
      if (d.name == "synthetic")
        dataset_ = synthesize_dataset(d.num_classes, d.samples_per_class, d.image_size, config_.seed, d.test_per_class);
      else
        dataset_ = load_dataset(d.name, d.root);
      train_ = dataset_->train.materialize();
      test_ = dataset_->test.materialize();
    }
    return *dataset_;
  }
  const ImageBatch& clean_train() { return dataset(), *train_; }
  const ImageBatch& test() { return dataset(), *test_; }

  std::size_t target_label() {
    return config_.poison.target_label.value_or(default_target_label(dataset().name));
  }

  TriggerSpec trigger() {
    const auto& t = config_.poison.trigger;
    const Shape shape = dataset().image_shape();
    if (t.kind == "fixed_watermark") {
      if (t.top || t.left)
        return make_fixed_trigger(shape, t.top.value_or(0), t.left.value_or(0), t.patch_h, t.patch_w, t.alpha, t.style);
      return make_corner_trigger(shape, t.patch_h, t.patch_w, t.alpha, t.style);
    }
    if (t.kind == "sample_specific")
      return make_sample_specific_trigger(t.key.value_or(derive_seed(config_.seed, 0x55b)), test().slice(0, 1),
                                          t.amplitude);
    throw DomainError("unknown trigger kind '" + t.kind + "'");
  }

  PoisonPlan plan() {
    PoisonPlan p;
    p.trigger = trigger();
    p.poisoning_rate = config_.poison.rate;
    p.target_label = target_label();
    p.seed = derive_seed(config_.seed, 0x9015);
    if (p.target_label >= dataset().num_classes) throw IndexError("target label out of range");
    return p;
  }

  TrainingSchedule schedule() const {
    TrainingSchedule s = config_.schedule;
    s.seed = derive_seed(config_.seed, s.seed);
    return s;
  }

  /// Poisoned training set D~ with provenance. Idempotent per stage hash.
  const PoisonedDataset& poison() {
    if (poisoned_) return *poisoned_;
    const auto started = detail::utc_now();
    const auto dir = poison_dir();
    const auto hash = poison_stage_hash(config_);
    if (!force_ && stage_done(dir, hash)) {
      log_("[poison] cache hit " + hash);
      poisoned_ = load_poisoned_dataset(dir);
      finish("poison", hash, started, true, dir);
      return *poisoned_;
    }
    const auto p = plan();
    auto d = poison_dataset(clean_train(), p);
    std::filesystem::remove_all(dir);
    save_poisoned_dataset(d, p, dir);
    mark_done(dir, hash);
    log_("[poison] " + std::to_string(d.poisoned_indices.size()) + " of " + std::to_string(d.data.size()) +
         " training samples stamped -> " + dir.string());
    finish("poison", hash, started, false, dir);
    poisoned_ = std::move(d);
    return *poisoned_;
  }

  /// Trains trojan and benign twin, then applies the verification gate.
  /// Throws GateError (after persisting the card) when the gate fails.
  const TrainResult& train() {
    if (trained_) {
      check_gate(*trained_);
      return *trained_;
    }
    const auto started = detail::utc_now();
    const auto dir = train_dir();
    const auto hash = train_stage_hash(config_);
    TrainResult r;
    r.dir = dir;
    if (!force_ && stage_done(dir, hash)) {
      log_("[train] cache hit " + hash);
      r.card = load_card(dir);
      r.cache_hit = true;
    } else {
      const auto& poisoned = poison();
      const auto p = plan();
      const auto& ds = dataset();
      ModelHandle init = make_model(ds);
      log_("[train] fitting trojan and benign twin (" + std::to_string(config_.schedule.epochs) + " epochs)");
      r.card = trojan_train(init, clean_train(), poisoned, test(), schedule(), p);
      std::filesystem::remove_all(dir);
      save_card(r.card, dir);
      mark_done(dir, hash);
    }
    r.gate = verify_trojan(r.card, config_.gate.min_poisoned_accuracy, config_.gate.max_clean_drop);
    if (!r.cache_hit) {
      auto j = read_json(dir / "card.json");
      j["gate"] = {{"pass", r.gate.pass}, {"reasons", r.gate.reasons}};
      j["usable"] = r.gate.pass;
      std::ofstream(dir / "card.json") << j.dump(2) << '\n';
    }
    std::ostringstream msg;
    msg << "[train] clean " << r.card.clean_accuracy << " poisoned " << r.card.poisoned_accuracy << " twin "
        << r.card.benign_twin_accuracy << (r.gate.pass ? " gate pass" : " gate FAIL");
    log_(msg.str());
    finish("train", hash, started, r.cache_hit, dir);
    trained_ = std::move(r);
    check_gate(*trained_);
    return *trained_;
  }

  /// Attribution configs resolved from the method list, keyed by label.
  std::vector<std::pair<std::string, AttributionConfig>> attribution_configs() {
    std::vector<std::pair<std::string, AttributionConfig>> out;
    std::set<std::string> seen;
    for (const auto& j : config_.methods) {
      auto c = config_from_json(j, target_label(), derive_seed(config_.seed, 0xa77));
      const std::string label = j.value("label", config_label(c));
      if (!seen.insert(label).second) throw DomainError("duplicate method label '" + label + "'");
      out.emplace_back(label, c);
    }
    return out;
  }

  /// Maps for every configured method over the eligible test pairs, with
  /// y~ as the explained class and x~ as the input.
  const AttributeResult& attribute() {
    if (attributed_) return *attributed_;
    const TrainResult& tr = train();
    const auto started = detail::utc_now();
    const auto dir = maps_dir();
    const auto hash = attribute_stage_hash(config_);
    AttributeResult r;
    r.dir = dir;
    const auto p = plan();
    r.test_rows = eligible_rows(test(), p.target_label);
    if (config_.max_eval_samples && r.test_rows.size() > config_.max_eval_samples)
      r.test_rows.resize(config_.max_eval_samples);
    r.pairs = make_eval_pairs(test(), p.trigger, p.target_label, config_.max_eval_samples);
    const auto configs = attribution_configs();
    if (!force_ && stage_done(dir, hash)) {
      log_("[attribute] cache hit " + hash);
      for (const auto& [label, c] : configs) r.methods.push_back({label, c, read_tensor(dir / (label + ".bxt"))});
      r.cache_hit = true;
      finish("attribute", hash, started, true, dir);
      attributed_ = std::move(r);
      return *attributed_;
    }
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir / "samples");
    ModelHandle model = tr.card.model;
    const PoisonedDataset& poisoned = poison();
    std::map<std::string, Tensor> raw_cache;
    for (const auto& [label, c] : configs) {
      const auto t0 = std::chrono::steady_clock::now();
      auto key_json = to_json(c);
      key_json.erase("postprocess");
      key_json.erase("channel_reduce");
      const std::string key = key_json.dump();
      if (!raw_cache.count(key)) raw_cache[key] = raw_maps(model, r.pairs.poisoned, c, poisoned.data);
      const Tensor& raw = raw_cache[key];
      if (!raw.all_finite()) throw Error(label + " produced non-finite attributions");
      AttributionMap m = postprocess(raw, c);
      r.methods.push_back({label, c, m.values});
      write_tensor(dir / (label + ".bxt"), m.values);
      nlohmann::json side = {{"label", label},
                             {"config", to_json(c)},
                             {"config_hash", config_hash(c)},
                             {"test_rows", r.test_rows},
                             {"shape", m.values.shape()},
                             {"checksum", checksum(m.values.values())}};
      std::ofstream(dir / (label + ".json")) << side.dump(2) << '\n';
      for (std::size_t n = 0; n < std::min(config_.png_samples, r.pairs.size()); ++n)
        save_attribution(m, n, r.test_rows[n], dir / "samples", true);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::ostringstream msg;
      msg << "[attribute] " << label << " " << std::fixed << std::setprecision(1) << secs << "s";
      log_(msg.str());
    }
    for (std::size_t n = 0; n < std::min(config_.png_samples, r.pairs.size()); ++n) {
      auto img = [&](const ImageBatch& b) {
        auto s = b.pixels.sample(n);
        return Tensor(b.image_shape(), std::vector<double>(s.begin(), s.end()));
      };
      png::write(dir / "samples" / ("s" + std::to_string(r.test_rows[n]) + "_poisoned.png"), img(r.pairs.poisoned));
      png::write(dir / "samples" / ("s" + std::to_string(r.test_rows[n]) + "_clean.png"), img(r.pairs.clean));
    }
    mark_done(dir, hash);
    finish("attribute", hash, started, false, dir);
    attributed_ = std::move(r);
    return *attributed_;
  }

  std::vector<double> k_grid() {
    const auto t = trigger();
    const bool fixed = t.kind == TriggerKind::fixed_watermark && !t.full_mask();
    if (config_.k_grid.empty()) return default_k_grid(fixed ? t.ratio() : 0.0);
    std::vector<double> g = config_.k_grid;
    if (fixed && std::none_of(g.begin(), g.end(), [&](double k) { return std::abs(k - t.ratio()) < 1e-12; }))
      g.push_back(t.ratio());
    std::sort(g.begin(), g.end());
    return g;
  }

  /// Sweeps every method (plus the oracle and random pseudo-methods) over
  /// the k grid; writes one JSON + CSV report per method.
  std::vector<MetricReport> evaluate() {
    const AttributeResult& ar = attribute();
    const TrainResult& tr = train();
    ModelHandle model = tr.card.model;
    const auto started = detail::utc_now();
    const auto hash = evaluate_stage_hash(config_);
    const auto p = plan();
    const auto grid = k_grid();
    const bool fixed = p.trigger.kind == TriggerKind::fixed_watermark && !p.trigger.full_mask();
    nlohmann::json context = {{"dataset", dataset().name},
                              {"trigger_kind", to_string(p.trigger.kind)},
                              {"alpha", p.trigger.alpha},
                              {"poisoning_rate", p.poisoning_rate},
                              {"trigger_ratio", p.trigger.ratio()},
                              {"target_label", p.target_label},
                              {"poisoned_accuracy", tr.card.poisoned_accuracy},
                              {"clean_accuracy", tr.card.clean_accuracy}};
    std::vector<MethodMaps> all = ar.methods;
    const std::size_t N = ar.pairs.size(), H = ar.pairs.clean.height(), W = ar.pairs.clean.width();
    if (config_.include_oracle && fixed)
      all.push_back({"oracle", {}, oracle_maps(p.trigger.mask, N)});
    if (config_.include_random)
      all.push_back({"random", {}, random_maps(N, H, W, derive_seed(config_.seed, 0x4a4d))});
    std::filesystem::remove_all(reports_dir());
    std::vector<MetricReport> reports;
    std::vector<std::filesystem::path> files;
    for (const auto& m : all) {
      SweepOptions opt;
      const bool pseudo = m.label == "oracle" || m.label == "random";
      opt.method = pseudo ? m.label : to_string(m.config.method);
      opt.label = m.label;
      opt.config = pseudo ? nlohmann::json{{"method", m.label}} : to_json(m.config);
      opt.config_hash = checksum(opt.config.dump()).substr(0, 12);
      opt.context = context;
      opt.seed = config_.seed;
      opt.trigger_mask = fixed ? &p.trigger.mask : nullptr;
      auto rep = sweep_recovery_rates(model, ar.pairs, m.maps, grid, opt);
      const auto path = save_report(rep, reports_dir());
      files.push_back(path);
      files.push_back(std::filesystem::path(path).replace_extension(".csv"));
      reports.push_back(std::move(rep));
    }
    log_("[evaluate] " + std::to_string(reports.size()) + " reports over " + std::to_string(N) + " pairs -> " +
         reports_dir().string());
    finish("evaluate", hash, started, false, files);
    return reports;
  }

  /// Plots and summary from the reports under <out>/reports plus any extra
  /// report directories (for visibility or poisoning-rate comparisons).
  ReportResult report(const std::vector<std::filesystem::path>& extra_dirs = {}) {
    const auto started = detail::utc_now();
    std::vector<MetricReport> reports;
    std::vector<std::filesystem::path> dirs{reports_dir()};
    dirs.insert(dirs.end(), extra_dirs.begin(), extra_dirs.end());
    for (const auto& d : dirs)
      for (const auto& f : detail::files_under(d))
        if (f.extension() == ".json") reports.push_back(load_report(f));
    auto r = write_report(reports, out_);
    finish("report", checksum(std::to_string(reports.size()) + evaluate_stage_hash(config_)), started, false, r.files);
    return r;
  }

  /// Writes plots and summary.md for `reports` under `out`.
  static ReportResult write_report(const std::vector<MetricReport>& reports, const std::filesystem::path& out);

  void close() {
    ledger_.close(out_);
    ledger_.save(ledger_path());
  }

 private:
  ExperimentConfig config_;
  bool force_ = false;
  Logger log_;
  std::filesystem::path out_, cache_;
  RunLedger ledger_;
  std::optional<DatasetHandle> dataset_;
  std::optional<ImageBatch> train_, test_;
  std::optional<PoisonedDataset> poisoned_;
  std::optional<TrainResult> trained_;
  std::optional<AttributeResult> attributed_;

  static void check_gate(const TrainResult& r) {
    if (r.gate.pass) return;
    std::string why;
    for (const auto& s : r.gate.reasons) why += (why.empty() ? "" : "; ") + s;
    throw GateError("trojan failed verification: " + why);
  }

  static nlohmann::json read_json(const std::filesystem::path& p) {
    std::ifstream f(p);
    if (!f) throw IngestionError(p.string(), "cannot open");
    return nlohmann::json::parse(f);
  }

  static bool stage_done(const std::filesystem::path& dir, const std::string& hash) {
    std::ifstream f(dir / "stage.json");
    if (!f) return false;
    return nlohmann::json::parse(f).value("hash", "") == hash;
  }

  static void mark_done(const std::filesystem::path& dir, const std::string& hash) {
    std::ofstream(dir / "stage.json") << nlohmann::json{{"hash", hash}, {"version", kVersion}}.dump(2) << '\n';
  }

  void finish(const std::string& stage, const std::string& hash, const std::string& started, bool hit,
              const std::filesystem::path& dir) {
    finish(stage, hash, started, hit, detail::files_under(dir));
  }

  void finish(const std::string& stage, const std::string& hash, const std::string& started, bool hit,
              const std::vector<std::filesystem::path>& files) {
    ledger_.record(stage, hash, started, hit, files);
    ledger_.save(ledger_path());
  }

  ModelHandle make_model(const DatasetHandle& ds) const {
    if (config_.model.architecture != "desk_cnn")
      throw DomainError("unknown architecture '" + config_.model.architecture + "'");
    return make_desk_cnn(ds.image_shape(), ds.num_classes, ds.normalization, derive_seed(config_.seed, 0x3141),
                         config_.model.widths);
  }

  void save_card(TrojanModelCard& card, const std::filesystem::path& dir) const {
    save_model(card.model, dir / "trojan");
    save_model(card.benign_twin, dir / "twin");
    nlohmann::json j = {{"clean_accuracy", card.clean_accuracy},
                        {"poisoned_accuracy", card.poisoned_accuracy},
                        {"benign_twin_accuracy", card.benign_twin_accuracy},
                        {"benign_twin_poisoned_rate", card.benign_twin_poisoned_rate},
                        {"trojan_losses", card.trojan_losses},
                        {"benign_losses", card.benign_losses},
                        {"plan", plan_to_json(card.plan)},
                        {"schedule", schedule()}};
    std::ofstream(dir / "card.json") << j.dump(2) << '\n';
  }

  TrojanModelCard load_card(const std::filesystem::path& dir) {
    auto j = read_json(dir / "card.json");
    TrojanModelCard c;
    c.model = load_model(dir / "trojan");
    c.benign_twin = load_model(dir / "twin");
    c.plan = plan();
    c.clean_accuracy = j.at("clean_accuracy");
    c.poisoned_accuracy = j.at("poisoned_accuracy");
    c.benign_twin_accuracy = j.at("benign_twin_accuracy");
    c.benign_twin_poisoned_rate = j.at("benign_twin_poisoned_rate");
    j.at("trojan_losses").get_to(c.trojan_losses);
    j.at("benign_losses").get_to(c.benign_losses);
    return c;
  }

  static Tensor raw_maps(ModelHandle& model, const ImageBatch& batch, const AttributionConfig& c,
                         const ImageBatch& training) {
    constexpr std::size_t chunk = 64;
    std::vector<Tensor> parts;
    for (std::size_t b = 0; b < batch.size(); b += chunk)
      parts.push_back(raw_attribution(model, batch.slice(b, std::min(batch.size(), b + chunk)), c, &training));
    return concat(parts);
  }
};

namespace detail {

inline std::string csv_series(const std::vector<plot::Series>& series, const std::string& xname,
                              const std::string& yname) {
  std::ostringstream o;
  o.precision(17);
  o << "series," << xname << ',' << yname << '\n';
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) o << s.name << ',' << s.x[i] << ',' << s.y[i] << '\n';
  return o.str();
}

inline std::size_t ratio_index(const MetricReport& r) {
  const double ratio = r.context.value("trigger_ratio", 0.0);
  std::size_t best = 0;
  for (std::size_t i = 1; i < r.k_values.size(); ++i)
    if (std::abs(r.k_values[i] - ratio) < std::abs(r.k_values[best] - ratio)) best = i;
  return best;
}

inline void write_text(const std::filesystem::path& p, const std::string& s, std::vector<std::filesystem::path>& files) {
  std::ofstream(p) << s;
  files.push_back(p);
}

}  // namespace detail

inline ReportResult Pipeline::write_report(const std::vector<MetricReport>& reports, const std::filesystem::path& out) {
  if (reports.empty()) throw EvaluationError("no metric reports to plot");
  const auto pdir = out / "plots";
  std::filesystem::remove_all(pdir);
  std::filesystem::create_directories(pdir);
  ReportResult res;

  // Reports from the primary run: the first context seen.
  const auto& ctx = reports.front().context;
  std::vector<const MetricReport*> primary;
  for (const auto& r : reports)
    if (r.context == ctx) primary.push_back(&r);

  std::vector<plot::Series> asr, tr;
  for (const auto* r : primary) {
    asr.push_back({r->label, r->k_values, r->asr});
    if (r->tr_defined) tr.push_back({r->label, r->k_values, r->tr});
  }
  detail::write_text(pdir / "asr_vs_k.svg", plot::line_chart(asr, "Attack success rate after recovery", "k", "ASR"),
                     res.files);
  detail::write_text(pdir / "asr_vs_k.csv", detail::csv_series(asr, "k", "asr"), res.files);
  if (!tr.empty()) {
    detail::write_text(pdir / "tr_vs_k.svg", plot::line_chart(tr, "Trigger recall", "k", "TR"), res.files);
    detail::write_text(pdir / "tr_vs_k.csv", detail::csv_series(tr, "k", "tr"), res.files);
  }

  std::vector<plot::Bubble> bubbles;
  std::ostringstream bcsv;
  bcsv.precision(17);
  bcsv << "label,k,delta_logit_y,delta_logit_target,flc\n";
  for (const auto* r : primary) {
    const std::size_t i = detail::ratio_index(*r);
    bubbles.push_back({r->label, r->delta_logit_y[i], r->delta_logit_target[i], r->flc[i]});
    bcsv << r->label << ',' << r->k_values[i] << ',' << r->delta_logit_y[i] << ',' << r->delta_logit_target[i] << ','
         << r->flc[i] << '\n';
  }
  detail::write_text(pdir / "flc_bubble.svg",
                     plot::bubble_chart(bubbles, "Fractional logit change at k = trigger ratio", "delta logit (true class)",
                                        "delta logit (target class)"),
                     res.files);
  detail::write_text(pdir / "flc_bubble.csv", bcsv.str(), res.files);

  // Delta against trigger visibility or poisoning rate when several runs differ in it.
  for (const std::string axis : {"alpha", "poisoning_rate"}) {
    std::set<double> values;
    for (const auto& r : reports) values.insert(r.context.value(axis, 0.0));
    if (values.size() < 2) continue;
    std::map<std::string, std::map<double, double>> by_label;
    for (const auto& r : reports) by_label[r.label][r.context.value(axis, 0.0)] = r.delta_logit_y[detail::ratio_index(r)];
    std::vector<plot::Series> series;
    for (const auto& [label, pts] : by_label) {
      plot::Series s{label, {}, {}};
      for (const auto& [x, y] : pts) s.x.push_back(x), s.y.push_back(y);
      series.push_back(std::move(s));
    }
    detail::write_text(pdir / ("delta_vs_" + axis + ".svg"),
                       plot::line_chart(series, "Delta logit (true class) vs " + axis, axis, "delta logit y"), res.files);
    detail::write_text(pdir / ("delta_vs_" + axis + ".csv"), detail::csv_series(series, axis, "delta_logit_y"),
                       res.files);
  }

  std::ostringstream md;
  md.setf(std::ios::fixed);
  md.precision(3);
  md << "# BackX summary\n\n";
  md << "dataset " << ctx.value("dataset", "?") << ", trigger " << ctx.value("trigger_kind", "?") << " (alpha "
     << ctx.value("alpha", 0.0) << ", ratio " << std::setprecision(4) << ctx.value("trigger_ratio", 0.0)
     << std::setprecision(3) << "), poisoning rate " << ctx.value("poisoning_rate", 0.0) << ", target "
     << ctx.value("target_label", 0) << ", clean accuracy " << ctx.value("clean_accuracy", 0.0)
     << ", poisoned accuracy " << ctx.value("poisoned_accuracy", 0.0) << "\n\n";
  md << "Metrics at k = trigger ratio (ASR lower is better; TR and FLC higher is better).\n\n";
  md << "| method | samples | ASR | TR | dlogit y | dlogit target | FLC | FLC (prob) |\n";
  md << "|---|---|---|---|---|---|---|---|\n";
  for (const auto* r : primary) {
    const std::size_t i = detail::ratio_index(*r);
    md << "| " << r->label << " | " << r->sample_count << " | " << r->asr[i] << " | ";
    if (r->tr_defined) md << r->tr[i];
    else md << "n/a";
    md << " | " << r->delta_logit_y[i] << " | " << r->delta_logit_target[i] << " | " << r->flc[i] << " | "
       << r->flc_prob[i] << " |\n";
  }
  detail::write_text(out / "summary.md", md.str(), res.files);
  return res;
}

// ---------------------------------------------------------------------------
// Commands

inline PoisonedDataset cmd_poison(const ExperimentConfig& c, Logger log = stderr_logger()) {
  return Pipeline(c, false, std::move(log)).poison();
}

inline TrainResult cmd_train(const ExperimentConfig& c, Logger log = stderr_logger()) {
  return Pipeline(c, false, std::move(log)).train();
}

inline AttributeResult cmd_attribute(const ExperimentConfig& c, Logger log = stderr_logger()) {
  return Pipeline(c, false, std::move(log)).attribute();
}

inline std::vector<MetricReport> cmd_evaluate(const ExperimentConfig& c, Logger log = stderr_logger()) {
  return Pipeline(c, false, std::move(log)).evaluate();
}

inline ReportResult cmd_report(const ExperimentConfig& c, const std::vector<std::filesystem::path>& extra = {},
                               Logger log = stderr_logger()) {
  Pipeline p(c, false, std::move(log));
  auto r = p.report(extra);
  p.close();
  return r;
}

/// Full run. Without `resume`, previous outputs (and a cache under the
/// output directory) are removed and every stage recomputes.
inline std::vector<MetricReport> cmd_all(const ExperimentConfig& c, bool resume, Logger log = stderr_logger()) {
  if (!resume) {
    const std::filesystem::path out = c.out;
    for (const char* sub : {"ledger.json", "reports", "plots", "summary.md", "cache"}) std::filesystem::remove_all(out / sub);
  }
  Pipeline p(c, !resume, std::move(log));
  p.poison();
  p.train();
  auto reports = p.evaluate();
  p.report();
  p.close();
  return reports;
}

}  // namespace backx
