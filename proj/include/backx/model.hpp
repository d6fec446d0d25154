#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "backx/error.hpp"
#include "backx/image.hpp"
#include "backx/nn.hpp"
#include "backx/random.hpp"
#include "backx/tensor.hpp"

namespace backx {

/// What an adapter can provide beyond plain forward passes. Frozen exports
/// (e.g. a model served without its graph) switch these off.
struct Capabilities {
  bool input_gradients = true;
  bool bias_gradients = true;
};

/// A classifier plus the metadata every stage needs. Exclusive access per
/// handle: forward and gradient calls reuse per-layer caches.
struct ModelHandle {
  std::string architecture_id;
  std::size_t num_classes = 0;
  Shape input_shape;  // (channels, height, width)
  Normalization normalization;
  nn::Network network;
  std::string feature_layer_id;
  std::uint64_t seed = 0;
  Capabilities capabilities;
};

enum class OutputKind { logit, probability, contrastive };

inline std::string to_string(OutputKind k) {
  switch (k) {
    case OutputKind::logit: return "logit";
    case OutputKind::probability: return "probability";
    case OutputKind::contrastive: return "contrastive";
  }
  return "?";
}

inline OutputKind output_kind_from_string(const std::string& s) {
  if (s == "logit") return OutputKind::logit;
  if (s == "probability") return OutputKind::probability;
  if (s == "contrastive") return OutputKind::contrastive;
  throw DomainError("unknown output kind '" + s + "'");
}

struct OutputSelector {
  OutputKind kind = OutputKind::logit;
  std::size_t class_index = 0;
};

/// Numerically stable softmax of one logit row.
inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.size());
  if (logits.empty()) return p;
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) z += (p[i] = std::exp(logits[i] - m));
  for (auto& v : p) v /= z;
  return p;
}

/// Row-wise softmax of an (N, K) logit tensor.
inline Tensor softmax_rows(const Tensor& logits) {
  Tensor out(logits.shape());
  for (std::size_t n = 0; n < logits.dim(0); ++n) {
    auto p = softmax(logits.sample(n));
    std::copy(p.begin(), p.end(), out.data() + n * logits.dim(1));
  }
  return out;
}

namespace detail {

inline void check_selector(std::size_t num_classes, const OutputSelector& sel) {
  if (sel.class_index >= num_classes)
    throw IndexError("class index " + std::to_string(sel.class_index) + " out of range for " +
                     std::to_string(num_classes) + " classes");
  if (sel.kind == OutputKind::contrastive && num_classes < 2)
    throw CapabilityError("contrastive output needs at least two classes");
}

// log sum_{j != t} exp(l_j), computed around the max of the remaining logits.
inline double logsumexp_except(std::span<const double> row, std::size_t t) {
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < row.size(); ++j)
    if (j != t) m = std::max(m, row[j]);
  double z = 0;
  for (std::size_t j = 0; j < row.size(); ++j)
    if (j != t) z += std::exp(row[j] - m);
  return m + std::log(z);
}

inline double select_row(std::span<const double> row, const OutputSelector& sel) {
  switch (sel.kind) {
    case OutputKind::logit: return row[sel.class_index];
    case OutputKind::probability: return softmax(row)[sel.class_index];
    case OutputKind::contrastive: return row[sel.class_index] - logsumexp_except(row, sel.class_index);
  }
  return 0;
}

// d(selected scalar) / d(logits) for one row.
inline void select_row_grad(std::span<const double> row, const OutputSelector& sel, std::span<double> out) {
  const std::size_t t = sel.class_index;
  std::fill(out.begin(), out.end(), 0.0);
  switch (sel.kind) {
    case OutputKind::logit:
      out[t] = 1.0;
      break;
    case OutputKind::probability: {
      auto p = softmax(row);
      for (std::size_t j = 0; j < row.size(); ++j) out[j] = p[t] * ((j == t ? 1.0 : 0.0) - p[j]);
      break;
    }
    case OutputKind::contrastive: {
      const double lse = logsumexp_except(row, t);
      for (std::size_t j = 0; j < row.size(); ++j) out[j] = j == t ? 1.0 : -std::exp(row[j] - lse);
      break;
    }
  }
}

inline void check_input(const ModelHandle& model, const Tensor& pixels) {
  if (pixels.rank() != 4 || !std::equal(model.input_shape.begin(), model.input_shape.end(), pixels.shape().begin() + 1) ||
      model.input_shape.size() != 3)
    throw ShapeError("input shape " + shape_str(pixels.shape()) + " does not match model input " +
                     shape_str(model.input_shape));
}

inline void require_gradients(const ModelHandle& model) {
  if (!model.capabilities.input_gradients)
    throw CapabilityError("model '" + model.architecture_id + "' does not expose gradients");
}

}  // namespace detail

/// Logits (N, num_classes) for raw [0,1] pixels. Normalisation is the
/// network's first layer, so callers always pass un-normalised pixels.
inline Tensor forward(ModelHandle& model, const Tensor& pixels) {
  detail::check_input(model, pixels);
  Tensor logits = model.network.forward(pixels);
  if (logits.rank() != 2 || logits.dim(1) != model.num_classes)
    throw ShapeError("network produced " + shape_str(logits.shape()) + ", expected " +
                     std::to_string(model.num_classes) + " logits");
  return logits;
}

inline Tensor forward(ModelHandle& model, const ImageBatch& batch) { return forward(model, batch.pixels); }

/// Batched forward in chunks, for large evaluation sets.
inline Tensor forward_chunked(ModelHandle& model, const Tensor& pixels, std::size_t chunk = 256) {
  std::vector<Tensor> parts;
  for (std::size_t b = 0; b < pixels.dim(0); b += chunk)
    parts.push_back(forward(model, pixels.slice(b, std::min(pixels.dim(0), b + chunk))));
  if (parts.empty()) return Tensor({0, model.num_classes});
  return concat(parts);
}

inline std::vector<std::size_t> predict(ModelHandle& model, const Tensor& pixels) {
  Tensor logits = forward_chunked(model, pixels);
  std::vector<std::size_t> out(logits.dim(0));
  for (std::size_t n = 0; n < out.size(); ++n) {
    auto row = logits.sample(n);
    out[n] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

inline double accuracy(ModelHandle& model, const ImageBatch& batch) {
  if (batch.size() == 0) throw EvaluationError("accuracy on an empty batch");
  auto pred = predict(model, batch.pixels);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == batch.labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

/// One scalar per row of an (N, K) logit tensor.
inline std::vector<double> select_output(const Tensor& logits, const OutputSelector& sel) {
  if (logits.rank() != 2) throw ShapeError("select_output expects (N, K) logits");
  detail::check_selector(logits.dim(1), sel);
  std::vector<double> out(logits.dim(0));
  for (std::size_t n = 0; n < out.size(); ++n) out[n] = detail::select_row(logits.sample(n), sel);
  return out;
}

struct SelectedGradient {
  std::vector<double> value;
  Tensor gradient;  // shaped like the input pixels
};

/// Selected output per row and its gradient with respect to the raw input
/// pixels; row n uses selectors[n].
inline SelectedGradient value_and_input_gradient(ModelHandle& model, const Tensor& pixels,
                                                 std::span<const OutputSelector> selectors) {
  detail::require_gradients(model);
  if (pixels.rank() == 0 || selectors.size() != pixels.dim(0))
    throw ShapeError("one selector per row required");
  for (const auto& sel : selectors) detail::check_selector(model.num_classes, sel);
  Tensor logits = forward(model, pixels);
  Tensor seed(logits.shape());
  SelectedGradient out;
  out.value.resize(logits.dim(0));
  for (std::size_t n = 0; n < logits.dim(0); ++n) {
    out.value[n] = detail::select_row(logits.sample(n), selectors[n]);
    detail::select_row_grad(logits.sample(n), selectors[n], seed.sample(n));
  }
  out.gradient = model.network.backward(seed);
  return out;
}

inline SelectedGradient value_and_input_gradient(ModelHandle& model, const Tensor& pixels, const OutputSelector& sel) {
  std::vector<OutputSelector> rows(pixels.rank() == 0 ? 0 : pixels.dim(0), sel);
  return value_and_input_gradient(model, pixels, rows);
}

inline Tensor input_gradient(ModelHandle& model, const Tensor& pixels, const OutputSelector& sel) {
  return value_and_input_gradient(model, pixels, sel).gradient;
}

inline Tensor input_gradient(ModelHandle& model, const ImageBatch& batch, const OutputSelector& sel) {
  return input_gradient(model, batch.pixels, sel);
}

/// Gradient of the selected output with respect to one bias-carrying layer.
struct BiasGradient {
  std::string layer_id;
  Tensor bias;         // (C)
  Tensor gradient;     // (N, C): d output / d bias per sample
  Tensor positional;   // layer output shape: d output / d (bias at each position)
};

struct GradientBundle {
  Tensor input_gradient;
  Tensor layer_activation;
  Tensor layer_gradient;
  std::vector<BiasGradient> bias_gradients;
  std::vector<double> value;
};

/// Activation and gradient at `layer_id`; optionally the bias gradients of
/// every bias-carrying layer.
inline GradientBundle layer_gradients(ModelHandle& model, const Tensor& pixels, const OutputSelector& sel,
                                      const std::string& layer_id, bool with_bias = false) {
  const std::size_t li = model.network.index_of(layer_id);
  if (with_bias && !model.capabilities.bias_gradients)
    throw CapabilityError("model '" + model.architecture_id + "' does not expose bias gradients");
  auto sg = value_and_input_gradient(model, pixels, sel);
  GradientBundle b;
  b.input_gradient = std::move(sg.gradient);
  b.value = std::move(sg.value);
  b.layer_activation = model.network.output(li);
  b.layer_gradient = model.network.output_grad(li);
  if (with_bias) {
    for (std::size_t i = 0; i < model.network.size(); ++i) {
      const Tensor* bias = model.network.layer(i).bias();
      if (!bias) continue;
      const Tensor& g = model.network.output_grad(i);
      const std::size_t n = g.dim(0), c = g.dim(1), plane = g.stride0() / c;
      Tensor per(Shape{n, c});
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double* p = g.data() + (s * c + ch) * plane;
          per[s * c + ch] = std::accumulate(p, p + plane, 0.0);
        }
      b.bias_gradients.push_back({model.network.name(i), *bias, std::move(per), g});
    }
  }
  return b;
}

inline GradientBundle layer_gradients(ModelHandle& model, const ImageBatch& batch, const OutputSelector& sel,
                                      const std::string& layer_id, bool with_bias = false) {
  return layer_gradients(model, batch.pixels, sel, layer_id, with_bias);
}

// ---------------------------------------------------------------------------
// Builders

/// Small CNN for 3x32x32-scale inputs: three conv blocks (the last is the
/// CAM feature layer "relu3") and a linear head.
inline ModelHandle make_desk_cnn(const Shape& input_shape, std::size_t num_classes, const Normalization& norm,
                                 std::uint64_t seed, std::vector<std::size_t> widths = {8, 16, 16}) {
  if (input_shape.size() != 3 || widths.size() != 3) throw ShapeError("desk cnn expects (C,H,W) and three widths");
  if (input_shape[1] % 4 != 0 || input_shape[2] % 4 != 0) throw ShapeError("desk cnn needs H, W divisible by 4");
  Rng rng(derive_seed(seed, 0x1417));
  nn::Network net;
  net.add("normalize", std::make_unique<nn::Normalize>(norm.mean, norm.stddev));
  auto conv = [&](std::size_t in, std::size_t out) {
    auto c = std::make_unique<nn::Conv2d>(in, out, 3, 1);
    c->init_he(rng);
    return c;
  };
  net.add("conv1", conv(input_shape[0], widths[0]));
  net.add("relu1", std::make_unique<nn::ReLU>());
  net.add("pool1", std::make_unique<nn::MaxPool2d>(2));
  net.add("conv2", conv(widths[0], widths[1]));
  net.add("relu2", std::make_unique<nn::ReLU>());
  net.add("pool2", std::make_unique<nn::MaxPool2d>(2));
  net.add("conv3", conv(widths[1], widths[2]));
  net.add("relu3", std::make_unique<nn::ReLU>());
  net.add("flatten", std::make_unique<nn::Flatten>());
  auto fc = std::make_unique<nn::Linear>(widths[2] * (input_shape[1] / 4) * (input_shape[2] / 4), num_classes);
  fc->init_he(rng);
  net.add("fc", std::move(fc));
  return {"desk_cnn", num_classes, input_shape, norm, std::move(net), "relu3", seed, {}};
}

/// Linear classifier logits = W x (+ b) on flattened pixels. `weights` is
/// (num_classes, C*H*W) row-major.
inline ModelHandle make_linear_model(const Shape& input_shape, std::size_t num_classes, std::span<const double> weights,
                                     std::span<const double> bias = {}) {
  const std::size_t d = shape_numel(input_shape);
  if (weights.size() != num_classes * d) throw ShapeError("linear model weight count mismatch");
  nn::Network net;
  net.add("flatten", std::make_unique<nn::Flatten>());
  auto fc = std::make_unique<nn::Linear>(d, num_classes, !bias.empty());
  std::copy(weights.begin(), weights.end(), fc->weight().data());
  if (!bias.empty()) {
    if (bias.size() != num_classes) throw ShapeError("linear model bias count mismatch");
    std::copy(bias.begin(), bias.end(), fc->bias_values().data());
  }
  net.add("fc", std::move(fc));
  return {"linear", num_classes, input_shape, Normalization::identity(input_shape.at(0)), std::move(net), "", 0, {}};
}

// ---------------------------------------------------------------------------
// Training

struct TrainingSchedule {
  std::size_t epochs = 0;
  double learning_rate = 0.1;
  std::vector<std::size_t> decay_epochs;
  double decay_factor = 0.1;
  std::size_t batch_size = 32;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;

  double rate_at(std::size_t epoch) const {
    double lr = learning_rate;
    for (std::size_t d : decay_epochs)
      if (epoch >= d) lr *= decay_factor;
    return lr;
  }
};

inline void to_json(nlohmann::json& j, const TrainingSchedule& s) {
  j = {{"epochs", s.epochs},         {"learning_rate", s.learning_rate}, {"decay_epochs", s.decay_epochs},
       {"decay_factor", s.decay_factor}, {"batch_size", s.batch_size},    {"momentum", s.momentum},
       {"weight_decay", s.weight_decay}, {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, TrainingSchedule& s) {
  TrainingSchedule d;
  s.epochs = j.value("epochs", d.epochs);
  s.learning_rate = j.value("learning_rate", d.learning_rate);
  s.decay_epochs = j.value("decay_epochs", d.decay_epochs);
  s.decay_factor = j.value("decay_factor", d.decay_factor);
  s.batch_size = j.value("batch_size", d.batch_size);
  s.momentum = j.value("momentum", d.momentum);
  s.weight_decay = j.value("weight_decay", d.weight_decay);
  s.seed = j.value("seed", d.seed);
}

/// Mean softmax cross-entropy over rows; writes d loss / d logits into grad.
inline double cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels, Tensor& grad) {
  grad = Tensor(logits.shape());
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  double loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    auto p = softmax(logits.sample(i));
    loss -= std::log(std::max(p[labels[i]], 1e-300));
    for (std::size_t j = 0; j < k; ++j)
      grad[i * k + j] = (p[j] - (j == labels[i] ? 1.0 : 0.0)) / static_cast<double>(n);
  }
  return loss / static_cast<double>(n);
}

/// SGD with momentum and weight decay over shuffled mini-batches. Shuffling
/// is seeded per epoch from schedule.seed. Per-epoch mean losses are written
/// to `epoch_losses` when given.
inline ModelHandle fit(const ModelHandle& model, const ImageBatch& train, const TrainingSchedule& schedule,
                       std::vector<double>* epoch_losses = nullptr) {
  ModelHandle out = model;
  if (schedule.epochs == 0) return out;
  if (train.size() == 0) throw TrainingError(0, "empty training set");
  if (schedule.batch_size == 0) throw DomainError("batch size must be positive");
  for (std::size_t y : train.labels)
    if (y >= out.num_classes) throw IndexError("training label out of range");
  detail::check_input(out, train.pixels);

  auto params = out.network.params();
  std::vector<std::vector<double>> velocity;
  for (auto* p : params) velocity.emplace_back(p->value.size(), 0.0);

  std::vector<std::size_t> order(train.size());
  const std::size_t step = train.pixels.stride0();
  Shape bshape = train.pixels.shape();
  for (std::size_t epoch = 0; epoch < schedule.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(schedule.seed, 0xe90c, epoch));
    std::shuffle(order.begin(), order.end(), rng);
    const double lr = schedule.rate_at(epoch);
    double total = 0;
    for (std::size_t b = 0; b < order.size(); b += schedule.batch_size) {
      const std::size_t e = std::min(order.size(), b + schedule.batch_size);
      bshape[0] = e - b;
      Tensor x(bshape);
      std::vector<std::size_t> y;
      for (std::size_t i = b; i < e; ++i) {
        auto src = train.pixels.sample(order[i]);
        std::copy(src.begin(), src.end(), x.data() + (i - b) * step);
        y.push_back(train.labels[order[i]]);
      }
      out.network.zero_grad();
      Tensor logits = out.network.forward(x);
      Tensor grad;
      const double loss = cross_entropy(logits, y, grad);
      if (!std::isfinite(loss)) throw TrainingError(epoch, "non-finite loss");
      total += loss * static_cast<double>(e - b);
      out.network.backward(grad);
      for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto* p = params[pi];
        if (!p->trainable) continue;
        auto& v = velocity[pi];
        for (std::size_t i = 0; i < p->value.size(); ++i) {
          const double g = p->grad[i] + schedule.weight_decay * p->value[i];
          v[i] = schedule.momentum * v[i] + g;
          p->value[i] -= lr * v[i];
        }
      }
    }
    const double mean_loss = total / static_cast<double>(train.size());
    if (!std::isfinite(mean_loss)) throw TrainingError(epoch, "non-finite loss");
    if (epoch_losses) epoch_losses->push_back(mean_loss);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: a directory with manifest.json (the portable contract) and
// weights.bin (native-endian doubles, parameters in layer order).

inline void save_model(ModelHandle& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<double> blob;
  for (auto* p : model.network.params()) blob.insert(blob.end(), p->value.storage().begin(), p->value.storage().end());
  {
    std::ofstream f(dir / "weights.bin", std::ios::binary);
    f.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size() * sizeof(double)));
    if (!f) throw Error("cannot write " + (dir / "weights.bin").string());
  }
  nlohmann::json m = {{"architecture_id", model.architecture_id},
                      {"num_classes", model.num_classes},
                      {"input_shape", model.input_shape},
                      {"normalization", model.normalization},
                      {"feature_layer_id", model.feature_layer_id},
                      {"seed", model.seed},
                      {"layers", model.network.spec()},
                      {"weights", {{"file", "weights.bin"}, {"count", blob.size()}, {"checksum", checksum(blob)}}}};
  std::ofstream(dir / "manifest.json") << m.dump(2) << '\n';
}

inline ModelHandle load_model(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw IngestionError((dir / "manifest.json").string(), "missing model manifest");
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(mf);
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError((dir / "manifest.json").string(), e.what());
  }
  ModelHandle model;
  model.architecture_id = m.at("architecture_id");
  model.num_classes = m.at("num_classes");
  model.input_shape = m.at("input_shape").get<Shape>();
  model.normalization = m.at("normalization").get<Normalization>();
  model.feature_layer_id = m.at("feature_layer_id");
  model.seed = m.at("seed");
  model.network = nn::Network::from_spec(m.at("layers"));
  const auto wpath = dir / m.at("weights").at("file").get<std::string>();
  const std::size_t count = m.at("weights").at("count");
  std::vector<double> blob(count);
  std::ifstream f(wpath, std::ios::binary);
  f.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(count * sizeof(double)));
  if (!f || f.peek() != std::char_traits<char>::eof()) throw IngestionError(wpath.string(), "weight blob size mismatch");
  if (checksum(blob) != m.at("weights").at("checksum").get<std::string>())
    throw IngestionError(wpath.string(), "weight checksum mismatch");
  std::size_t off = 0;
  for (auto* p : model.network.params()) {
    if (off + p->value.size() > blob.size()) throw IngestionError(wpath.string(), "weight blob too short");
    std::copy(blob.begin() + static_cast<std::ptrdiff_t>(off),
              blob.begin() + static_cast<std::ptrdiff_t>(off + p->value.size()), p->value.data());
    off += p->value.size();
  }
  if (off != blob.size()) throw IngestionError(wpath.string(), "weight blob has trailing values");
  return model;
}

}  // namespace backx
