#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
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

// Families: CAM-based (gcam, fullgrad), gradient-based (grad, ggcam, sg),
// integration-based (ig, ig_uniform, ig_sg, agi, lpi).
enum class Method { gcam, fullgrad, grad, ggcam, sg, ig, ig_uniform, ig_sg, agi, lpi };

inline constexpr Method kAllMethods[] = {Method::gcam, Method::fullgrad,   Method::grad,  Method::ggcam, Method::sg,
                                         Method::ig,   Method::ig_uniform, Method::ig_sg, Method::agi,   Method::lpi};

inline std::string to_string(Method m) {
  switch (m) {
    case Method::gcam: return "gcam";
    case Method::fullgrad: return "fullgrad";
    case Method::grad: return "grad";
    case Method::ggcam: return "ggcam";
    case Method::sg: return "sg";
    case Method::ig: return "ig";
    case Method::ig_uniform: return "ig_uniform";
    case Method::ig_sg: return "ig_sg";
    case Method::agi: return "agi";
    case Method::lpi: return "lpi";
  }
  return "?";
}

inline Method method_from_string(const std::string& s) {
  for (Method m : kAllMethods)
    if (to_string(m) == s) return m;
  throw DomainError("unknown attribution method '" + s + "'");
}

enum class PostProcess { original, absolute };
enum class ChannelReduce { sum, sum_abs };

inline std::string to_string(PostProcess p) { return p == PostProcess::original ? "original" : "absolute"; }
inline std::string to_string(ChannelReduce c) { return c == ChannelReduce::sum ? "sum" : "sum_abs"; }

inline PostProcess postprocess_from_string(const std::string& s) {
  if (s == "original") return PostProcess::original;
  if (s == "absolute") return PostProcess::absolute;
  throw DomainError("unknown postprocess '" + s + "'");
}

inline ChannelReduce channel_reduce_from_string(const std::string& s) {
  if (s == "sum") return ChannelReduce::sum;
  if (s == "sum_abs") return ChannelReduce::sum_abs;
  throw DomainError("unknown channel reduction '" + s + "'");
}

struct AttributionConfig {
  Method method = Method::grad;
  OutputSelector selector;
  PostProcess postprocess = PostProcess::absolute;
  std::size_t steps = 1;
  std::size_t num_references = 1;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;
  ChannelReduce channel_reduce = ChannelReduce::sum_abs;
  double step_size = 0.05;  // AGI ascent step
};

/// Per-family defaults: CAM methods explain probabilities with original
/// maps, gradient methods explain logits with absolute maps, integration
/// methods explain logits with original maps. Interpolation budgets total
/// 50 per sample.
inline AttributionConfig preset(Method m, std::size_t class_index, std::uint64_t seed = 0) {
  AttributionConfig c;
  c.method = m;
  c.seed = seed;
  c.selector.class_index = class_index;
  switch (m) {
    case Method::gcam:
    case Method::fullgrad:
      c.selector.kind = OutputKind::probability;
      c.postprocess = PostProcess::original;
      break;
    case Method::grad:
    case Method::ggcam:
      c.selector.kind = OutputKind::logit;
      c.postprocess = PostProcess::absolute;
      break;
    case Method::sg:
      c.selector.kind = OutputKind::logit;
      c.postprocess = PostProcess::absolute;
      c.steps = 50;
      c.noise_sigma = 0.15;
      break;
    case Method::ig:
      c.selector.kind = OutputKind::logit;
      c.postprocess = PostProcess::original;
      c.steps = 50;
      break;
    case Method::ig_uniform:
    case Method::lpi:
      c.selector.kind = OutputKind::logit;
      c.postprocess = PostProcess::original;
      c.steps = 5;
      c.num_references = 10;
      break;
    case Method::ig_sg:
      c.selector.kind = OutputKind::logit;
      c.postprocess = PostProcess::original;
      c.steps = 5;
      c.num_references = 10;
      c.noise_sigma = 0.15;
      break;
    case Method::agi:
      c.selector.kind = OutputKind::logit;
      c.postprocess = PostProcess::original;
      c.steps = 10;
      c.num_references = 5;
      break;
  }
  c.channel_reduce = c.postprocess == PostProcess::absolute ? ChannelReduce::sum_abs : ChannelReduce::sum;
  return c;
}

inline nlohmann::json to_json(const AttributionConfig& c) {
  return {{"method", to_string(c.method)},
          {"output", to_string(c.selector.kind)},
          {"class_index", c.selector.class_index},
          {"postprocess", to_string(c.postprocess)},
          {"channel_reduce", to_string(c.channel_reduce)},
          {"steps", c.steps},
          {"num_references", c.num_references},
          {"noise_sigma", c.noise_sigma},
          {"step_size", c.step_size},
          {"seed", c.seed}};
}

/// Starts from the method preset and applies any fields present in `j`.
inline AttributionConfig config_from_json(const nlohmann::json& j, std::size_t class_index, std::uint64_t seed) {
  AttributionConfig c = preset(method_from_string(j.at("method")), class_index, seed);
  if (j.contains("output")) c.selector.kind = output_kind_from_string(j.at("output"));
  if (j.contains("postprocess")) {
    c.postprocess = postprocess_from_string(j.at("postprocess"));
    c.channel_reduce = c.postprocess == PostProcess::absolute ? ChannelReduce::sum_abs : ChannelReduce::sum;
  }
  if (j.contains("channel_reduce")) c.channel_reduce = channel_reduce_from_string(j.at("channel_reduce"));
  c.steps = j.value("steps", c.steps);
  c.num_references = j.value("num_references", c.num_references);
  c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
  c.step_size = j.value("step_size", c.step_size);
  c.seed = j.value("seed", c.seed);
  return c;
}

inline std::string config_hash(const AttributionConfig& c) { return checksum(to_json(c).dump()).substr(0, 12); }

/// Short label distinguishing variants of one method, e.g. "grad.logit.absolute".
inline std::string config_label(const AttributionConfig& c) {
  return to_string(c.method) + "." + to_string(c.selector.kind) + "." + to_string(c.postprocess);
}

struct AttributionMap {
  Tensor values;      // (N, H, W) after channel reduction and post-processing
  Tensor raw_values;  // (N, C, H, W); C is 1 for CAM-resolution maps
  AttributionConfig config;
  std::size_t class_index = 0;
};

struct ReferenceSet {
  enum class PathKind { linear, adversarial };
  enum class Source { zero, uniform_noise, gaussian_noise, training_cluster, adversarial };
  std::vector<Tensor> references;  // each (C, H, W)
  PathKind path = PathKind::linear;
  Source source = Source::zero;
};

namespace detail {

inline std::uint64_t sample_stream(const ImageBatch& b, std::size_t n) { return b.indices.empty() ? n : b.indices[n]; }

inline Tensor image_at(const Tensor& pixels, std::size_t n) {
  auto s = pixels.sample(n);
  return Tensor({pixels.dim(1), pixels.dim(2), pixels.dim(3)}, std::vector<double>(s.begin(), s.end()));
}

inline void write_sample(Tensor& dst, std::size_t n, const Tensor& img) {
  std::copy(img.storage().begin(), img.storage().end(), dst.data() + n * dst.stride0());
}

// Minimum/maximum rescale to [0, 1] over all elements of one sample; a
// constant tensor maps to zeros.
inline void minmax_inplace(std::span<double> v) {
  auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double a = *lo, span = *hi - *lo;
  for (auto& x : v) x = span > 0 ? (x - a) / span : 0.0;
}

// mean over `steps` midpoints of dF/dx along ref -> x, times (x - ref),
// averaged over refs; one batched gradient call for all points.
inline Tensor integrate_paths(ModelHandle& model, const Tensor& x, const std::vector<Tensor>& refs,
                              const OutputSelector& sel, std::size_t steps) {
  if (steps == 0) throw DomainError("integration needs at least one step");
  if (refs.empty()) throw DomainError("integration needs at least one reference");
  const std::size_t d = x.size();
  Shape bs = x.shape();
  bs.insert(bs.begin(), refs.size() * steps);
  Tensor points(bs);
  for (std::size_t r = 0; r < refs.size(); ++r) {
    require_same_shape(refs[r], x, "integration reference");
    for (std::size_t s = 0; s < steps; ++s) {
      const double t = (static_cast<double>(s) + 0.5) / static_cast<double>(steps);
      double* p = points.data() + (r * steps + s) * d;
      for (std::size_t i = 0; i < d; ++i) p[i] = refs[r][i] + t * (x[i] - refs[r][i]);
    }
  }
  Tensor g = value_and_input_gradient(model, points, sel).gradient;
  Tensor out(x.shape());
  for (std::size_t r = 0; r < refs.size(); ++r) {
    for (std::size_t i = 0; i < d; ++i) {
      double acc = 0;
      for (std::size_t s = 0; s < steps; ++s) acc += g[(r * steps + s) * d + i];
      out[i] += (x[i] - refs[r][i]) * acc / static_cast<double>(steps);
    }
  }
  for (auto& v : out.storage()) v /= static_cast<double>(refs.size());
  return out;
}

inline void require_feature_layer(const ModelHandle& model) {
  if (model.feature_layer_id.empty())
    throw CapabilityError("model '" + model.architecture_id + "' has no feature layer for CAM methods");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Raw maps. Every function returns an (N, C, H, W) or (N, 1, H, W) tensor.

/// Plain input gradient.
inline Tensor grad(ModelHandle& model, const ImageBatch& batch, const OutputSelector& sel) {
  return input_gradient(model, batch.pixels, sel);
}

/// Mean input gradient over `steps` copies with additive N(0, sigma^2) noise.
/// sigma == 0 returns grad() exactly.
inline Tensor smoothgrad(ModelHandle& model, const ImageBatch& batch, const OutputSelector& sel, std::size_t steps,
                         double sigma, std::uint64_t seed) {
  if (steps == 0) throw DomainError("smoothgrad needs at least one sample");
  if (sigma < 0) throw DomainError("noise sigma must be non-negative");
  if (sigma == 0) return grad(model, batch, sel);
  Tensor out(batch.pixels.shape());
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const Tensor x = detail::image_at(batch.pixels, n);
    Shape bs = x.shape();
    bs.insert(bs.begin(), steps);
    Tensor noisy(bs);
    Rng rng(derive_seed(seed, 0x5347, detail::sample_stream(batch, n)));
    std::normal_distribution<double> nd(0.0, sigma);
    for (std::size_t s = 0; s < steps; ++s)
      for (std::size_t i = 0; i < x.size(); ++i) noisy[s * x.size() + i] = x[i] + nd(rng);
    Tensor g = value_and_input_gradient(model, noisy, sel).gradient;
    Tensor mean(x.shape());
    for (std::size_t s = 0; s < steps; ++s)
      for (std::size_t i = 0; i < x.size(); ++i) mean[i] += g[s * x.size() + i];
    for (auto& v : mean.storage()) v /= static_cast<double>(steps);
    detail::write_sample(out, n, mean);
  }
  return out;
}

/// Grad-CAM without the final ReLU: sum_k w_k A^k with w_k the spatial mean
/// of d(output)/dA^k, bilinearly upsampled to the input size.
inline Tensor gradcam(ModelHandle& model, const ImageBatch& batch, const OutputSelector& sel,
                      const std::string& layer_id = {}) {
  const std::string layer = layer_id.empty() ? model.feature_layer_id : layer_id;
  if (layer.empty()) detail::require_feature_layer(model);
  auto b = layer_gradients(model, batch.pixels, sel, layer);
  const Tensor& a = b.layer_activation;
  const Tensor& g = b.layer_gradient;
  if (a.rank() != 4) throw CapabilityError("layer '" + layer + "' is not a convolutional feature map");
  const std::size_t k = a.dim(1), h = a.dim(2), w = a.dim(3), plane = h * w;
  const std::size_t H = batch.height(), W = batch.width();
  Tensor out({batch.size(), 1, H, W});
  for (std::size_t n = 0; n < batch.size(); ++n) {
    std::vector<double> cam(plane, 0.0);
    for (std::size_t c = 0; c < k; ++c) {
      const double* gp = g.data() + (n * k + c) * plane;
      const double weight = std::accumulate(gp, gp + plane, 0.0) / static_cast<double>(plane);
      const double* ap = a.data() + (n * k + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) cam[i] += weight * ap[i];
    }
    auto up = bilinear_resize(cam, h, w, H, W);
    std::copy(up.begin(), up.end(), out.data() + n * H * W);
  }
  return out;
}

/// Unprocessed FullGrad terms: x (.) dF/dx, and bias (.) dF/d(bias at each
/// position) for every bias-carrying layer. For piecewise-linear networks
/// and logit outputs their total equals F(x).
struct FullGradTerms {
  Tensor input_term;  // (N, C, H, W)
  std::vector<BiasGradient> bias_terms;  // positional holds bias (.) gradient
  std::vector<double> value;

  /// Sum of every term for sample n.
  double total(std::size_t n) const {
    double s = 0;
    for (double v : input_term.sample(n)) s += v;
    for (const auto& b : bias_terms)
      for (double v : b.positional.sample(n)) s += v;
    return s;
  }
};

inline FullGradTerms fullgrad_terms(ModelHandle& model, const ImageBatch& batch, const OutputSelector& sel) {
  if (!model.capabilities.bias_gradients)
    throw CapabilityError("model '" + model.architecture_id + "' does not expose bias gradients");
  // Any layer works as the anchor; only input and bias gradients are used.
  auto b = layer_gradients(model, batch.pixels, sel, model.network.name(0), true);
  FullGradTerms t;
  t.value = b.value;
  t.input_term = b.input_gradient;
  for (std::size_t i = 0; i < t.input_term.size(); ++i) t.input_term[i] *= batch.pixels[i];
  for (auto& bg : b.bias_gradients) {
    const std::size_t n = bg.positional.dim(0), c = bg.positional.dim(1), plane = bg.positional.stride0() / c;
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < plane; ++p) bg.positional[(s * c + ch) * plane + p] *= bg.bias[ch];
    t.bias_terms.push_back(std::move(bg));
  }
  return t;
}

/// FullGrad saliency: psi(x (.) grad) + sum over spatial bias layers of
/// psi(bias (.) bias-gradient), with psi = abs, per-sample min-max rescale,
/// bilinear upsample, channel sum. Biases of non-spatial layers (the linear
/// head) enter completeness but not the map.
inline Tensor fullgrad(ModelHandle& model, const ImageBatch& batch, const OutputSelector& sel) {
  auto t = fullgrad_terms(model, batch, sel);
  const std::size_t N = batch.size(), C = batch.channels(), H = batch.height(), W = batch.width();
  Tensor out({N, 1, H, W});
  for (std::size_t n = 0; n < N; ++n) {
    std::vector<double> term(t.input_term.sample(n).begin(), t.input_term.sample(n).end());
    for (auto& v : term) v = std::abs(v);
    detail::minmax_inplace(term);
    double* dst = out.data() + n * H * W;
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < H * W; ++p) dst[p] += term[c * H * W + p];
    for (const auto& bt : t.bias_terms) {
      if (bt.positional.rank() != 4) continue;
      const std::size_t k = bt.positional.dim(1), h = bt.positional.dim(2), w = bt.positional.dim(3);
      std::vector<double> bias_map(bt.positional.sample(n).begin(), bt.positional.sample(n).end());
      for (auto& v : bias_map) v = std::abs(v);
      detail::minmax_inplace(bias_map);
      for (std::size_t c = 0; c < k; ++c) {
        auto up = bilinear_resize(std::span<const double>(bias_map).subspan(c * h * w, h * w), h, w, H, W);
        for (std::size_t p = 0; p < H * W; ++p) dst[p] += up[p];
      }
    }
  }
  return out;
}

/// Grad-CAM map times |grad| per element.
inline Tensor guided_gradcam(ModelHandle& model, const ImageBatch& batch, const OutputSelector& sel) {
  Tensor cam = gradcam(model, batch, sel);
  Tensor g = grad(model, batch, sel);
  const std::size_t C = batch.channels(), plane = batch.height() * batch.width();
  for (std::size_t n = 0; n < batch.size(); ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < plane; ++p) {
        double& v = g[(n * C + c) * plane + p];
        v = cam[n * plane + p] * std::abs(v);
      }
  return g;
}

/// Integrated gradients from one reference per sample (`references` has the
/// batch shape) or one shared reference ((1, C, H, W)), midpoint rule.
inline Tensor integrated_gradients(ModelHandle& model, const ImageBatch& batch, const OutputSelector& sel,
                                   const Tensor& references, std::size_t steps) {
  const bool shared = references.rank() == 4 && references.dim(0) == 1 && batch.size() != 1;
  if (!shared) require_same_shape(references, batch.pixels, "integrated gradients reference");
  Tensor out(batch.pixels.shape());
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const Tensor x = detail::image_at(batch.pixels, n);
    std::vector<Tensor> refs{detail::image_at(references, shared ? 0 : n)};
    detail::write_sample(out, n, detail::integrate_paths(model, x, refs, sel, steps));
  }
  return out;
}

/// Integrated gradients with the zero image as reference.
inline Tensor integrated_gradients(ModelHandle& model, const ImageBatch& batch, const OutputSelector& sel,
                                   std::size_t steps) {
  Shape s = batch.pixels.shape();
  s[0] = 1;
  return integrated_gradients(model, batch, sel, Tensor(s), steps);
}

/// Mean of integrated gradients over a shared reference set.
inline Tensor integrated_gradients(ModelHandle& model, const ImageBatch& batch, const OutputSelector& sel,
                                   const ReferenceSet& refs, std::size_t steps) {
  Tensor out(batch.pixels.shape());
  for (std::size_t n = 0; n < batch.size(); ++n)
    detail::write_sample(out, n,
                         detail::integrate_paths(model, detail::image_at(batch.pixels, n), refs.references, sel, steps));
  return out;
}

/// References drawn uniformly from [0, 1] per pixel, per sample.
inline ReferenceSet uniform_references(const ImageBatch& batch, std::size_t n, std::size_t count, std::uint64_t seed) {
  ReferenceSet set;
  set.source = ReferenceSet::Source::uniform_noise;
  Rng rng(derive_seed(seed, 0x1695, detail::sample_stream(batch, n)));
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (std::size_t r = 0; r < count; ++r) {
    Tensor ref(batch.image_shape());
    for (auto& v : ref.storage()) v = uni(rng);
    set.references.push_back(std::move(ref));
  }
  return set;
}

/// References x + N(0, sigma^2), clipped to [0, 1], per sample.
inline ReferenceSet gaussian_references(const ImageBatch& batch, std::size_t n, std::size_t count, double sigma,
                                        std::uint64_t seed) {
  ReferenceSet set;
  set.source = ReferenceSet::Source::gaussian_noise;
  Rng rng(derive_seed(seed, 0x1650, detail::sample_stream(batch, n)));
  const Tensor x = detail::image_at(batch.pixels, n);
  for (std::size_t r = 0; r < count; ++r) {
    Tensor ref = x;
    if (sigma > 0) {
      std::normal_distribution<double> nd(0.0, sigma);
      for (auto& v : ref.storage()) v = std::clamp(v + nd(rng), 0.0, 1.0);
    }
    set.references.push_back(std::move(ref));
  }
  return set;
}

inline Tensor ig_uniform(ModelHandle& model, const ImageBatch& batch, const OutputSelector& sel,
                         std::size_t num_references, std::size_t steps, std::uint64_t seed) {
  Tensor out(batch.pixels.shape());
  for (std::size_t n = 0; n < batch.size(); ++n) {
    auto refs = uniform_references(batch, n, num_references, seed);
    detail::write_sample(
        out, n, detail::integrate_paths(model, detail::image_at(batch.pixels, n), refs.references, sel, steps));
  }
  return out;
}

inline Tensor ig_sg(ModelHandle& model, const ImageBatch& batch, const OutputSelector& sel, std::size_t num_references,
                    std::size_t steps, double sigma, std::uint64_t seed) {
  if (sigma < 0) throw DomainError("noise sigma must be non-negative");
  Tensor out(batch.pixels.shape());
  for (std::size_t n = 0; n < batch.size(); ++n) {
    auto refs = gaussian_references(batch, n, num_references, sigma, seed);
    detail::write_sample(
        out, n, detail::integrate_paths(model, detail::image_at(batch.pixels, n), refs.references, sel, steps));
  }
  return out;
}

/// False classes drawn (with replacement) uniformly from all c' != c.
inline std::vector<std::size_t> agi_false_classes(std::size_t num_classes, std::size_t target, std::size_t count,
                                                  std::uint64_t seed, std::uint64_t stream) {
  if (num_classes < 2) throw CapabilityError("AGI needs at least two classes");
  Rng rng(derive_seed(seed, 0xa61, stream));
  std::uniform_int_distribution<std::size_t> pick(0, num_classes - 2);
  std::vector<std::size_t> out;
  for (std::size_t r = 0; r < count; ++r) {
    const std::size_t c = pick(rng);
    out.push_back(c >= target ? c + 1 : c);
  }
  return out;
}

/// Adversarial gradient integration: for each sampled false class c', walk
/// from x by signed-gradient ascent on logit_c' (clipped to [0, 1]) and
/// accumulate -dF/dx (.) dx along the walk; average over walks.
inline Tensor agi(ModelHandle& model, const ImageBatch& batch, const OutputSelector& sel, std::size_t num_references,
                  std::size_t steps, double step_size, std::uint64_t seed) {
  if (model.num_classes < 2) throw CapabilityError("AGI needs at least two classes");
  if (num_references == 0 || steps == 0) throw DomainError("AGI needs at least one reference and one step");
  Tensor out(batch.pixels.shape());
  const std::size_t d = batch.pixels.stride0();
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const auto classes = agi_false_classes(model.num_classes, sel.class_index, num_references, seed,
                                           detail::sample_stream(batch, n));
    Shape bs = batch.image_shape();
    bs.insert(bs.begin(), num_references);
    Tensor cur(bs);
    for (std::size_t r = 0; r < num_references; ++r) {
      auto src = batch.pixels.sample(n);
      std::copy(src.begin(), src.end(), cur.data() + r * d);
    }
    std::vector<OutputSelector> adv_sel;
    for (std::size_t c : classes) adv_sel.push_back({OutputKind::logit, c});
    Tensor acc(batch.image_shape());
    for (std::size_t s = 0; s < steps; ++s) {
      Tensor g_adv = value_and_input_gradient(model, cur, adv_sel).gradient;
      Tensor g_tgt = value_and_input_gradient(model, cur, sel).gradient;
      for (std::size_t r = 0; r < num_references; ++r)
        for (std::size_t i = 0; i < d; ++i) {
          const std::size_t j = r * d + i;
          const double sign = g_adv[j] > 0 ? 1.0 : (g_adv[j] < 0 ? -1.0 : 0.0);
          const double next = std::clamp(cur[j] + step_size * sign, 0.0, 1.0);
          acc[i] -= g_tgt[j] * (next - cur[j]);
          cur[j] = next;
        }
    }
    for (auto& v : acc.storage()) v /= static_cast<double>(num_references);
    detail::write_sample(out, n, acc);
  }
  return out;
}

/// The `count` training images closest (Euclidean, pixel space) to the
/// training-set centroid; ties go to the lower index.
inline ReferenceSet centroid_references(const ImageBatch& training, std::size_t count) {
  if (training.size() == 0) throw DomainError("LPI needs a non-empty training set");
  const std::size_t d = training.pixels.stride0();
  std::vector<double> centroid(d, 0.0);
  for (std::size_t n = 0; n < training.size(); ++n) {
    auto s = training.pixels.sample(n);
    for (std::size_t i = 0; i < d; ++i) centroid[i] += s[i];
  }
  for (auto& v : centroid) v /= static_cast<double>(training.size());
  std::vector<std::pair<double, std::size_t>> dist;
  for (std::size_t n = 0; n < training.size(); ++n) {
    auto s = training.pixels.sample(n);
    double acc = 0;
    for (std::size_t i = 0; i < d; ++i) acc += (s[i] - centroid[i]) * (s[i] - centroid[i]);
    dist.emplace_back(acc, n);
  }
  std::sort(dist.begin(), dist.end());
  ReferenceSet set;
  set.source = ReferenceSet::Source::training_cluster;
  for (std::size_t r = 0; r < std::min(count, dist.size()); ++r)
    set.references.push_back(detail::image_at(training.pixels, dist[r].second));
  return set;
}

inline Tensor lpi(ModelHandle& model, const ImageBatch& batch, const OutputSelector& sel, const ImageBatch& training,
                  std::size_t num_references, std::size_t steps) {
  return integrated_gradients(model, batch, sel, centroid_references(training, num_references), steps);
}

// ---------------------------------------------------------------------------
// Post-processing and dispatch

/// Collapses channels and applies the post-processing mode. Absolute with
/// sum_abs takes |.| per element before summing; absolute with sum takes
/// |.| of the channel sum.
inline Tensor reduce_channels(const Tensor& raw, PostProcess mode, ChannelReduce reduce) {
  const std::size_t N = raw.dim(0), C = raw.dim(1), plane = raw.dim(2) * raw.dim(3);
  Tensor out({N, raw.dim(2), raw.dim(3)});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t p = 0; p < plane; ++p) {
      double acc = 0;
      for (std::size_t c = 0; c < C; ++c) {
        const double v = raw[(n * C + c) * plane + p];
        acc += reduce == ChannelReduce::sum_abs ? std::abs(v) : v;
      }
      out[n * plane + p] = mode == PostProcess::absolute ? std::abs(acc) : acc;
    }
  return out;
}

inline AttributionMap postprocess(const Tensor& raw, const AttributionConfig& config) {
  return {reduce_channels(raw, config.postprocess, config.channel_reduce), raw, config, config.selector.class_index};
}

/// Raw per-element map for a config.
inline Tensor raw_attribution(ModelHandle& model, const ImageBatch& batch, const AttributionConfig& c,
                              const ImageBatch* training_set = nullptr) {
  detail::check_selector(model.num_classes, c.selector);
  switch (c.method) {
    case Method::gcam:
      detail::require_feature_layer(model);
      return gradcam(model, batch, c.selector);
    case Method::fullgrad: return fullgrad(model, batch, c.selector);
    case Method::grad: return grad(model, batch, c.selector);
    case Method::ggcam:
      detail::require_feature_layer(model);
      return guided_gradcam(model, batch, c.selector);
    case Method::sg: return smoothgrad(model, batch, c.selector, c.steps, c.noise_sigma, c.seed);
    case Method::ig: return integrated_gradients(model, batch, c.selector, c.steps);
    case Method::ig_uniform: return ig_uniform(model, batch, c.selector, c.num_references, c.steps, c.seed);
    case Method::ig_sg: return ig_sg(model, batch, c.selector, c.num_references, c.steps, c.noise_sigma, c.seed);
    case Method::agi: return agi(model, batch, c.selector, c.num_references, c.steps, c.step_size, c.seed);
    case Method::lpi:
      if (!training_set) throw CapabilityError("LPI needs a training set");
      return lpi(model, batch, c.selector, *training_set, c.num_references, c.steps);
  }
  throw DomainError("unhandled method");
}

inline AttributionMap attribute(ModelHandle& model, const ImageBatch& batch, const AttributionConfig& config,
                                const ImageBatch* training_set = nullptr) {
  Tensor raw = raw_attribution(model, batch, config, training_set);
  if (!raw.all_finite()) throw Error(to_string(config.method) + " produced non-finite attributions");
  return postprocess(raw, config);
}

// ---------------------------------------------------------------------------
// Persistence: one tensor file per (sample, method, config hash) plus a JSON
// sidecar; optional heatmap PNG.

inline std::filesystem::path save_attribution(const AttributionMap& map, std::size_t row, std::size_t sample_index,
                                              const std::filesystem::path& dir, bool write_png = false) {
  std::filesystem::create_directories(dir);
  const std::string stem = "s" + std::to_string(sample_index) + "_" + to_string(map.config.method) + "_" +
                           config_hash(map.config);
  const std::size_t H = map.values.dim(1), W = map.values.dim(2);
  auto v = map.values.sample(row);
  Tensor plane({H, W}, std::vector<double>(v.begin(), v.end()));
  auto path = dir / (stem + ".bxt");
  write_tensor(path, plane);
  nlohmann::json side = {{"config", to_json(map.config)},
                         {"class_index", map.class_index},
                         {"sample_index", sample_index},
                         {"shape", plane.shape()},
                         {"checksum", checksum(plane.values())}};
  std::ofstream(dir / (stem + ".json")) << side.dump(2) << '\n';
  if (write_png) png::write(dir / (stem + ".png"), png::heatmap(plane.values(), H, W));
  return path;
}

/// Reads back the (H, W) values written by save_attribution, verifying the
/// sidecar checksum.
inline Tensor load_attribution(const std::filesystem::path& tensor_path) {
  Tensor t = read_tensor(tensor_path);
  auto side_path = tensor_path;
  side_path.replace_extension(".json");
  std::ifstream f(side_path);
  if (!f) throw IngestionError(side_path.string(), "missing attribution sidecar");
  if (nlohmann::json::parse(f).at("checksum").get<std::string>() != checksum(t.values()))
    throw IngestionError(tensor_path.string(), "attribution checksum mismatch");
  return t;
}

}  // namespace backx
