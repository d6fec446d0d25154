#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

#include "backx/error.hpp"
#include "backx/tensor.hpp"

namespace backx {

/// A labelled batch of images in raw pixel space [0, 1], NCHW.
struct ImageBatch {
  Tensor pixels;
  std::vector<std::size_t> labels;
  /// Index of each image in its source split.
  std::vector<std::size_t> indices;

  std::size_t size() const { return pixels.rank() == 0 ? 0 : pixels.dim(0); }
  std::size_t channels() const { return pixels.dim(1); }
  std::size_t height() const { return pixels.dim(2); }
  std::size_t width() const { return pixels.dim(3); }
  Shape image_shape() const { return {pixels.dim(1), pixels.dim(2), pixels.dim(3)}; }

  void validate() const {
    if (pixels.rank() != 4) throw ShapeError("image batch must be NCHW, got " + shape_str(pixels.shape()));
    if (labels.size() != size()) throw ShapeError("label count does not match batch size");
    if (!indices.empty() && indices.size() != size()) throw ShapeError("index count does not match batch size");
    for (double v : pixels.storage())
      if (!std::isfinite(v) || v < 0.0 || v > 1.0) throw DomainError("pixel outside [0, 1]");
  }

  /// Sub-batch made of the listed rows.
  ImageBatch select(const std::vector<std::size_t>& rows) const {
    Shape s = pixels.shape();
    s[0] = rows.size();
    ImageBatch out{Tensor(s), {}, {}};
    const std::size_t step = pixels.stride0();
    for (std::size_t r = 0; r < rows.size(); ++r) {
      auto src = pixels.sample(rows[r]);
      std::copy(src.begin(), src.end(), out.pixels.data() + r * step);
      out.labels.push_back(labels.at(rows[r]));
      out.indices.push_back(indices.empty() ? rows[r] : indices.at(rows[r]));
    }
    return out;
  }

  ImageBatch slice(std::size_t begin, std::size_t end) const {
    std::vector<std::size_t> rows;
    for (std::size_t i = begin; i < end; ++i) rows.push_back(i);
    return select(rows);
  }
};

/// Per-channel affine normalisation applied after trigger stamping.
struct Normalization {
  std::vector<double> mean;
  std::vector<double> stddev;

  static Normalization identity(std::size_t channels) {
    return {std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0)};
  }
};

inline void to_json(nlohmann::json& j, const Normalization& n) { j = {{"mean", n.mean}, {"std", n.stddev}}; }
inline void from_json(const nlohmann::json& j, Normalization& n) {
  j.at("mean").get_to(n.mean);
  j.at("std").get_to(n.stddev);
}

namespace detail {
inline void check_normalization(const Tensor& t, const Normalization& n) {
  if (t.rank() != 4 || t.dim(1) != n.mean.size() || n.stddev.size() != n.mean.size())
    throw ShapeError("normalization has " + std::to_string(n.mean.size()) + " channels, batch is " +
                     shape_str(t.shape()));
  for (double s : n.stddev)
    if (!(s > 0)) throw DomainError("normalization std must be positive");
}
}  // namespace detail

/// (pixel - mean) / std per channel.
inline Tensor apply_normalization(const Tensor& pixels, const Normalization& n) {
  detail::check_normalization(pixels, n);
  Tensor out(pixels.shape());
  const std::size_t plane = pixels.dim(2) * pixels.dim(3);
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const std::size_t c = (i / plane) % pixels.dim(1);
    out[i] = (pixels[i] - n.mean[c]) / n.stddev[c];
  }
  return out;
}

inline Tensor remove_normalization(const Tensor& normalized, const Normalization& n) {
  detail::check_normalization(normalized, n);
  Tensor out(normalized.shape());
  const std::size_t plane = normalized.dim(2) * normalized.dim(3);
  for (std::size_t i = 0; i < normalized.size(); ++i) {
    const std::size_t c = (i / plane) % normalized.dim(1);
    out[i] = normalized[i] * n.stddev[c] + n.mean[c];
  }
  return out;
}

inline ImageBatch apply_normalization(const ImageBatch& batch, const Normalization& n) {
  return {apply_normalization(batch.pixels, n), batch.labels, batch.indices};
}

}  // namespace backx
