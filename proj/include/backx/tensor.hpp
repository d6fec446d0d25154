#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "backx/error.hpp"

namespace backx {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

/// Dense row-major tensor of doubles. Image batches use NCHW order.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_))
      throw ShapeError("tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                       shape_str(shape_));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  // NCHW element access.
  double& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), data_);
  }

  /// Elements per leading-axis entry (one sample of a batch).
  std::size_t stride0() const { return shape_.empty() || shape_[0] == 0 ? 0 : data_.size() / shape_[0]; }

  /// Copy of entries [begin, end) along the leading axis.
  Tensor slice(std::size_t begin, std::size_t end) const {
    if (begin > end || end > shape_.at(0)) throw IndexError("slice out of range");
    Shape s = shape_;
    s[0] = end - begin;
    const std::size_t step = stride0();
    return Tensor(std::move(s), std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(begin * step),
                                                    data_.begin() + static_cast<std::ptrdiff_t>(end * step)));
  }

  std::span<double> sample(std::size_t n) { return {data_.data() + n * stride0(), stride0()}; }
  std::span<const double> sample(std::size_t n) const { return {data_.data() + n * stride0(), stride0()}; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

/// Stacks equally shaped tensors along a new leading axis.
inline Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) return {};
  Shape s = items.front().shape();
  s.insert(s.begin(), items.size());
  std::vector<double> out;
  out.reserve(shape_numel(s));
  for (const auto& t : items) {
    require_same_shape(t, items.front(), "stack");
    out.insert(out.end(), t.storage().begin(), t.storage().end());
  }
  return Tensor(std::move(s), std::move(out));
}

/// Concatenates along the leading axis.
inline Tensor concat(std::span<const Tensor> items) {
  if (items.empty()) return {};
  Shape s = items.front().shape();
  std::size_t lead = 0;
  std::vector<double> out;
  for (const auto& t : items) {
    if (t.rank() != s.size() || !std::equal(t.shape().begin() + 1, t.shape().end(), s.begin() + 1))
      throw ShapeError("concat: trailing shapes differ");
    lead += t.dim(0);
    out.insert(out.end(), t.storage().begin(), t.storage().end());
  }
  s[0] = lead;
  return Tensor(std::move(s), std::move(out));
}

/// Bilinear resize of a (H, W) plane, half-pixel centres and edge clamping
/// (the align_corners=false convention of common deep learning frameworks).
inline std::vector<double> bilinear_resize(std::span<const double> src, std::size_t in_h, std::size_t in_w,
                                           std::size_t out_h, std::size_t out_w) {
  std::vector<double> out(out_h * out_w);
  const double sy = static_cast<double>(in_h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(in_w) / static_cast<double>(out_w);
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    double fy = std::max(0.0, (static_cast<double>(oy) + 0.5) * sy - 0.5);
    auto y0 = std::min(static_cast<std::size_t>(fy), in_h - 1);
    std::size_t y1 = std::min(y0 + 1, in_h - 1);
    double ly = fy - static_cast<double>(y0);
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      double fx = std::max(0.0, (static_cast<double>(ox) + 0.5) * sx - 0.5);
      auto x0 = std::min(static_cast<std::size_t>(fx), in_w - 1);
      std::size_t x1 = std::min(x0 + 1, in_w - 1);
      double lx = fx - static_cast<double>(x0);
      double top = src[y0 * in_w + x0] * (1 - lx) + src[y0 * in_w + x1] * lx;
      double bot = src[y1 * in_w + x0] * (1 - lx) + src[y1 * in_w + x1] * lx;
      out[oy * out_w + ox] = top * (1 - ly) + bot * ly;
    }
  }
  return out;
}

}  // namespace backx
