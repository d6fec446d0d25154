#pragma once

// Minimal differentiable layer stack: NCHW doubles, reverse-mode gradients
// through a fixed sequence of layers. Every layer caches what its backward
// pass needs during forward, so a Network is not safe for concurrent use;
// clone it per worker.

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "backx/error.hpp"
#include "backx/random.hpp"
#include "backx/tensor.hpp"

namespace backx::nn {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;
};

class Layer {
 public:
  virtual ~Layer() = default;

  virtual std::string type() const = 0;
  /// Output shape for a batch input shape.
  virtual Shape output_shape(const Shape& in) const = 0;
  virtual Tensor forward(const Tensor& in) = 0;
  /// Returns the gradient at the layer input and accumulates into parameter
  /// gradients.
  virtual Tensor backward(const Tensor& grad_out) = 0;
  virtual std::vector<Param*> params() { return {}; }
  /// Additive per-output-channel offset, if the layer carries one. Layers with
  /// a bias compute y = g(x) + b broadcast over every position of channel c.
  virtual const Tensor* bias() const { return nullptr; }
  virtual std::unique_ptr<Layer> clone() const = 0;
  virtual nlohmann::json spec() const = 0;
};

/// Fixed per-channel affine map (x - mean) / std. Its offset -mean/std is
/// reported as a non-trainable bias so bias-gradient decompositions stay
/// complete.
class Normalize final : public Layer {
 public:
  Normalize(std::vector<double> mean, std::vector<double> stddev) : mean_(std::move(mean)), std_(std::move(stddev)) {
    if (mean_.size() != std_.size()) throw ShapeError("normalize: mean/std length mismatch");
    std::vector<double> off(mean_.size());
    for (std::size_t c = 0; c < mean_.size(); ++c) {
      if (!(std_[c] > 0)) throw DomainError("normalize: std must be positive");
      off[c] = -mean_[c] / std_[c];
    }
    const std::size_t n = off.size();
    offset_ = Tensor({n}, std::move(off));
  }

  std::string type() const override { return "normalize"; }
  Shape output_shape(const Shape& in) const override { return in; }
  const Tensor* bias() const override { return &offset_; }
  const std::vector<double>& mean() const { return mean_; }
  const std::vector<double>& stddev() const { return std_; }

  Tensor forward(const Tensor& in) override {
    check(in);
    Tensor out(in.shape());
    const std::size_t plane = in.dim(2) * in.dim(3);
    for (std::size_t n = 0; n < in.dim(0); ++n)
      for (std::size_t c = 0; c < in.dim(1); ++c) {
        const double* src = in.data() + (n * in.dim(1) + c) * plane;
        double* dst = out.data() + (n * in.dim(1) + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i] / std_[c] + offset_[c];
      }
    return out;
  }

  Tensor backward(const Tensor& grad_out) override {
    Tensor g(grad_out.shape());
    const std::size_t plane = grad_out.dim(2) * grad_out.dim(3);
    for (std::size_t n = 0; n < grad_out.dim(0); ++n)
      for (std::size_t c = 0; c < grad_out.dim(1); ++c) {
        const double* src = grad_out.data() + (n * grad_out.dim(1) + c) * plane;
        double* dst = g.data() + (n * grad_out.dim(1) + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i] / std_[c];
      }
    return g;
  }

  std::unique_ptr<Layer> clone() const override { return std::make_unique<Normalize>(*this); }
  nlohmann::json spec() const override { return {{"type", type()}, {"mean", mean_}, {"std", std_}}; }

 private:
  void check(const Tensor& in) const {
    if (in.rank() != 4 || in.dim(1) != mean_.size())
      throw ShapeError("normalize: expected NCHW with " + std::to_string(mean_.size()) + " channels, got " +
                       shape_str(in.shape()));
  }
  std::vector<double> mean_, std_;
  Tensor offset_;
};

/// Square-kernel 2D convolution, stride 1, zero padding, via im2col + GEMM.
class Conv2d final : public Layer {
 public:
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t padding)
      : in_(in_channels), out_(out_channels), k_(kernel), pad_(padding) {
    weight_ = {"weight", Tensor({out_, in_, k_, k_}), Tensor({out_, in_, k_, k_}), true};
    bias_ = {"bias", Tensor({out_}), Tensor({out_}), true};
  }

  std::string type() const override { return "conv2d"; }
  Shape output_shape(const Shape& in) const override {
    return {in.at(0), out_, in.at(2) + 2 * pad_ - k_ + 1, in.at(3) + 2 * pad_ - k_ + 1};
  }
  std::vector<Param*> params() override { return {&weight_, &bias_}; }
  const Tensor* bias() const override { return &bias_.value; }
  Tensor& weight() { return weight_.value; }
  Tensor& bias_values() { return bias_.value; }

  void init_he(Rng& rng) {
    std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / static_cast<double>(in_ * k_ * k_)));
    for (auto& w : weight_.value.storage()) w = nd(rng);
    std::fill(bias_.value.storage().begin(), bias_.value.storage().end(), 0.0);
  }

  Tensor forward(const Tensor& in) override {
    if (in.rank() != 4 || in.dim(1) != in_)
      throw ShapeError("conv2d: expected " + std::to_string(in_) + " input channels, got " + shape_str(in.shape()));
    in_shape_ = in.shape();
    const Shape os = output_shape(in_shape_);
    const std::size_t hw = os[2] * os[3];
    const std::size_t rows = in_ * k_ * k_;
    cols_.assign(in.dim(0) * rows * hw, 0.0);
    Tensor out(os);
    ConstMatMap w(weight_.value.data(), static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(rows));
    for (std::size_t n = 0; n < in.dim(0); ++n) {
      double* col = cols_.data() + n * rows * hw;
      im2col(in.data() + n * in.stride0(), col, os[2], os[3]);
      MatMap y(out.data() + n * out.stride0(), static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(hw));
      y.noalias() = w * ConstMatMap(col, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(hw));
      for (std::size_t c = 0; c < out_; ++c) y.row(static_cast<Eigen::Index>(c)).array() += bias_.value[c];
    }
    return out;
  }

  Tensor backward(const Tensor& grad_out) override {
    const std::size_t oh = grad_out.dim(2), ow = grad_out.dim(3), hw = oh * ow;
    const std::size_t rows = in_ * k_ * k_;
    Tensor grad_in(in_shape_);
    ConstMatMap w(weight_.value.data(), static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(rows));
    MatMap dw(weight_.grad.data(), static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(rows));
    RowMatrix dcol(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(hw));
    for (std::size_t n = 0; n < grad_out.dim(0); ++n) {
      ConstMatMap g(grad_out.data() + n * grad_out.stride0(), static_cast<Eigen::Index>(out_),
                    static_cast<Eigen::Index>(hw));
      ConstMatMap col(cols_.data() + n * rows * hw, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(hw));
      dw.noalias() += g * col.transpose();
      for (std::size_t c = 0; c < out_; ++c) bias_.grad[c] += g.row(static_cast<Eigen::Index>(c)).sum();
      dcol.noalias() = w.transpose() * g;
      col2im(dcol.data(), grad_in.data() + n * grad_in.stride0(), oh, ow);
    }
    return grad_in;
  }

  std::unique_ptr<Layer> clone() const override { return std::make_unique<Conv2d>(*this); }
  nlohmann::json spec() const override {
    return {{"type", type()}, {"in", in_}, {"out", out_}, {"kernel", k_}, {"padding", pad_}};
  }

 private:
  void im2col(const double* x, double* col, std::size_t oh, std::size_t ow) const {
    const auto h = static_cast<std::ptrdiff_t>(in_shape_[2]), wd = static_cast<std::ptrdiff_t>(in_shape_[3]);
    std::size_t r = 0;
    for (std::size_t c = 0; c < in_; ++c)
      for (std::size_t ky = 0; ky < k_; ++ky)
        for (std::size_t kx = 0; kx < k_; ++kx, ++r) {
          double* dst = col + r * oh * ow;
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(pad_);
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(pad_);
              dst[oy * ow + ox] = (iy < 0 || iy >= h || ix < 0 || ix >= wd) ? 0.0 : x[(c * h + iy) * wd + ix];
            }
          }
        }
  }

  void col2im(const double* col, double* x, std::size_t oh, std::size_t ow) const {
    const auto h = static_cast<std::ptrdiff_t>(in_shape_[2]), wd = static_cast<std::ptrdiff_t>(in_shape_[3]);
    std::size_t r = 0;
    for (std::size_t c = 0; c < in_; ++c)
      for (std::size_t ky = 0; ky < k_; ++ky)
        for (std::size_t kx = 0; kx < k_; ++kx, ++r) {
          const double* src = col + r * oh * ow;
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(pad_);
            if (iy < 0 || iy >= h) continue;
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(pad_);
              if (ix >= 0 && ix < wd) x[(c * h + iy) * wd + ix] += src[oy * ow + ox];
            }
          }
        }
  }

  std::size_t in_, out_, k_, pad_;
  Param weight_, bias_;
  Shape in_shape_;
  std::vector<double> cols_;
};

class ReLU final : public Layer {
 public:
  std::string type() const override { return "relu"; }
  Shape output_shape(const Shape& in) const override { return in; }
  Tensor forward(const Tensor& in) override {
    Tensor out(in.shape());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0 ? in[i] : 0.0;
    input_ = in;
    return out;
  }
  Tensor backward(const Tensor& grad_out) override {
    Tensor g(grad_out.shape());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = input_[i] > 0 ? grad_out[i] : 0.0;
    return g;
  }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<ReLU>(*this); }
  nlohmann::json spec() const override { return {{"type", type()}}; }

 private:
  Tensor input_;
};

/// Non-overlapping max pooling (kernel == stride). Ties go to the first
/// element in row-major window order.
class MaxPool2d final : public Layer {
 public:
  explicit MaxPool2d(std::size_t size) : k_(size) {}
  std::string type() const override { return "maxpool2d"; }
  Shape output_shape(const Shape& in) const override { return {in.at(0), in.at(1), in.at(2) / k_, in.at(3) / k_}; }

  Tensor forward(const Tensor& in) override {
    if (in.rank() != 4) throw ShapeError("maxpool2d: expected NCHW");
    in_shape_ = in.shape();
    Tensor out(output_shape(in_shape_));
    argmax_.assign(out.size(), 0);
    const std::size_t oh = out.dim(2), ow = out.dim(3), h = in.dim(2), w = in.dim(3);
    std::size_t o = 0;
    for (std::size_t nc = 0; nc < in.dim(0) * in.dim(1); ++nc) {
      const std::size_t base = nc * h * w;
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
          std::size_t best = base + oy * k_ * w + ox * k_;
          for (std::size_t dy = 0; dy < k_; ++dy)
            for (std::size_t dx = 0; dx < k_; ++dx) {
              const std::size_t idx = base + (oy * k_ + dy) * w + ox * k_ + dx;
              if (in[idx] > in[best]) best = idx;
            }
          argmax_[o] = best;
          out[o] = in[best];
        }
    }
    return out;
  }

  Tensor backward(const Tensor& grad_out) override {
    Tensor g(in_shape_);
    for (std::size_t o = 0; o < grad_out.size(); ++o) g[argmax_[o]] += grad_out[o];
    return g;
  }

  std::unique_ptr<Layer> clone() const override { return std::make_unique<MaxPool2d>(*this); }
  nlohmann::json spec() const override { return {{"type", type()}, {"size", k_}}; }

 private:
  std::size_t k_;
  Shape in_shape_;
  std::vector<std::size_t> argmax_;
};

class Flatten final : public Layer {
 public:
  std::string type() const override { return "flatten"; }
  Shape output_shape(const Shape& in) const override {
    return {in.at(0), shape_numel(Shape(in.begin() + 1, in.end()))};
  }
  Tensor forward(const Tensor& in) override {
    in_shape_ = in.shape();
    return in.reshaped(output_shape(in.shape()));
  }
  Tensor backward(const Tensor& grad_out) override { return grad_out.reshaped(in_shape_); }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Flatten>(*this); }
  nlohmann::json spec() const override { return {{"type", type()}}; }

 private:
  Shape in_shape_;
};

/// Fully connected layer y = x W^T + b on (N, in) inputs.
class Linear final : public Layer {
 public:
  Linear(std::size_t in_features, std::size_t out_features, bool with_bias = true)
      : in_(in_features), out_(out_features), has_bias_(with_bias) {
    weight_ = {"weight", Tensor({out_, in_}), Tensor({out_, in_}), true};
    bias_ = {"bias", Tensor({out_}), Tensor({out_}), with_bias};
  }

  std::string type() const override { return "linear"; }
  Shape output_shape(const Shape& in) const override { return {in.at(0), out_}; }
  std::vector<Param*> params() override {
    if (has_bias_) return {&weight_, &bias_};
    return {&weight_};
  }
  const Tensor* bias() const override { return has_bias_ ? &bias_.value : nullptr; }
  Tensor& weight() { return weight_.value; }
  Tensor& bias_values() { return bias_.value; }

  void init_he(Rng& rng) {
    std::normal_distribution<double> nd(0.0, std::sqrt(1.0 / static_cast<double>(in_)));
    for (auto& w : weight_.value.storage()) w = nd(rng);
    std::fill(bias_.value.storage().begin(), bias_.value.storage().end(), 0.0);
  }

  Tensor forward(const Tensor& in) override {
    if (in.rank() != 2 || in.dim(1) != in_)
      throw ShapeError("linear: expected (N, " + std::to_string(in_) + "), got " + shape_str(in.shape()));
    input_ = in;
    const auto n = static_cast<Eigen::Index>(in.dim(0));
    Tensor out({in.dim(0), out_});
    MatMap y(out.data(), n, static_cast<Eigen::Index>(out_));
    y.noalias() = ConstMatMap(in.data(), n, static_cast<Eigen::Index>(in_)) *
                  ConstMatMap(weight_.value.data(), static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(in_))
                      .transpose();
    if (has_bias_)
      for (Eigen::Index r = 0; r < n; ++r)
        for (std::size_t o = 0; o < out_; ++o) y(r, static_cast<Eigen::Index>(o)) += bias_.value[o];
    return out;
  }

  Tensor backward(const Tensor& grad_out) override {
    const auto n = static_cast<Eigen::Index>(grad_out.dim(0));
    ConstMatMap g(grad_out.data(), n, static_cast<Eigen::Index>(out_));
    ConstMatMap x(input_.data(), n, static_cast<Eigen::Index>(in_));
    ConstMatMap w(weight_.value.data(), static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(in_));
    MatMap(weight_.grad.data(), static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(in_)).noalias() +=
        g.transpose() * x;
    if (has_bias_)
      for (std::size_t o = 0; o < out_; ++o) bias_.grad[o] += g.col(static_cast<Eigen::Index>(o)).sum();
    Tensor grad_in({grad_out.dim(0), in_});
    MatMap(grad_in.data(), n, static_cast<Eigen::Index>(in_)).noalias() = g * w;
    return grad_in;
  }

  std::unique_ptr<Layer> clone() const override { return std::make_unique<Linear>(*this); }
  nlohmann::json spec() const override {
    return {{"type", type()}, {"in", in_}, {"out", out_}, {"bias", has_bias_}};
  }

 private:
  std::size_t in_, out_;
  bool has_bias_;
  Param weight_, bias_;
  Tensor input_;
};

inline std::unique_ptr<Layer> layer_from_spec(const nlohmann::json& s) {
  const std::string t = s.at("type");
  if (t == "normalize") return std::make_unique<Normalize>(s.at("mean"), s.at("std"));
  if (t == "conv2d")
    return std::make_unique<Conv2d>(s.at("in"), s.at("out"), s.at("kernel"), s.at("padding"));
  if (t == "relu") return std::make_unique<ReLU>();
  if (t == "maxpool2d") return std::make_unique<MaxPool2d>(s.at("size"));
  if (t == "flatten") return std::make_unique<Flatten>();
  if (t == "linear") return std::make_unique<Linear>(s.at("in"), s.at("out"), s.value("bias", true));
  throw LookupError("unknown layer type '" + t + "'");
}

/// Named sequential stack. forward() records every layer output and
/// backward() records the gradient arriving at every layer output, so any
/// named layer can be inspected after one forward/backward pair.
class Network {
 public:
  Network() = default;
  Network(const Network& other) { *this = other; }
  Network& operator=(const Network& other) {
    if (this == &other) return *this;
    layers_.clear();
    for (const auto& [name, layer] : other.layers_) layers_.emplace_back(name, layer->clone());
    outputs_.clear();
    output_grads_.clear();
    return *this;
  }
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  Network& add(std::string name, std::unique_ptr<Layer> layer) {
    for (const auto& l : layers_)
      if (l.first == name) throw DomainError("duplicate layer name '" + name + "'");
    layers_.emplace_back(std::move(name), std::move(layer));
    return *this;
  }

  std::size_t size() const noexcept { return layers_.size(); }
  const std::string& name(std::size_t i) const { return layers_.at(i).first; }
  Layer& layer(std::size_t i) { return *layers_.at(i).second; }
  const Layer& layer(std::size_t i) const { return *layers_.at(i).second; }

  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < layers_.size(); ++i)
      if (layers_[i].first == name) return i;
    throw LookupError("no layer named '" + name + "'");
  }
  bool has_layer(const std::string& name) const {
    for (const auto& l : layers_)
      if (l.first == name) return true;
    return false;
  }

  Tensor forward(const Tensor& x) {
    outputs_.clear();
    output_grads_.clear();
    Tensor h = x;
    for (auto& [name, layer] : layers_) {
      h = layer->forward(h);
      outputs_.push_back(h);
    }
    return h;
  }

  /// Back-propagates a gradient on the final output; returns the input
  /// gradient. Parameter gradients accumulate until zero_grad().
  Tensor backward(const Tensor& grad_logits) {
    if (outputs_.size() != layers_.size()) throw Error("backward called without a preceding forward");
    output_grads_.assign(layers_.size(), Tensor{});
    Tensor g = grad_logits;
    for (std::size_t i = layers_.size(); i-- > 0;) {
      output_grads_[i] = g;
      g = layers_[i].second->backward(g);
    }
    return g;
  }

  const Tensor& output(std::size_t i) const { return outputs_.at(i); }
  const Tensor& output_grad(std::size_t i) const { return output_grads_.at(i); }

  std::vector<Param*> params() {
    std::vector<Param*> out;
    for (auto& l : layers_)
      for (Param* p : l.second->params()) out.push_back(p);
    return out;
  }

  void zero_grad() {
    for (Param* p : params()) std::fill(p->grad.storage().begin(), p->grad.storage().end(), 0.0);
  }

  nlohmann::json spec() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& [name, layer] : layers_) {
      auto s = layer->spec();
      s["name"] = name;
      arr.push_back(std::move(s));
    }
    return arr;
  }

  static Network from_spec(const nlohmann::json& arr) {
    Network net;
    for (const auto& s : arr) net.add(s.at("name"), layer_from_spec(s));
    return net;
  }

 private:
  std::vector<std::pair<std::string, std::unique_ptr<Layer>>> layers_;
  std::vector<Tensor> outputs_;
  std::vector<Tensor> output_grads_;
};

}  // namespace backx::nn
