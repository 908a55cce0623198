#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "mocomsi/core/error.hpp"
#include "mocomsi/core/rng.hpp"
#include "mocomsi/nn/tensor.hpp"

namespace mocomsi::nn {

template <typename T>
struct Parameter {
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;

  explicit Parameter(std::vector<int> s = {})
      : shape(std::move(s)), value(Tensor<T>::count(shape), T(0)), grad(value.size(), T(0)) {}
};

// training: batch statistics and dropout are live.
// record: intermediate values are kept so backward() can run.
struct Pass {
  bool training = false;
  bool record = false;
  static constexpr Pass train() { return {true, true}; }
  static constexpr Pass train_no_grad() { return {true, false}; }
  static constexpr Pass eval() { return {false, false}; }
};

template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor<T> forward(const Tensor<T>& x, Pass pass) = 0;
  // Accumulates parameter gradients and returns d(loss)/d(input) for the
  // most recent recorded forward call.
  virtual Tensor<T> backward(const Tensor<T>& grad_out) = 0;
  virtual void parameters(std::vector<Parameter<T>*>&) {}
  // Non-trainable state that is still part of the model (running statistics).
  virtual void buffers(std::vector<std::vector<T>*>&) {}
  virtual std::unique_ptr<Layer<T>> clone() const = 0;
  virtual std::string kind() const = 0;
};

template <typename Derived, typename T>
class Clonable : public Layer<T> {
 public:
  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<Derived>(static_cast<const Derived&>(*this));
  }
};

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
class Conv2d final : public Clonable<Conv2d<T>, T> {
 public:
  Conv2d(int in_ch, int out_ch, int kernel, int stride, int padding, bool bias, std::mt19937_64& gen)
      : in_(in_ch), out_(out_ch), k_(kernel), stride_(stride), pad_(padding), has_bias_(bias),
        weight_({out_ch, in_ch * kernel * kernel}), bias_({bias ? out_ch : 0}) {
    // Kaiming normal, fan-out mode.
    const double sd = std::sqrt(2.0 / (static_cast<double>(out_ch) * kernel * kernel));
    for (auto& w : weight_.value) w = static_cast<T>(sd * normal(gen));
  }

  Tensor<T> forward(const Tensor<T>& x, Pass pass) override {
    require(x.rank() == 4 && x.dim(1) == in_, "conv2d: expected N x " + std::to_string(in_) + " x H x W, got " + shape_string(x.shape));
    const int n = x.dim(0);
    h_ = x.dim(2);
    w_ = x.dim(3);
    ho_ = (h_ + 2 * pad_ - k_) / stride_ + 1;
    wo_ = (w_ + 2 * pad_ - k_) / stride_ + 1;
    const int kk = in_ * k_ * k_, p = ho_ * wo_;
    Tensor<T> y({n, out_, ho_, wo_});
    if (pass.record) cols_.assign(static_cast<std::size_t>(n) * kk * p, T(0));
    std::vector<T> scratch;
    ConstMatMap<T> wm(weight_.value.data(), out_, kk);
    for (int i = 0; i < n; ++i) {
      T* col = pass.record ? cols_.data() + static_cast<std::size_t>(i) * kk * p : nullptr;
      if (!col) {
        scratch.assign(static_cast<std::size_t>(kk) * p, T(0));
        col = scratch.data();
      }
      im2col(x.item(i), col);
      MatMap<T> ym(y.item(i), out_, p);
      ym.noalias() = wm * ConstMatMap<T>(col, kk, p);
      if (has_bias_)
        for (int o = 0; o < out_; ++o) ym.row(o).array() += bias_.value[static_cast<std::size_t>(o)];
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& g) override {
    const int n = g.dim(0), kk = in_ * k_ * k_, p = ho_ * wo_;
    require(cols_.size() == static_cast<std::size_t>(n) * kk * p, "conv2d: backward without recorded forward");
    Tensor<T> dx({n, in_, h_, w_});
    MatMap<T> dw(weight_.grad.data(), out_, kk);
    ConstMatMap<T> wm(weight_.value.data(), out_, kk);
    RowMat<T> dcol(kk, p);
    for (int i = 0; i < n; ++i) {
      ConstMatMap<T> gm(g.item(i), out_, p);
      ConstMatMap<T> col(cols_.data() + static_cast<std::size_t>(i) * kk * p, kk, p);
      dw.noalias() += gm * col.transpose();
      if (has_bias_)
        for (int o = 0; o < out_; ++o) bias_.grad[static_cast<std::size_t>(o)] += gm.row(o).sum();
      dcol.noalias() = wm.transpose() * gm;
      col2im(dcol.data(), dx.item(i));
    }
    return dx;
  }

  void parameters(std::vector<Parameter<T>*>& out) override {
    out.push_back(&weight_);
    if (has_bias_) out.push_back(&bias_);
  }
  std::string kind() const override { return "conv2d"; }
  Parameter<T>& weight() { return weight_; }

 private:
  void im2col(const T* x, T* col) const {
    const int p = ho_ * wo_;
    for (int c = 0; c < in_; ++c)
      for (int ky = 0; ky < k_; ++ky)
        for (int kx = 0; kx < k_; ++kx) {
          T* row = col + static_cast<std::size_t>((c * k_ + ky) * k_ + kx) * p;
          for (int oy = 0; oy < ho_; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            for (int ox = 0; ox < wo_; ++ox) {
              const int ix = ox * stride_ - pad_ + kx;
              row[oy * wo_ + ox] = (iy >= 0 && iy < h_ && ix >= 0 && ix < w_)
                                       ? x[(static_cast<std::size_t>(c) * h_ + iy) * w_ + ix]
                                       : T(0);
            }
          }
        }
  }

  void col2im(const T* col, T* dx) const {
    const int p = ho_ * wo_;
    for (int c = 0; c < in_; ++c)
      for (int ky = 0; ky < k_; ++ky)
        for (int kx = 0; kx < k_; ++kx) {
          const T* row = col + static_cast<std::size_t>((c * k_ + ky) * k_ + kx) * p;
          for (int oy = 0; oy < ho_; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= h_) continue;
            for (int ox = 0; ox < wo_; ++ox) {
              const int ix = ox * stride_ - pad_ + kx;
              if (ix >= 0 && ix < w_) dx[(static_cast<std::size_t>(c) * h_ + iy) * w_ + ix] += row[oy * wo_ + ox];
            }
          }
        }
  }

  int in_, out_, k_, stride_, pad_;
  bool has_bias_;
  Parameter<T> weight_, bias_;
  int h_ = 0, w_ = 0, ho_ = 0, wo_ = 0;
  std::vector<T> cols_;
};

namespace detail {

// Shared normalization kernel: statistics over `count` values starting at
// `base` with stride patterns supplied by the caller through index lists.
template <typename T>
struct NormCache {
  std::vector<T> xhat;
  std::vector<T> inv_std;
};

}  // namespace detail

// Normalization over channel groups of a single sample; no batch statistics.
template <typename T>
class GroupNorm final : public Clonable<GroupNorm<T>, T> {
 public:
  GroupNorm(int groups, int channels, double eps = 1e-5)
      : groups_(groups), channels_(channels), eps_(eps), gamma_({channels}), beta_({channels}) {
    require(groups > 0 && channels % groups == 0, "groupnorm: channels must be divisible by groups");
    std::fill(gamma_.value.begin(), gamma_.value.end(), T(1));
  }

  Tensor<T> forward(const Tensor<T>& x, Pass pass) override {
    require(x.rank() == 4 && x.dim(1) == channels_, "groupnorm: bad input shape " + shape_string(x.shape));
    const int n = x.dim(0);
    const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    const std::size_t gsize = hw * static_cast<std::size_t>(channels_ / groups_);
    Tensor<T> y(x.shape);
    if (pass.record) {
      cache_.xhat.assign(x.size(), T(0));
      cache_.inv_std.assign(static_cast<std::size_t>(n) * groups_, T(0));
      shape_ = x.shape;
    }
    for (int i = 0; i < n; ++i)
      for (int g = 0; g < groups_; ++g) {
        const std::size_t base = static_cast<std::size_t>(i) * x.stride0() + g * gsize;
        double mean = 0.0, var = 0.0;
        for (std::size_t j = 0; j < gsize; ++j) mean += x.data[base + j];
        mean /= static_cast<double>(gsize);
        for (std::size_t j = 0; j < gsize; ++j) {
          const double d = x.data[base + j] - mean;
          var += d * d;
        }
        var /= static_cast<double>(gsize);
        const double inv = 1.0 / std::sqrt(var + eps_);
        if (pass.record) cache_.inv_std[static_cast<std::size_t>(i * groups_ + g)] = static_cast<T>(inv);
        for (std::size_t j = 0; j < gsize; ++j) {
          const T xh = static_cast<T>((x.data[base + j] - mean) * inv);
          const auto c = static_cast<std::size_t>(g * (channels_ / groups_)) + j / hw;
          if (pass.record) cache_.xhat[base + j] = xh;
          y.data[base + j] = gamma_.value[c] * xh + beta_.value[c];
        }
      }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    require(gy.shape == shape_, "groupnorm: backward without recorded forward");
    const int n = gy.dim(0);
    const std::size_t hw = static_cast<std::size_t>(gy.dim(2)) * gy.dim(3);
    const int cpg = channels_ / groups_;
    const std::size_t gsize = hw * static_cast<std::size_t>(cpg);
    Tensor<T> dx(gy.shape);
    std::vector<T> dxh(gsize);
    for (int i = 0; i < n; ++i)
      for (int g = 0; g < groups_; ++g) {
        const std::size_t base = static_cast<std::size_t>(i) * gy.stride0() + g * gsize;
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t j = 0; j < gsize; ++j) {
          const auto c = static_cast<std::size_t>(g * cpg) + j / hw;
          const T go = gy.data[base + j];
          gamma_.grad[c] += go * cache_.xhat[base + j];
          beta_.grad[c] += go;
          dxh[j] = go * gamma_.value[c];
          s1 += dxh[j];
          s2 += dxh[j] * cache_.xhat[base + j];
        }
        const double inv = cache_.inv_std[static_cast<std::size_t>(i * groups_ + g)];
        const double m = static_cast<double>(gsize);
        for (std::size_t j = 0; j < gsize; ++j) {
          dx.data[base + j] = static_cast<T>(inv * (dxh[j] - s1 / m - cache_.xhat[base + j] * s2 / m));
        }
      }
    return dx;
  }

  void parameters(std::vector<Parameter<T>*>& out) override {
    out.push_back(&gamma_);
    out.push_back(&beta_);
  }
  std::string kind() const override { return "groupnorm"; }

 private:
  int groups_, channels_;
  double eps_;
  Parameter<T> gamma_, beta_;
  detail::NormCache<T> cache_;
  std::vector<int> shape_;
};

// Batch normalization over (N, H, W) per channel. Each forward call uses the
// statistics of its own batch, so two views passed separately never share them.
template <typename T>
class BatchNorm2d final : public Clonable<BatchNorm2d<T>, T> {
 public:
  explicit BatchNorm2d(int channels, double momentum = 0.1, double eps = 1e-5)
      : channels_(channels), momentum_(momentum), eps_(eps), gamma_({channels}), beta_({channels}),
        running_mean_(static_cast<std::size_t>(channels), T(0)), running_var_(static_cast<std::size_t>(channels), T(1)) {
    std::fill(gamma_.value.begin(), gamma_.value.end(), T(1));
  }

  Tensor<T> forward(const Tensor<T>& x, Pass pass) override {
    require(x.rank() == 4 && x.dim(1) == channels_, "batchnorm: bad input shape " + shape_string(x.shape));
    const int n = x.dim(0);
    const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    const double m = static_cast<double>(n) * static_cast<double>(hw);
    Tensor<T> y(x.shape);
    if (pass.record) {
      cache_.xhat.assign(x.size(), T(0));
      cache_.inv_std.assign(static_cast<std::size_t>(channels_), T(0));
      shape_ = x.shape;
    }
    for (int c = 0; c < channels_; ++c) {
      double mean, var;
      if (pass.training) {
        mean = 0.0;
        var = 0.0;
        for (int i = 0; i < n; ++i) {
          const T* p = x.item(i) + c * hw;
          for (std::size_t j = 0; j < hw; ++j) mean += p[j];
        }
        mean /= m;
        for (int i = 0; i < n; ++i) {
          const T* p = x.item(i) + c * hw;
          for (std::size_t j = 0; j < hw; ++j) var += (p[j] - mean) * (p[j] - mean);
        }
        var /= m;
        const double unbiased = m > 1 ? var * m / (m - 1) : var;
        auto& rm = running_mean_[static_cast<std::size_t>(c)];
        auto& rv = running_var_[static_cast<std::size_t>(c)];
        rm = static_cast<T>((1 - momentum_) * rm + momentum_ * mean);
        rv = static_cast<T>((1 - momentum_) * rv + momentum_ * unbiased);
      } else {
        mean = running_mean_[static_cast<std::size_t>(c)];
        var = running_var_[static_cast<std::size_t>(c)];
      }
      const double inv = 1.0 / std::sqrt(var + eps_);
      if (pass.record) cache_.inv_std[static_cast<std::size_t>(c)] = static_cast<T>(inv);
      const T ga = gamma_.value[static_cast<std::size_t>(c)], be = beta_.value[static_cast<std::size_t>(c)];
      for (int i = 0; i < n; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * x.stride0() + c * hw;
        for (std::size_t j = 0; j < hw; ++j) {
          const T xh = static_cast<T>((x.data[base + j] - mean) * inv);
          if (pass.record) cache_.xhat[base + j] = xh;
          y.data[base + j] = ga * xh + be;
        }
      }
    }
    training_record_ = pass.training;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    require(gy.shape == shape_, "batchnorm: backward without recorded forward");
    const int n = gy.dim(0);
    const std::size_t hw = static_cast<std::size_t>(gy.dim(2)) * gy.dim(3);
    const double m = static_cast<double>(n) * static_cast<double>(hw);
    Tensor<T> dx(gy.shape);
    for (int c = 0; c < channels_; ++c) {
      const auto cc = static_cast<std::size_t>(c);
      double s1 = 0.0, s2 = 0.0;
      for (int i = 0; i < n; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * gy.stride0() + c * hw;
        for (std::size_t j = 0; j < hw; ++j) {
          const T go = gy.data[base + j];
          gamma_.grad[cc] += go * cache_.xhat[base + j];
          beta_.grad[cc] += go;
          const double d = go * gamma_.value[cc];
          s1 += d;
          s2 += d * cache_.xhat[base + j];
        }
      }
      const double inv = cache_.inv_std[cc];
      for (int i = 0; i < n; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * gy.stride0() + c * hw;
        for (std::size_t j = 0; j < hw; ++j) {
          const double d = gy.data[base + j] * gamma_.value[cc];
          dx.data[base + j] = training_record_
                                  ? static_cast<T>(inv * (d - s1 / m - cache_.xhat[base + j] * s2 / m))
                                  : static_cast<T>(inv * d);
        }
      }
    }
    return dx;
  }

  void parameters(std::vector<Parameter<T>*>& out) override {
    out.push_back(&gamma_);
    out.push_back(&beta_);
  }
  void buffers(std::vector<std::vector<T>*>& out) override {
    out.push_back(&running_mean_);
    out.push_back(&running_var_);
  }
  std::string kind() const override { return "batchnorm2d"; }

 private:
  int channels_;
  double momentum_, eps_;
  Parameter<T> gamma_, beta_;
  std::vector<T> running_mean_, running_var_;
  detail::NormCache<T> cache_;
  std::vector<int> shape_;
  bool training_record_ = false;
};

template <typename T>
class ReLU final : public Clonable<ReLU<T>, T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, Pass pass) override {
    Tensor<T> y(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = x.data[i] > T(0) ? x.data[i] : T(0);
    if (pass.record) {
      mask_.resize(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) mask_[i] = x.data[i] > T(0);
    }
    return y;
  }
  Tensor<T> backward(const Tensor<T>& g) override {
    require(mask_.size() == g.size(), "relu: backward without recorded forward");
    Tensor<T> dx(g.shape);
    for (std::size_t i = 0; i < g.size(); ++i) dx.data[i] = mask_[i] ? g.data[i] : T(0);
    return dx;
  }
  std::string kind() const override { return "relu"; }

 private:
  std::vector<bool> mask_;
};

template <typename T>
class MaxPool2d final : public Clonable<MaxPool2d<T>, T> {
 public:
  MaxPool2d(int kernel, int stride, int padding) : k_(kernel), s_(stride), p_(padding) {}

  Tensor<T> forward(const Tensor<T>& x, Pass pass) override {
    require(x.rank() == 4, "maxpool: expected NCHW input");
    in_shape_ = x.shape;
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int ho = (h + 2 * p_ - k_) / s_ + 1, wo = (w + 2 * p_ - k_) / s_ + 1;
    Tensor<T> y({n, c, ho, wo});
    if (pass.record) argmax_.assign(y.size(), 0);
    std::size_t out = 0;
    for (int i = 0; i < n; ++i)
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t plane = (static_cast<std::size_t>(i) * c + ch) * h * w;
        for (int oy = 0; oy < ho; ++oy)
          for (int ox = 0; ox < wo; ++ox, ++out) {
            T best = -std::numeric_limits<T>::infinity();
            std::size_t arg = plane;
            for (int ky = 0; ky < k_; ++ky)
              for (int kx = 0; kx < k_; ++kx) {
                const int iy = oy * s_ - p_ + ky, ix = ox * s_ - p_ + kx;
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                const std::size_t idx = plane + static_cast<std::size_t>(iy) * w + ix;
                if (x.data[idx] > best) {
                  best = x.data[idx];
                  arg = idx;
                }
              }
            y.data[out] = best;
            if (pass.record) argmax_[out] = arg;
          }
      }
    return y;
  }
  Tensor<T> backward(const Tensor<T>& g) override {
    require(argmax_.size() == g.size(), "maxpool: backward without recorded forward");
    Tensor<T> dx(in_shape_);
    for (std::size_t i = 0; i < g.size(); ++i) dx.data[argmax_[i]] += g.data[i];
    return dx;
  }
  std::string kind() const override { return "maxpool2d"; }

 private:
  int k_, s_, p_;
  std::vector<int> in_shape_;
  std::vector<std::size_t> argmax_;
};

// N x C x H x W -> N x C
template <typename T>
class GlobalAvgPool final : public Clonable<GlobalAvgPool<T>, T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, Pass) override {
    require(x.rank() == 4, "avgpool: expected NCHW input");
    in_shape_ = x.shape;
    const int n = x.dim(0), c = x.dim(1);
    const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    Tensor<T> y({n, c});
    for (int i = 0; i < n; ++i)
      for (int ch = 0; ch < c; ++ch) {
        const T* p = x.item(i) + ch * hw;
        double s = 0.0;
        for (std::size_t j = 0; j < hw; ++j) s += p[j];
        y.data[static_cast<std::size_t>(i) * c + ch] = static_cast<T>(s / static_cast<double>(hw));
      }
    return y;
  }
  Tensor<T> backward(const Tensor<T>& g) override {
    Tensor<T> dx(in_shape_);
    const int n = in_shape_[0], c = in_shape_[1];
    const std::size_t hw = static_cast<std::size_t>(in_shape_[2]) * in_shape_[3];
    for (int i = 0; i < n; ++i)
      for (int ch = 0; ch < c; ++ch) {
        const T v = g.data[static_cast<std::size_t>(i) * c + ch] / static_cast<T>(hw);
        std::fill_n(dx.item(i) + ch * hw, hw, v);
      }
    return dx;
  }
  std::string kind() const override { return "global_avg_pool"; }

 private:
  std::vector<int> in_shape_;
};

// N x in -> N x out, y = x W^T + b. Weights use the common uniform(+-1/sqrt(in)) init.
template <typename T>
class Linear final : public Clonable<Linear<T>, T> {
 public:
  Linear(int in, int out, std::mt19937_64& gen) : in_(in), out_(out), weight_({out, in}), bias_({out}) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (auto& w : weight_.value) w = static_cast<T>(uniform(gen, -bound, bound));
    for (auto& b : bias_.value) b = static_cast<T>(uniform(gen, -bound, bound));
  }

  Tensor<T> forward(const Tensor<T>& x, Pass pass) override {
    require(x.rank() == 2 && x.dim(1) == in_,
            "linear: expected N x " + std::to_string(in_) + ", got " + shape_string(x.shape));
    const int n = x.dim(0);
    Tensor<T> y({n, out_});
    MatMap<T> ym(y.data.data(), n, out_);
    ym.noalias() = ConstMatMap<T>(x.data.data(), n, in_) * ConstMatMap<T>(weight_.value.data(), out_, in_).transpose();
    for (int i = 0; i < n; ++i)
      for (int o = 0; o < out_; ++o) ym(i, o) += bias_.value[static_cast<std::size_t>(o)];
    if (pass.record) input_ = x;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& g) override {
    require(input_.rank() == 2 && g.dim(0) == input_.dim(0), "linear: backward without recorded forward");
    const int n = g.dim(0);
    ConstMatMap<T> gm(g.data.data(), n, out_);
    MatMap<T>(weight_.grad.data(), out_, in_).noalias() += gm.transpose() * ConstMatMap<T>(input_.data.data(), n, in_);
    for (int i = 0; i < n; ++i)
      for (int o = 0; o < out_; ++o) bias_.grad[static_cast<std::size_t>(o)] += gm(i, o);
    Tensor<T> dx({n, in_});
    MatMap<T>(dx.data.data(), n, in_).noalias() = gm * ConstMatMap<T>(weight_.value.data(), out_, in_);
    return dx;
  }

  void parameters(std::vector<Parameter<T>*>& out) override {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }
  std::string kind() const override { return "linear"; }
  int in_features() const { return in_; }
  int out_features() const { return out_; }
  Parameter<T>& weight() { return weight_; }
  Parameter<T>& bias() { return bias_; }

 private:
  int in_, out_;
  Parameter<T> weight_, bias_;
  Tensor<T> input_;
};

// Fixed per-feature affine map y = (x - shift) * scale. Not trained; the
// values are buffers so they travel with the checkpoint.
template <typename T>
class Standardize final : public Clonable<Standardize<T>, T> {
 public:
  explicit Standardize(int features)
      : shift_(static_cast<std::size_t>(features), T(0)), scale_(static_cast<std::size_t>(features), T(1)) {}

  // Zero mean, unit variance over the rows of `x`; constant features keep scale 1.
  void fit(const std::vector<const T*>& rows) {
    const std::size_t d = shift_.size();
    std::vector<double> sum(d, 0.0), sq(d, 0.0);
    for (const T* r : rows)
      for (std::size_t j = 0; j < d; ++j) sum[j] += r[j];
    const double n = static_cast<double>(rows.size());
    for (std::size_t j = 0; j < d; ++j) sum[j] /= n;
    for (const T* r : rows)
      for (std::size_t j = 0; j < d; ++j) sq[j] += (r[j] - sum[j]) * (r[j] - sum[j]);
    for (std::size_t j = 0; j < d; ++j) {
      const double sd = std::sqrt(sq[j] / n);
      shift_[j] = static_cast<T>(sum[j]);
      scale_[j] = static_cast<T>(sd > 1e-8 ? 1.0 / sd : 1.0);
    }
  }

  Tensor<T> forward(const Tensor<T>& x, Pass) override {
    const std::size_t d = shift_.size();
    require(x.rank() == 2 && static_cast<std::size_t>(x.dim(1)) == d, "standardize: feature count mismatch");
    Tensor<T> y(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = (x.data[i] - shift_[i % d]) * scale_[i % d];
    return y;
  }
  Tensor<T> backward(const Tensor<T>& g) override {
    Tensor<T> dx(g.shape);
    for (std::size_t i = 0; i < g.size(); ++i) dx.data[i] = g.data[i] * scale_[i % scale_.size()];
    return dx;
  }
  void buffers(std::vector<std::vector<T>*>& out) override {
    out.push_back(&shift_);
    out.push_back(&scale_);
  }
  std::string kind() const override { return "standardize"; }

 private:
  std::vector<T> shift_, scale_;
};

// Inverted dropout with its own reproducible stream.
template <typename T>
class Dropout final : public Clonable<Dropout<T>, T> {
 public:
  Dropout(double p, std::uint64_t seed) : p_(p), gen_(splitmix64(seed)) {
    require(p >= 0.0 && p < 1.0, "dropout: p must lie in [0, 1)");
  }
  Tensor<T> forward(const Tensor<T>& x, Pass pass) override {
    if (!pass.training || p_ == 0.0) {
      mask_.assign(x.size(), T(1));
      return x;
    }
    const T scale = static_cast<T>(1.0 / (1.0 - p_));
    mask_.resize(x.size());
    Tensor<T> y(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) {
      mask_[i] = uniform01(gen_) < p_ ? T(0) : scale;
      y.data[i] = x.data[i] * mask_[i];
    }
    return y;
  }
  Tensor<T> backward(const Tensor<T>& g) override {
    require(mask_.size() == g.size(), "dropout: backward without recorded forward");
    Tensor<T> dx(g.shape);
    for (std::size_t i = 0; i < g.size(); ++i) dx.data[i] = g.data[i] * mask_[i];
    return dx;
  }
  std::string kind() const override { return "dropout"; }

 private:
  double p_;
  std::mt19937_64 gen_;
  std::vector<T> mask_;
};

template <typename T>
class Sequential final : public Layer<T> {
 public:
  Sequential() = default;
  Sequential(const Sequential& o) {
    for (const auto& l : o.layers_) layers_.push_back(l->clone());
  }
  Sequential& operator=(const Sequential& o) {
    if (this != &o) {
      Sequential tmp(o);
      layers_.swap(tmp.layers_);
    }
    return *this;
  }
  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;

  template <typename L, typename... Args>
  L& emplace(Args&&... args) {
    auto l = std::make_unique<L>(std::forward<Args>(args)...);
    auto& ref = *l;
    layers_.push_back(std::move(l));
    return ref;
  }
  void push(std::unique_ptr<Layer<T>> l) { layers_.push_back(std::move(l)); }

  Tensor<T> forward(const Tensor<T>& x, Pass pass) override {
    if (layers_.empty()) return x;
    Tensor<T> h = layers_.front()->forward(x, pass);
    for (std::size_t i = 1; i < layers_.size(); ++i) h = layers_[i]->forward(h, pass);
    return h;
  }
  Tensor<T> backward(const Tensor<T>& g) override {
    Tensor<T> d = g;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) d = (*it)->backward(d);
    return d;
  }
  void parameters(std::vector<Parameter<T>*>& out) override {
    for (auto& l : layers_) l->parameters(out);
  }
  void buffers(std::vector<std::vector<T>*>& out) override {
    for (auto& l : layers_) l->buffers(out);
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Sequential>(*this); }
  std::string kind() const override { return "sequential"; }

  std::size_t size() const { return layers_.size(); }
  bool empty() const { return layers_.empty(); }
  Layer<T>& at(std::size_t i) { return *layers_.at(i); }
  Layer<T>& back() { return *layers_.back(); }

 private:
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

// relu(body(x) + shortcut(x)); an empty shortcut is the identity.
template <typename T>
class Residual final : public Clonable<Residual<T>, T> {
 public:
  Residual(Sequential<T> body, Sequential<T> shortcut) : body_(std::move(body)), shortcut_(std::move(shortcut)) {}

  Tensor<T> forward(const Tensor<T>& x, Pass pass) override {
    Tensor<T> a = body_.forward(x, pass);
    const Tensor<T> b = shortcut_.empty() ? x : shortcut_.forward(x, pass);
    require(a.shape == b.shape, "residual: branch shapes differ");
    for (std::size_t i = 0; i < a.size(); ++i) a.data[i] += b.data[i];
    return relu_.forward(a, pass);
  }
  Tensor<T> backward(const Tensor<T>& g) override {
    const Tensor<T> d = relu_.backward(g);
    Tensor<T> dx = body_.backward(d);
    const Tensor<T> ds = shortcut_.empty() ? d : shortcut_.backward(d);
    for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] += ds.data[i];
    return dx;
  }
  void parameters(std::vector<Parameter<T>*>& out) override {
    body_.parameters(out);
    shortcut_.parameters(out);
  }
  void buffers(std::vector<std::vector<T>*>& out) override {
    body_.buffers(out);
    shortcut_.buffers(out);
  }
  std::string kind() const override { return "residual"; }

 private:
  Sequential<T> body_, shortcut_;
  ReLU<T> relu_;
};

// Flat views over a model's trainable parameters.
template <typename T>
std::vector<Parameter<T>*> parameters_of(Layer<T>& model) {
  std::vector<Parameter<T>*> out;
  model.parameters(out);
  return out;
}

template <typename T>
void zero_grad(Layer<T>& model) {
  for (auto* p : parameters_of(model)) std::fill(p->grad.begin(), p->grad.end(), T(0));
}

template <typename T>
std::size_t parameter_count(Layer<T>& model) {
  std::size_t n = 0;
  for (auto* p : parameters_of(model)) n += p->value.size();
  return n;
}

// Parameters followed by buffers, flattened in traversal order.
template <typename T>
std::vector<T> flatten_state(Layer<T>& model) {
  std::vector<T> out;
  for (auto* p : parameters_of(model)) out.insert(out.end(), p->value.begin(), p->value.end());
  std::vector<std::vector<T>*> bufs;
  model.buffers(bufs);
  for (auto* b : bufs) out.insert(out.end(), b->begin(), b->end());
  return out;
}

template <typename T>
void load_state(Layer<T>& model, const std::vector<T>& flat) {
  std::size_t pos = 0;
  auto take = [&](std::vector<T>& dst) {
    if (pos + dst.size() > flat.size()) throw IntegrityError("model state: too few values");
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(pos), dst.size(), dst.begin());
    pos += dst.size();
  };
  for (auto* p : parameters_of(model)) take(p->value);
  std::vector<std::vector<T>*> bufs;
  model.buffers(bufs);
  for (auto* b : bufs) take(*b);
  if (pos != flat.size()) throw IntegrityError("model state: too many values");
}

}  // namespace mocomsi::nn
