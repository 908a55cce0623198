#pragma once

#include <cmath>
#include <vector>

#include "mocomsi/core/error.hpp"
#include "mocomsi/datasets/label.hpp"
#include "mocomsi/nn/layers.hpp"

namespace mocomsi::nn {

// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
//   v <- mu * v + (g + wd * w);  w <- w - lr * v
template <typename T>
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(const std::vector<Parameter<T>*>& params, double lr) {
    if (velocity_.empty()) {
      for (auto* p : params) velocity_.emplace_back(p->value.size(), T(0));
    }
    require(velocity_.size() == params.size(), "sgd: parameter list changed between steps");
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = *params[i];
      auto& v = velocity_[i];
      for (std::size_t j = 0; j < p.value.size(); ++j) {
        const T g = p.grad[j] + static_cast<T>(weight_decay_) * p.value[j];
        v[j] = static_cast<T>(momentum_) * v[j] + g;
        p.value[j] -= static_cast<T>(lr) * v[j];
      }
    }
  }

 private:
  double momentum_, weight_decay_;
  std::vector<std::vector<T>> velocity_;
};

template <typename T>
struct LossAndGrad {
  double loss = 0.0;
  Tensor<T> grad;
};

// Mean softmax cross-entropy over N x C logits.
template <typename T>
LossAndGrad<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets) {
  require(logits.rank() == 2 && static_cast<std::size_t>(logits.dim(0)) == targets.size(),
          "cross entropy: logits/targets mismatch");
  const int n = logits.dim(0), c = logits.dim(1);
  LossAndGrad<T> out{0.0, Tensor<T>(logits.shape)};
  for (int i = 0; i < n; ++i) {
    const T* row = logits.item(i);
    double mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max<double>(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const int t = targets[static_cast<std::size_t>(i)];
    require(t >= 0 && t < c, "cross entropy: target out of range");
    out.loss += -(row[t] - mx - std::log(z));
    for (int j = 0; j < c; ++j) {
      const double p = std::exp(row[j] - mx) / z;
      out.grad.data[static_cast<std::size_t>(i) * c + j] = static_cast<T>((p - (j == t ? 1.0 : 0.0)) / n);
    }
  }
  out.loss /= n;
  return out;
}

// Positive-class probability of a 2-way logit row.
template <typename T>
double positive_probability(const T* logits2) {
  const double d = static_cast<double>(logits2[1]) - static_cast<double>(logits2[0]);
  return 1.0 / (1.0 + std::exp(-d));
}

}  // namespace mocomsi::nn
