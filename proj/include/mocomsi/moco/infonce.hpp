#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mocomsi/core/error.hpp"
#include "mocomsi/nn/tensor.hpp"

namespace mocomsi {

inline constexpr double kUnitNormTolerance = 1e-3;

template <typename T>
void require_unit_rows(const nn::Tensor<T>& m, const char* what) {
  require(m.rank() == 2, std::string(what) + ": expected a matrix");
  const int n = m.dim(0), d = m.dim(1);
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += static_cast<double>(m.item(i)[j]) * m.item(i)[j];
    if (std::abs(std::sqrt(s) - 1.0) > kUnitNormTolerance) {
      throw ContractViolation(std::string(what) + ": row " + std::to_string(i) + " is not unit norm");
    }
  }
}

template <typename T>
struct InfoNceResult {
  double loss = 0.0;
  nn::Tensor<T> grad_q;  // d(loss)/d(q), B x d; keys and queue receive no gradient
};

// Contrastive softmax cross-entropy. Row b's logits are
//   [q_b . k_b, q_b . queue_0, ..., q_b . queue_{K-1}] / tau
// with the positive key at index 0; the result is the batch mean of
// -log softmax_0.
template <typename T>
InfoNceResult<T> infonce_loss_and_grad(const nn::Tensor<T>& q, const nn::Tensor<T>& k_pos, const nn::Tensor<T>& queue,
                                       double tau) {
  if (!(tau > 0.0)) throw DomainError("infonce: temperature must be positive");
  require(q.rank() == 2 && k_pos.shape == q.shape, "infonce: q and k_pos must both be B x d");
  require(queue.rank() == 2 && queue.dim(1) == q.dim(1), "infonce: queue width must equal d");
  require_unit_rows(q, "infonce q");
  require_unit_rows(k_pos, "infonce k_pos");
  require_unit_rows(queue, "infonce queue");

  const int b = q.dim(0), d = q.dim(1), kq = queue.dim(0);
  InfoNceResult<T> out{0.0, nn::Tensor<T>(q.shape)};
  std::vector<double> logits(static_cast<std::size_t>(kq) + 1);
  for (int i = 0; i < b; ++i) {
    const T* qi = q.item(i);
    double l0 = 0.0;
    for (int j = 0; j < d; ++j) l0 += static_cast<double>(qi[j]) * k_pos.item(i)[j];
    logits[0] = l0 / tau;
    for (int n = 0; n < kq; ++n) {
      double s = 0.0;
      const T* row = queue.item(n);
      for (int j = 0; j < d; ++j) s += static_cast<double>(qi[j]) * row[j];
      logits[static_cast<std::size_t>(n) + 1] = s / tau;
    }
    double mx = logits[0];
    for (double l : logits) mx = std::max(mx, l);
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    out.loss += -(logits[0] - mx - std::log(z));

    // d/dq_i = (1/(B tau)) [ (p_0 - 1) k_i + sum_n p_n queue_n ]
    T* g = out.grad_q.item(i);
    const double scale = 1.0 / (static_cast<double>(b) * tau);
    const double p0 = std::exp(logits[0] - mx) / z;
    for (int j = 0; j < d; ++j) g[j] = static_cast<T>(scale * (p0 - 1.0) * k_pos.item(i)[j]);
    for (int n = 0; n < kq; ++n) {
      const double pn = std::exp(logits[static_cast<std::size_t>(n) + 1] - mx) / z;
      const T* row = queue.item(n);
      for (int j = 0; j < d; ++j) g[j] += static_cast<T>(scale * pn * row[j]);
    }
  }
  out.loss /= b;
  return out;
}

template <typename T>
double infonce_loss(const nn::Tensor<T>& q, const nn::Tensor<T>& k_pos, const nn::Tensor<T>& queue, double tau) {
  return infonce_loss_and_grad(q, k_pos, queue, tau).loss;
}

template <typename T>
struct Normalized {
  nn::Tensor<T> unit;
  std::vector<double> norms;
};

// Row-wise L2 normalization, keeping the norms for the backward pass.
template <typename T>
Normalized<T> l2_normalize_rows(const nn::Tensor<T>& z) {
  require(z.rank() == 2, "l2_normalize: expected a matrix");
  Normalized<T> out{z, std::vector<double>(static_cast<std::size_t>(z.dim(0)))};
  const int d = z.dim(1);
  for (int i = 0; i < z.dim(0); ++i) {
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += static_cast<double>(z.item(i)[j]) * z.item(i)[j];
    const double n = std::max(std::sqrt(s), 1e-12);
    out.norms[static_cast<std::size_t>(i)] = n;
    for (int j = 0; j < d; ++j) out.unit.item(i)[j] = static_cast<T>(z.item(i)[j] / n);
  }
  return out;
}

// dz = (dq - q (q . dq)) / |z|
template <typename T>
nn::Tensor<T> l2_normalize_backward(const nn::Tensor<T>& grad_unit, const Normalized<T>& fwd) {
  nn::Tensor<T> dz(grad_unit.shape);
  const int d = grad_unit.dim(1);
  for (int i = 0; i < grad_unit.dim(0); ++i) {
    const T* q = fwd.unit.item(i);
    const T* g = grad_unit.item(i);
    double dot = 0.0;
    for (int j = 0; j < d; ++j) dot += static_cast<double>(q[j]) * g[j];
    for (int j = 0; j < d; ++j)
      dz.item(i)[j] = static_cast<T>((g[j] - q[j] * dot) / fwd.norms[static_cast<std::size_t>(i)]);
  }
  return dz;
}

}  // namespace mocomsi
