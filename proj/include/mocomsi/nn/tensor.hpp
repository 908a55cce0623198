#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "mocomsi/core/error.hpp"

namespace mocomsi::nn {

// Dense row-major tensor. Images are NCHW (or CHW for a single view), feature
// batches are N x D.
template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, T fill = T(0)) : shape(std::move(s)), data(count(shape), fill) {}
  Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    require(data.size() == count(shape), "tensor: data size does not match shape");
  }

  static std::size_t count(const std::vector<int>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1},
                           [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
  }

  std::size_t size() const noexcept { return data.size(); }
  int rank() const noexcept { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }
  // Number of elements per leading-axis item.
  std::size_t stride0() const { return shape.empty() ? 0 : data.size() / static_cast<std::size_t>(shape[0]); }

  T* item(int n) { return data.data() + static_cast<std::size_t>(n) * stride0(); }
  const T* item(int n) const { return data.data() + static_cast<std::size_t>(n) * stride0(); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

inline std::string shape_string(const std::vector<int>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

// Stacks equally shaped tensors along a new leading axis.
template <typename T>
Tensor<T> stack(const std::vector<Tensor<T>>& items) {
  require(!items.empty(), "stack: empty input");
  std::vector<int> shape{static_cast<int>(items.size())};
  shape.insert(shape.end(), items[0].shape.begin(), items[0].shape.end());
  Tensor<T> out(shape);
  const std::size_t n = items[0].size();
  for (std::size_t i = 0; i < items.size(); ++i) {
    require(items[i].shape == items[0].shape, "stack: shape mismatch");
    std::copy(items[i].data.begin(), items[i].data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  return out;
}

}  // namespace mocomsi::nn
