#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace groundseg {

/// Thrown when an operation receives input that violates its contract.
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major array. The last dimension is contiguous. Storage is
/// aligned to Eigen's packet size so vectorised reductions split the same way
/// on every run, which keeps training bitwise reproducible.
template <typename T>
struct Tensor {
  using Storage = std::vector<T, Eigen::aligned_allocator<T>>;
  std::vector<int> shape;
  Storage data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, T fill = T(0)) : shape(std::move(s)) {
    data.assign(numel_of(shape), fill);
  }
  Tensor(std::vector<int> s, Storage values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != numel_of(shape)) throw InvalidInput("tensor data does not match shape");
  }
  Tensor(std::vector<int> s, const std::vector<T>& values) : shape(std::move(s)), data(values.begin(), values.end()) {
    if (data.size() != numel_of(shape)) throw InvalidInput("tensor data does not match shape");
  }

  static std::size_t numel_of(const std::vector<int>& s) {
    std::size_t n = 1;
    for (int d : s) {
      if (d < 0) throw InvalidInput("negative tensor dimension");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  std::size_t size() const { return data.size(); }
  bool empty() const { return shape.empty(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  T& at(int i, int j) { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
  const T& at(int i, int j) const { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
  T& at(int c, int i, int j) {
    return data[(static_cast<std::size_t>(c) * shape[1] + i) * shape[2] + j];
  }
  const T& at(int c, int i, int j) const {
    return data[(static_cast<std::size_t>(c) * shape[1] + i) * shape[2] + j];
  }

  std::span<T> span() { return data; }
  std::span<const T> span() const { return data; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape && a.data == b.data;
  }
};

inline std::string shape_string(const std::vector<int>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

/// A named trainable array with its gradient accumulator.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, std::vector<int> shape)
      : name(std::move(n)), value(shape), grad(std::move(shape)) {}

  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), T(0)); }
};

}  // namespace groundseg
