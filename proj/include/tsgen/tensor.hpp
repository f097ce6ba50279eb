#pragma once

#include <cmath>
#include <cstddef>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tsgen/common.hpp"
#include "tsgen/rng.hpp"

namespace tsgen {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// Dense row-major tensor, last axis fastest. float for production paths,
// double for gradient-check oracles.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;

  explicit Tensor(Shape s) : shape(std::move(s)) {
    validate_shape();
    data.assign(shape_numel(shape), T(0));
  }

  Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    validate_shape();
    if (data.size() != shape_numel(shape))
      throw ShapeError("tensor data size " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  std::size_t last_dim() const { return shape.empty() ? 1 : shape.back(); }
  std::size_t rows() const { return shape.empty() ? 1 : numel() / shape.back(); }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  T& at(std::size_t i) { return data[i]; }
  T at(std::size_t i) const { return data[i]; }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

  static Tensor full(Shape s, T v) {
    Tensor t(std::move(s));
    t.fill(v);
    return t;
  }

  static Tensor randn(Shape s, Rng& rng, T stddev = T(1)) {
    Tensor t(std::move(s));
    for (auto& v : t.data) v = static_cast<T>(rng.normal()) * stddev;
    return t;
  }

  static Tensor rand_uniform(Shape s, Rng& rng, T lo, T hi) {
    Tensor t(std::move(s));
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

 private:
  void validate_shape() const {
    for (std::size_t d : shape)
      if (d == 0) throw ShapeError("tensor dimension must be >= 1, got shape " + shape_str(shape));
  }
};

template <typename T>
bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape == b.shape;
}

}  // namespace tsgen
