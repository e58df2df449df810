// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

#include "molda/error.hpp"

namespace molda {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;
template <class T>
using VectorMap = Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>;
template <class T>
using ConstVectorMap = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>;

/// Dense row-major tensor.
template <class T>
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s, T fill = T(0)) : shape(std::move(s)) {
    data.assign(std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>()), fill);
  }

  std::size_t size() const { return data.size(); }
  std::size_t rows() const { return shape.empty() ? 0 : shape.front(); }
  std::size_t cols() const { return shape.empty() ? 0 : data.size() / shape.front(); }
  void zero() { std::fill(data.begin(), data.end(), T(0)); }

  /// View as a matrix with the leading dimension as rows.
  MatrixMap<T> matrix() { return MatrixMap<T>(data.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols())); }
  ConstMatrixMap<T> matrix() const {
    return ConstMatrixMap<T>(data.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols()));
  }
  VectorMap<T> vector() { return VectorMap<T>(data.data(), static_cast<Eigen::Index>(size())); }
  ConstVectorMap<T> vector() const { return ConstVectorMap<T>(data.data(), static_cast<Eigen::Index>(size())); }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }

  bool operator==(const Tensor&) const = default;
};

/// Named, ordered collection of tensors (parameters, gradients, moments).
template <class T>
class ParamSet {
 public:
  Tensor<T>& add(const std::string& name, std::vector<std::size_t> shape, T fill = T(0)) {
    if (index_.count(name)) fail(ErrorCode::Format, "duplicate parameter " + name);
    index_.emplace(name, tensors_.size());
    names_.push_back(name);
    tensors_.emplace_back(std::move(shape), fill);
    return tensors_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Tensor<T>& operator[](const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) fail(ErrorCode::Format, "no parameter " + name);
    return tensors_[it->second];
  }
  const Tensor<T>& operator[](const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) fail(ErrorCode::Format, "no parameter " + name);
    return tensors_[it->second];
  }

  std::size_t count() const { return tensors_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Tensor<T>& at(std::size_t i) { return tensors_[i]; }
  const Tensor<T>& at(std::size_t i) const { return tensors_[i]; }
  const std::vector<std::string>& names() const { return names_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  /// Same names and shapes, zero-filled.
  ParamSet zeros_like() const {
    ParamSet out;
    for (std::size_t i = 0; i < tensors_.size(); ++i) out.add(names_[i], tensors_[i].shape);
    return out;
  }

  void zero() {
    for (auto& t : tensors_) t.zero();
  }

  /// Removes every tensor whose name starts with `prefix`.
  void erase_prefix(const std::string& prefix) {
    ParamSet kept;
    for (std::size_t i = 0; i < tensors_.size(); ++i)
      if (names_[i].rfind(prefix, 0) != 0) kept.add(names_[i], tensors_[i].shape) = tensors_[i];
    *this = std::move(kept);
  }

  template <class U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (std::size_t i = 0; i < tensors_.size(); ++i) out.add(names_[i], tensors_[i].shape) = tensors_[i].template cast<U>();
    return out;
  }

  bool all_finite() const {
    for (const auto& t : tensors_)
      for (T v : t.data)
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  bool operator==(const ParamSet& o) const { return names_ == o.names_ && tensors_ == o.tensors_; }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Euclidean distance between two parameter sets with identical layout.
template <class T>
double l2_distance(const ParamSet<T>& a, const ParamSet<T>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.count(); ++i) {
    const auto& x = a.at(i).data;
    const auto& y = b[a.name(i)].data;
    for (std::size_t k = 0; k < x.size(); ++k) {
      const double d = static_cast<double>(x[k]) - static_cast<double>(y[k]);
      s += d * d;
    }
  }
  return std::sqrt(s);
}

}  // namespace molda
