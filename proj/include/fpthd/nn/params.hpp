#pragma once

#include <Eigen/Core>
#include <Eigen/StdVector>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fpthd/common.hpp"
#include "fpthd/random.hpp"

namespace fpthd::nn {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
/// 64-byte aligned so vectorized reductions over parameter maps sum in the
/// same order wherever the store lands on the heap.
template <class T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;
template <class T>
using MatMap = Eigen::Map<Mat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const Mat<T>>;

/// Flat storage for every trainable tensor of a model, with a parallel
/// gradient buffer. Layers hold entry ids; optimizers and checkpoints work on
/// the flat arrays.
template <class T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    std::vector<int> shape;
    std::size_t offset = 0;
    std::size_t size = 0;
    bool decay = true;  // false for norms, biases and learned tokens
  };

  int add(std::string name, std::vector<int> shape, bool decay) {
    std::size_t size = 1;
    for (int d : shape) size *= static_cast<std::size_t>(d);
    entries_.push_back({std::move(name), std::move(shape), values_.size(), size, decay});
    values_.resize(values_.size() + size, T(0));
    grads_.resize(values_.size(), T(0));
    return static_cast<int>(entries_.size() - 1);
  }

  const std::vector<Entry>& entries() const { return entries_; }
  const Entry& entry(int id) const { return entries_[static_cast<std::size_t>(id)]; }
  std::size_t size() const { return values_.size(); }

  AlignedVector<T>& values() { return values_; }
  const AlignedVector<T>& values() const { return values_; }
  AlignedVector<T>& grads() { return grads_; }
  const AlignedVector<T>& grads() const { return grads_; }

  std::span<T> value(int id) { return {values_.data() + entry(id).offset, entry(id).size}; }
  std::span<const T> value(int id) const { return {values_.data() + entry(id).offset, entry(id).size}; }
  std::span<T> grad(int id) { return {grads_.data() + entry(id).offset, entry(id).size}; }

  MatMap<T> value_mat(int id, int rows, int cols) { return MatMap<T>(value(id).data(), rows, cols); }
  ConstMatMap<T> value_mat(int id, int rows, int cols) const {
    return ConstMatMap<T>(value(id).data(), rows, cols);
  }
  MatMap<T> grad_mat(int id, int rows, int cols) { return MatMap<T>(grad(id).data(), rows, cols); }

  void zero_grad() { std::fill(grads_.begin(), grads_.end(), T(0)); }

  /// Gaussian init with the given standard deviation.
  void init_normal(int id, double stddev, Rng& rng) {
    for (auto& v : value(id)) v = static_cast<T>(stddev * rng.normal());
  }
  void fill(int id, T v) {
    for (auto& x : value(id)) x = v;
  }

  template <class U>
  void copy_values_from(const ParamStore<U>& other) {
    if (other.size() != size()) throw Error("parameter layout mismatch");
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] = static_cast<T>(other.values()[i]);
  }

 private:
  std::vector<Entry> entries_;
  AlignedVector<T> values_;
  AlignedVector<T> grads_;
};

}  // namespace fpthd::nn
