#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace resfcn {

[[noreturn]] inline void fail(const std::string& message) {
  throw std::invalid_argument(message);
}

inline void require(bool condition, const std::string& message) {
  if (!condition) fail(message);
}

// Dense row-major tensor of rank 1..4 (batch, channel, height, width).
// Values are float for training/inference; the double instantiation is
// used by the finite-difference gradient checks.
template <typename T>
class TensorT {
public:
  TensorT() = default;

  explicit TensorT(std::vector<int> shape) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(element_count(shape_), T(0));
  }

  TensorT(std::vector<int> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    require(data_.size() == element_count(shape_),
            "tensor data length does not match shape");
  }

  static TensorT zeros(std::vector<int> shape) { return TensorT(std::move(shape)); }

  static TensorT full(std::vector<int> shape, T value) {
    TensorT t(std::move(shape));
    for (auto& x : t.data_) x = value;
    return t;
  }

  static TensorT ones(std::vector<int> shape) { return full(std::move(shape), T(1)); }

  int rank() const { return static_cast<int>(shape_.size()); }
  const std::vector<int>& shape() const { return shape_; }
  int dim(int axis) const { return shape_[static_cast<std::size_t>(axis)]; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(int i) { return data_[offset({i})]; }
  T& at(int i, int j) { return data_[offset({i, j})]; }
  T& at(int i, int j, int k) { return data_[offset({i, j, k})]; }
  T& at(int i, int j, int k, int l) { return data_[offset({i, j, k, l})]; }
  const T& at(int i) const { return data_[offset({i})]; }
  const T& at(int i, int j) const { return data_[offset({i, j})]; }
  const T& at(int i, int j, int k) const { return data_[offset({i, j, k})]; }
  const T& at(int i, int j, int k, int l) const { return data_[offset({i, j, k, l})]; }

  bool same_shape(const TensorT& other) const { return shape_ == other.shape_; }

  // Reinterpret the same buffer under a new shape with equal element count.
  TensorT reshaped(std::vector<int> shape) const {
    require(element_count(shape) == data_.size(), "reshape changes element count");
    return TensorT(std::move(shape), data_);
  }

  static std::size_t element_count(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
  }

private:
  void validate_shape() const {
    require(!shape_.empty() && shape_.size() <= 4, "tensor rank must be 1..4");
    for (int d : shape_)
      require(d >= 1, "tensor extents must be positive");
  }

  std::size_t offset(std::initializer_list<int> idx) const {
    require(static_cast<int>(idx.size()) == rank(), "index rank mismatch");
    std::size_t off = 0;
    int axis = 0;
    for (int i : idx) {
      off = off * static_cast<std::size_t>(shape_[static_cast<std::size_t>(axis)]) +
            static_cast<std::size_t>(i);
      ++axis;
    }
    return off;
  }

  std::vector<int> shape_;
  std::vector<T> data_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

// --- elementwise / reduction arithmetic -----------------------------------

template <typename T>
TensorT<T> elementwise_add(const TensorT<T>& a, const TensorT<T>& b);

template <typename T>
void add_inplace(TensorT<T>& a, const TensorT<T>& b);

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T factor);

// Sum over the named axes; reduced axes are removed from the shape.
// Reducing every axis yields a rank-1 tensor of one element.
template <typename T>
TensorT<T> reduce_sum(const TensorT<T>& a, const std::vector<int>& axes);

template <typename T>
T reduce_sum_all(const TensorT<T>& a);

// Population mean and variance over the named axes.
template <typename T>
std::pair<TensorT<T>, TensorT<T>> mean_and_var(const TensorT<T>& a,
                                               const std::vector<int>& axes);

// Reorder axes; order is a permutation of 0..rank-1.
template <typename T>
TensorT<T> permute(const TensorT<T>& a, const std::vector<int>& order);

template <typename T>
bool all_finite(const TensorT<T>& a);

// Output sanity check, active in checked builds only (RESFCN_CHECKS).
template <typename T>
void check_finite(const TensorT<T>& a, const char* what);

extern template class TensorT<float>;
extern template class TensorT<double>;

}  // namespace resfcn
