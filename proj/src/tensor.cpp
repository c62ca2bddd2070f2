#include "resfcn/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace resfcn {

template <typename T>
TensorT<T> elementwise_add(const TensorT<T>& a, const TensorT<T>& b) {
  require(a.same_shape(b), "elementwise_add: shape mismatch");
  TensorT<T> out(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  check_finite(out, "elementwise_add");
  return out;
}

template <typename T>
void add_inplace(TensorT<T>& a, const TensorT<T>& b) {
  require(a.same_shape(b), "add_inplace: shape mismatch");
  T* pa = a.data();
  const T* pb = b.data();
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) pa[i] += pb[i];
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T factor) {
  require(std::isfinite(static_cast<double>(factor)), "scale: factor must be finite");
  TensorT<T> out(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) po[i] = factor * pa[i];
  return out;
}

namespace {

// Normalizes an axis list: sorted, unique, all within rank.
std::vector<int> checked_axes(const std::vector<int>& axes, int rank) {
  require(!axes.empty(), "reduction needs at least one axis");
  std::vector<int> sorted = axes;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    require(sorted[i] >= 0 && sorted[i] < rank, "reduction axis out of range");
    if (i > 0) require(sorted[i] != sorted[i - 1], "duplicate reduction axis");
  }
  return sorted;
}

std::vector<int> reduced_shape(const std::vector<int>& shape, const std::vector<int>& axes) {
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(shape.size()); ++i) {
    if (std::find(axes.begin(), axes.end(), i) == axes.end())
      out.push_back(shape[static_cast<std::size_t>(i)]);
  }
  if (out.empty()) out.push_back(1);
  return out;
}

// Iterates the input in row-major order, mapping each element to its
// output slot. Accumulation order per output element is the fixed
// row-major scan of the input.
template <typename T, typename Fn>
void for_each_reduced(const TensorT<T>& a, const std::vector<int>& axes, Fn&& fn) {
  const auto& shape = a.shape();
  const int rank = a.rank();
  std::vector<bool> is_reduced(static_cast<std::size_t>(rank), false);
  for (int ax : axes) is_reduced[static_cast<std::size_t>(ax)] = true;

  std::vector<std::size_t> out_stride(static_cast<std::size_t>(rank), 0);
  std::size_t stride = 1;
  for (int i = rank - 1; i >= 0; --i) {
    if (!is_reduced[static_cast<std::size_t>(i)]) {
      out_stride[static_cast<std::size_t>(i)] = stride;
      stride *= static_cast<std::size_t>(shape[static_cast<std::size_t>(i)]);
    }
  }

  std::vector<int> idx(static_cast<std::size_t>(rank), 0);
  const std::size_t n = a.size();
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t out_index = 0;
    for (int i = 0; i < rank; ++i)
      out_index += out_stride[static_cast<std::size_t>(i)] *
                   static_cast<std::size_t>(idx[static_cast<std::size_t>(i)]);
    fn(flat, out_index);
    for (int i = rank - 1; i >= 0; --i) {
      if (++idx[static_cast<std::size_t>(i)] < shape[static_cast<std::size_t>(i)]) break;
      idx[static_cast<std::size_t>(i)] = 0;
    }
  }
}

}  // namespace

template <typename T>
TensorT<T> reduce_sum(const TensorT<T>& a, const std::vector<int>& axes) {
  const auto sorted = checked_axes(axes, a.rank());
  TensorT<T> out(reduced_shape(a.shape(), sorted));
  const T* pa = a.data();
  T* po = out.data();
  for_each_reduced(a, sorted, [&](std::size_t in_i, std::size_t out_i) { po[out_i] += pa[in_i]; });
  check_finite(out, "reduce_sum");
  return out;
}

template <typename T>
T reduce_sum_all(const TensorT<T>& a) {
  T total = T(0);
  const T* pa = a.data();
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) total += pa[i];
  return total;
}

template <typename T>
std::pair<TensorT<T>, TensorT<T>> mean_and_var(const TensorT<T>& a,
                                               const std::vector<int>& axes) {
  const auto sorted = checked_axes(axes, a.rank());
  std::size_t reduced_count = 1;
  for (int ax : sorted)
    reduced_count *= static_cast<std::size_t>(a.dim(ax));
  require(reduced_count >= 1, "mean_and_var: empty reduction");

  TensorT<T> mean(reduced_shape(a.shape(), sorted));
  TensorT<T> var(mean.shape());
  const T* pa = a.data();
  T* pm = mean.data();
  T* pv = var.data();

  for_each_reduced(a, sorted, [&](std::size_t in_i, std::size_t out_i) { pm[out_i] += pa[in_i]; });
  const T inv = T(1) / static_cast<T>(reduced_count);
  for (std::size_t i = 0; i < mean.size(); ++i) pm[i] *= inv;

  // Second pass on centered values keeps the variance non-negative.
  for_each_reduced(a, sorted, [&](std::size_t in_i, std::size_t out_i) {
    const T d = pa[in_i] - pm[out_i];
    pv[out_i] += d * d;
  });
  for (std::size_t i = 0; i < var.size(); ++i) pv[i] *= inv;

  check_finite(mean, "mean_and_var mean");
  check_finite(var, "mean_and_var var");
  return {std::move(mean), std::move(var)};
}

template <typename T>
TensorT<T> permute(const TensorT<T>& a, const std::vector<int>& order) {
  const int rank = a.rank();
  require(static_cast<int>(order.size()) == rank, "permute: order rank mismatch");
  std::vector<bool> seen(static_cast<std::size_t>(rank), false);
  for (int ax : order) {
    require(ax >= 0 && ax < rank && !seen[static_cast<std::size_t>(ax)],
            "permute: order must be a permutation of the axes");
    seen[static_cast<std::size_t>(ax)] = true;
  }

  std::vector<int> out_shape(static_cast<std::size_t>(rank));
  for (int i = 0; i < rank; ++i)
    out_shape[static_cast<std::size_t>(i)] = a.dim(order[static_cast<std::size_t>(i)]);
  TensorT<T> out(out_shape);

  std::vector<std::size_t> in_stride(static_cast<std::size_t>(rank), 1);
  for (int i = rank - 2; i >= 0; --i)
    in_stride[static_cast<std::size_t>(i)] =
        in_stride[static_cast<std::size_t>(i + 1)] * static_cast<std::size_t>(a.dim(i + 1));

  std::vector<int> idx(static_cast<std::size_t>(rank), 0);
  T* po = out.data();
  const T* pa = a.data();
  const std::size_t n = a.size();
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t src = 0;
    for (int i = 0; i < rank; ++i)
      src += in_stride[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] *
             static_cast<std::size_t>(idx[static_cast<std::size_t>(i)]);
    po[flat] = pa[src];
    for (int i = rank - 1; i >= 0; --i) {
      if (++idx[static_cast<std::size_t>(i)] < out_shape[static_cast<std::size_t>(i)]) break;
      idx[static_cast<std::size_t>(i)] = 0;
    }
  }
  return out;
}

template <typename T>
bool all_finite(const TensorT<T>& a) {
  const T* pa = a.data();
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(static_cast<double>(pa[i]))) return false;
  return true;
}

template <typename T>
void check_finite([[maybe_unused]] const TensorT<T>& a, [[maybe_unused]] const char* what) {
#ifdef RESFCN_CHECKS
  if (!all_finite(a)) throw std::runtime_error(std::string(what) + ": non-finite values");
#endif
}

template class TensorT<float>;
template class TensorT<double>;

#define RESFCN_INSTANTIATE(T)                                                        \
  template TensorT<T> elementwise_add(const TensorT<T>&, const TensorT<T>&);         \
  template void add_inplace(TensorT<T>&, const TensorT<T>&);                         \
  template TensorT<T> scale(const TensorT<T>&, T);                                   \
  template TensorT<T> reduce_sum(const TensorT<T>&, const std::vector<int>&);        \
  template T reduce_sum_all(const TensorT<T>&);                                      \
  template std::pair<TensorT<T>, TensorT<T>> mean_and_var(const TensorT<T>&,         \
                                                          const std::vector<int>&);  \
  template TensorT<T> permute(const TensorT<T>&, const std::vector<int>&);           \
  template bool all_finite(const TensorT<T>&);                                       \
  template void check_finite(const TensorT<T>&, const char*);

RESFCN_INSTANTIATE(float)
RESFCN_INSTANTIATE(double)
#undef RESFCN_INSTANTIATE

}  // namespace resfcn
