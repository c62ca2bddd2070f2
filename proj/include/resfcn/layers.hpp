#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "resfcn/tensor.hpp"

namespace resfcn {

// Convolution parameters. weights layout:
//   conv2d:   (out_channels S, in_channels R, kh, kw)
//   deconv2d: (in_channels,  out_channels,    kh, kw)
// pad_h / pad_w of -1 select "same" padding: the output spatial size is
// ceil(input / stride) and the total padding splits with the extra pixel
// at the trailing edge.
template <typename T>
struct ConvParamsT {
  TensorT<T> weights;
  TensorT<T> bias;
  int stride = 1;
  int dilation = 1;
  int pad_h = -1;
  int pad_w = -1;
};

using ConvParams = ConvParamsT<float>;

template <typename T>
struct ConvGradsT {
  TensorT<T> x;
  TensorT<T> weights;
  TensorT<T> bias;
};

struct ConvGeometry {
  int out_h = 0, out_w = 0;
  int pad_h = 0, pad_w = 0;  // leading-edge padding
};

// Effective kernel extent (k-1)*dilation + 1.
inline int effective_extent(int k, int dilation) { return (k - 1) * dilation + 1; }

ConvGeometry conv2d_geometry(int in_h, int in_w, int kh, int kw, int stride,
                             int dilation, int pad_h, int pad_w);

// O[b,s,i,j] = sum_r sum_{u,v} x[b,r,i*stride+d*u-pad, j*stride+d*v-pad] * W[s,r,u,v] + bias[s]
// with out-of-bounds input read as zero.
template <typename T>
TensorT<T> conv2d_forward(const TensorT<T>& x, const ConvParamsT<T>& p);

template <typename T>
ConvGradsT<T> conv2d_backward(const TensorT<T>& x, const ConvParamsT<T>& p,
                              const TensorT<T>& grad_out);

// Transposed convolution, the exact adjoint of the stride-2 same-padded
// conv2d with identical kernels. Output spatial size doubles.
template <typename T>
TensorT<T> deconv2d_forward(const TensorT<T>& x, const ConvParamsT<T>& p);

template <typename T>
ConvGradsT<T> deconv2d_backward(const TensorT<T>& x, const ConvParamsT<T>& p,
                                const TensorT<T>& grad_out);

// 2x2 max pooling with stride 2; the index map records each window's
// winning flat input offset for the backward routing. Ties go to the
// first element in row-major window order.
template <typename T>
std::pair<TensorT<T>, std::vector<std::uint32_t>> maxpool2x2_forward(const TensorT<T>& x);

template <typename T>
TensorT<T> maxpool2x2_backward(const std::vector<std::uint32_t>& index_map,
                               const std::vector<int>& x_shape,
                               const TensorT<T>& grad_out);

template <typename T>
struct BatchNormParamsT {
  TensorT<T> gamma;
  TensorT<T> beta;
  TensorT<T> running_mean;
  TensorT<T> running_var;
  T momentum = T(0.9);
  T epsilon = T(1e-5);
};

using BatchNormParams = BatchNormParamsT<float>;

template <typename T>
struct BatchNormGradsT {
  TensorT<T> x;
  TensorT<T> gamma;
  TensorT<T> beta;
};

enum class BnMode { train, infer };

// Train mode normalizes with batch statistics over (batch, height, width)
// per channel and folds them into the running statistics:
//   running = momentum * running + (1 - momentum) * batch.
// Infer mode normalizes with the running statistics.
template <typename T>
TensorT<T> batchnorm_forward(const TensorT<T>& x, BatchNormParamsT<T>& p, BnMode mode);

// Gradients of the train-mode forward; batch statistics are recomputed
// from x.
template <typename T>
BatchNormGradsT<T> batchnorm_backward(const TensorT<T>& x, const BatchNormParamsT<T>& p,
                                      const TensorT<T>& grad_out);

template <typename T>
TensorT<T> relu(const TensorT<T>& x);

// Subgradient 0 at x == 0.
template <typename T>
TensorT<T> relu_backward(const TensorT<T>& x, const TensorT<T>& grad_out);

// Logistic sigmoid, output clamped to the open interval (0, 1).
template <typename T>
TensorT<T> sigmoid(const TensorT<T>& x);

// Takes the forward output: grad_x = out * (1 - out) * grad_out.
template <typename T>
TensorT<T> sigmoid_backward(const TensorT<T>& out, const TensorT<T>& grad_out);

}  // namespace resfcn
