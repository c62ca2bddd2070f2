#pragma once

#include <optional>
#include <string>
#include <vector>

#include "resfcn/layers.hpp"
#include "resfcn/rng.hpp"
#include "resfcn/tensor.hpp"

namespace resfcn {

// A learned convolution or batch norm: the parameter tensors plus their
// gradient accumulators. Backward passes add into the grad slots.
template <typename T>
struct LearnedConvT {
  ConvParamsT<T> p;
  TensorT<T> grad_weights;
  TensorT<T> grad_bias;
};

template <typename T>
struct LearnedBnT {
  BatchNormParamsT<T> p;
  TensorT<T> grad_gamma;
  TensorT<T> grad_beta;
};

// He-style initialization: zero-mean normals scaled by sqrt(2 / fan_in)
// with fan_in = in_channels * kh * kw; biases start at zero.
template <typename T>
LearnedConvT<T> make_conv(int out_c, int in_c, int kh, int kw, int stride, int dilation,
                          Rng& rng);

// Transposed-conv weights, layout (in, out, kh, kw), stride fixed at 2.
template <typename T>
LearnedConvT<T> make_deconv(int in_c, int out_c, int kh, int kw, Rng& rng);

template <typename T>
LearnedBnT<T> make_bn(int channels);

template <typename T>
struct ConvBnT {
  LearnedConvT<T> conv;
  LearnedBnT<T> bn;
};

// --- atrous entry stack -----------------------------------------------------

// Three [conv 3x3 -> batchnorm -> relu] stages with dilation rates 1, 2, 4.
template <typename T>
struct AtrousStackParamsT {
  std::vector<ConvBnT<T>> stages;  // exactly 3
};

template <typename T>
struct AtrousStackCacheT {
  TensorT<T> x;
  std::vector<TensorT<T>> conv_out;
  std::vector<TensorT<T>> bn_out;
  std::vector<TensorT<T>> relu_out;
};

template <typename T>
AtrousStackParamsT<T> make_atrous_stack(int in_channels, int filters, Rng& rng);

template <typename T>
TensorT<T> atrous_stack_forward(const TensorT<T>& x, AtrousStackParamsT<T>& params,
                                BnMode mode, AtrousStackCacheT<T>* cache = nullptr);

template <typename T>
TensorT<T> atrous_stack_backward(AtrousStackParamsT<T>& params,
                                 const AtrousStackCacheT<T>& cache,
                                 const TensorT<T>& grad_out);

// --- bottleneck block -------------------------------------------------------

struct BottleneckSpec {
  int n = 0;               // base filter count; the block emits 4n channels
  bool downsample = false; // stride 2 on the 3x3 middle conv
  int in_channels = 0;
};

// Main path 1x1(n) -> 3x3(n) -> 1x1(4n), each conv followed by batch
// norm; the skip is the identity when shapes already match, otherwise a
// 1x1 projection with matching stride. Output = relu(main + skip).
template <typename T>
struct BottleneckParamsT {
  BottleneckSpec spec;
  ConvBnT<T> reduce;
  ConvBnT<T> spatial;
  ConvBnT<T> expand;
  std::optional<ConvBnT<T>> projection;
};

template <typename T>
struct BottleneckCacheT {
  TensorT<T> x;
  TensorT<T> c1, n1, r1;
  TensorT<T> c2, n2, r2;
  TensorT<T> c3, n3;
  TensorT<T> proj_conv, proj_bn;
  TensorT<T> sum;
};

template <typename T>
BottleneckParamsT<T> make_bottleneck(const BottleneckSpec& spec, Rng& rng);

template <typename T>
TensorT<T> bottleneck_forward(const TensorT<T>& x, BottleneckParamsT<T>& params,
                              BnMode mode, BottleneckCacheT<T>* cache = nullptr);

template <typename T>
TensorT<T> bottleneck_backward(BottleneckParamsT<T>& params,
                               const BottleneckCacheT<T>& cache,
                               const TensorT<T>& grad_out);

// --- global convolutional network block --------------------------------------

struct GcnSpec {
  int k = 9;  // odd, >= 3 (k = 1 degenerates to two pointwise convs)
  int out_channels = 21;
};

// Two separable branches, (1xk then kx1) and (kx1 then 1xk), summed.
// No activation or normalization inside.
template <typename T>
struct GcnParamsT {
  GcnSpec spec;
  LearnedConvT<T> a1, a2;  // 1xk then kx1
  LearnedConvT<T> b1, b2;  // kx1 then 1xk
};

template <typename T>
struct GcnCacheT {
  TensorT<T> x;
  TensorT<T> a1_out, b1_out;
};

template <typename T>
GcnParamsT<T> make_gcn(const GcnSpec& spec, int in_channels, Rng& rng);

template <typename T>
TensorT<T> gcn_forward(const TensorT<T>& x, GcnParamsT<T>& params, GcnCacheT<T>* cache = nullptr);

template <typename T>
TensorT<T> gcn_backward(GcnParamsT<T>& params, const GcnCacheT<T>& cache,
                        const TensorT<T>& grad_out);

template <typename T>
std::size_t gcn_parameter_count(const GcnParamsT<T>& params);

// --- boundary refinement block ----------------------------------------------

// out = x + conv3x3(relu(conv3x3(x))); channel count preserved.
template <typename T>
struct BrParamsT {
  LearnedConvT<T> conv1, conv2;
};

template <typename T>
struct BrCacheT {
  TensorT<T> x;
  TensorT<T> c1, r1;
};

template <typename T>
BrParamsT<T> make_br(int channels, Rng& rng);

template <typename T>
TensorT<T> br_forward(const TensorT<T>& x, BrParamsT<T>& params, BrCacheT<T>* cache = nullptr);

template <typename T>
TensorT<T> br_backward(BrParamsT<T>& params, const BrCacheT<T>& cache,
                       const TensorT<T>& grad_out);

// --- residual stages ---------------------------------------------------------

// Stage depths 3, 4, 6, 3; stages 1-3 downsample in their first block,
// stage 4 keeps its spatial size.
int res_stage_depth(int stage_index);
bool res_stage_downsamples(int stage_index);

template <typename T>
struct ResStageParamsT {
  int stage_index = 0;
  std::vector<BottleneckParamsT<T>> blocks;
};

template <typename T>
struct ResStageCacheT {
  std::vector<BottleneckCacheT<T>> blocks;
};

template <typename T>
ResStageParamsT<T> make_res_stage(int stage_index, int in_channels, int base_n, Rng& rng);

template <typename T>
TensorT<T> res_stage_forward(const TensorT<T>& x, ResStageParamsT<T>& params, BnMode mode,
                             ResStageCacheT<T>* cache = nullptr);

template <typename T>
TensorT<T> res_stage_backward(ResStageParamsT<T>& params, const ResStageCacheT<T>& cache,
                              const TensorT<T>& grad_out);

}  // namespace resfcn
