#include "resfcn/blocks.hpp"

#include <cmath>

namespace resfcn {

template <typename T>
LearnedConvT<T> make_conv(int out_c, int in_c, int kh, int kw, int stride, int dilation,
                          Rng& rng) {
  LearnedConvT<T> conv;
  conv.p.weights = TensorT<T>({out_c, in_c, kh, kw});
  const double stddev = std::sqrt(2.0 / (static_cast<double>(in_c) * kh * kw));
  for (std::size_t i = 0; i < conv.p.weights.size(); ++i)
    conv.p.weights[i] = static_cast<T>(rng.normal() * stddev);
  conv.p.bias = TensorT<T>::zeros({out_c});
  conv.p.stride = stride;
  conv.p.dilation = dilation;
  conv.grad_weights = TensorT<T>::zeros(conv.p.weights.shape());
  conv.grad_bias = TensorT<T>::zeros({out_c});
  return conv;
}

template <typename T>
LearnedConvT<T> make_deconv(int in_c, int out_c, int kh, int kw, Rng& rng) {
  LearnedConvT<T> conv;
  conv.p.weights = TensorT<T>({in_c, out_c, kh, kw});
  const double stddev = std::sqrt(2.0 / (static_cast<double>(in_c) * kh * kw));
  for (std::size_t i = 0; i < conv.p.weights.size(); ++i)
    conv.p.weights[i] = static_cast<T>(rng.normal() * stddev);
  conv.p.bias = TensorT<T>::zeros({out_c});
  conv.p.stride = 2;
  conv.p.dilation = 1;
  conv.grad_weights = TensorT<T>::zeros(conv.p.weights.shape());
  conv.grad_bias = TensorT<T>::zeros({out_c});
  return conv;
}

template <typename T>
LearnedBnT<T> make_bn(int channels) {
  LearnedBnT<T> bn;
  bn.p.gamma = TensorT<T>::ones({channels});
  bn.p.beta = TensorT<T>::zeros({channels});
  bn.p.running_mean = TensorT<T>::zeros({channels});
  bn.p.running_var = TensorT<T>::ones({channels});
  bn.grad_gamma = TensorT<T>::zeros({channels});
  bn.grad_beta = TensorT<T>::zeros({channels});
  return bn;
}

namespace {

template <typename T>
TensorT<T> conv_backward_acc(LearnedConvT<T>& conv, const TensorT<T>& x,
                             const TensorT<T>& grad_out) {
  auto grads = conv2d_backward(x, conv.p, grad_out);
  add_inplace(conv.grad_weights, grads.weights);
  add_inplace(conv.grad_bias, grads.bias);
  return std::move(grads.x);
}

template <typename T>
TensorT<T> bn_backward_acc(LearnedBnT<T>& bn, const TensorT<T>& x,
                           const TensorT<T>& grad_out) {
  auto grads = batchnorm_backward(x, bn.p, grad_out);
  add_inplace(bn.grad_gamma, grads.gamma);
  add_inplace(bn.grad_beta, grads.beta);
  return std::move(grads.x);
}

}  // namespace

// --- atrous entry stack -----------------------------------------------------

template <typename T>
AtrousStackParamsT<T> make_atrous_stack(int in_channels, int filters, Rng& rng) {
  AtrousStackParamsT<T> params;
  const int rates[3] = {1, 2, 4};
  int channels = in_channels;
  for (int rate : rates) {
    ConvBnT<T> stage;
    stage.conv = make_conv<T>(filters, channels, 3, 3, 1, rate, rng);
    stage.bn = make_bn<T>(filters);
    params.stages.push_back(std::move(stage));
    channels = filters;
  }
  return params;
}

template <typename T>
TensorT<T> atrous_stack_forward(const TensorT<T>& x, AtrousStackParamsT<T>& params,
                                BnMode mode, AtrousStackCacheT<T>* cache) {
  require(params.stages.size() == 3, "atrous stack expects three stages");
  require(x.rank() == 4 && x.dim(1) == params.stages[0].conv.p.weights.dim(1),
          "atrous stack: wrong channel count");
  if (cache) {
    cache->x = x;
    cache->conv_out.clear();
    cache->bn_out.clear();
    cache->relu_out.clear();
  }
  TensorT<T> cur = x;
  for (auto& stage : params.stages) {
    TensorT<T> c = conv2d_forward(cur, stage.conv.p);
    TensorT<T> n = batchnorm_forward(c, stage.bn.p, mode);
    TensorT<T> r = relu(n);
    if (cache) {
      cache->conv_out.push_back(std::move(c));
      cache->bn_out.push_back(std::move(n));
      cache->relu_out.push_back(r);
    }
    cur = std::move(r);
  }
  return cur;
}

template <typename T>
TensorT<T> atrous_stack_backward(AtrousStackParamsT<T>& params,
                                 const AtrousStackCacheT<T>& cache,
                                 const TensorT<T>& grad_out) {
  TensorT<T> grad = grad_out;
  for (int i = 2; i >= 0; --i) {
    auto& stage = params.stages[static_cast<std::size_t>(i)];
    const TensorT<T>& conv_in = (i == 0) ? cache.x : cache.relu_out[static_cast<std::size_t>(i - 1)];
    grad = relu_backward(cache.bn_out[static_cast<std::size_t>(i)], grad);
    grad = bn_backward_acc(stage.bn, cache.conv_out[static_cast<std::size_t>(i)], grad);
    grad = conv_backward_acc(stage.conv, conv_in, grad);
  }
  return grad;
}

// --- bottleneck block -------------------------------------------------------

template <typename T>
BottleneckParamsT<T> make_bottleneck(const BottleneckSpec& spec, Rng& rng) {
  require(spec.n >= 1 && spec.in_channels >= 1, "bottleneck: bad spec");
  BottleneckParamsT<T> params;
  params.spec = spec;
  const int out_channels = 4 * spec.n;
  const int stride = spec.downsample ? 2 : 1;
  params.reduce.conv = make_conv<T>(spec.n, spec.in_channels, 1, 1, 1, 1, rng);
  params.reduce.bn = make_bn<T>(spec.n);
  params.spatial.conv = make_conv<T>(spec.n, spec.n, 3, 3, stride, 1, rng);
  params.spatial.bn = make_bn<T>(spec.n);
  params.expand.conv = make_conv<T>(out_channels, spec.n, 1, 1, 1, 1, rng);
  params.expand.bn = make_bn<T>(out_channels);
  if (spec.downsample || spec.in_channels != out_channels) {
    ConvBnT<T> proj;
    proj.conv = make_conv<T>(out_channels, spec.in_channels, 1, 1, stride, 1, rng);
    proj.bn = make_bn<T>(out_channels);
    params.projection = std::move(proj);
  }
  return params;
}

template <typename T>
TensorT<T> bottleneck_forward(const TensorT<T>& x, BottleneckParamsT<T>& params,
                              BnMode mode, BottleneckCacheT<T>* cache) {
  require(x.dim(1) == params.spec.in_channels, "bottleneck: channel mismatch");
  TensorT<T> c1 = conv2d_forward(x, params.reduce.conv.p);
  TensorT<T> n1 = batchnorm_forward(c1, params.reduce.bn.p, mode);
  TensorT<T> r1 = relu(n1);
  TensorT<T> c2 = conv2d_forward(r1, params.spatial.conv.p);
  TensorT<T> n2 = batchnorm_forward(c2, params.spatial.bn.p, mode);
  TensorT<T> r2 = relu(n2);
  TensorT<T> c3 = conv2d_forward(r2, params.expand.conv.p);
  TensorT<T> n3 = batchnorm_forward(c3, params.expand.bn.p, mode);

  TensorT<T> sum;
  TensorT<T> proj_conv, proj_bn;
  if (params.projection) {
    proj_conv = conv2d_forward(x, params.projection->conv.p);
    proj_bn = batchnorm_forward(proj_conv, params.projection->bn.p, mode);
    sum = elementwise_add(n3, proj_bn);
  } else {
    sum = elementwise_add(n3, x);
  }
  TensorT<T> out = relu(sum);

  if (cache) {
    cache->x = x;
    cache->c1 = std::move(c1);
    cache->n1 = std::move(n1);
    cache->r1 = std::move(r1);
    cache->c2 = std::move(c2);
    cache->n2 = std::move(n2);
    cache->r2 = std::move(r2);
    cache->c3 = std::move(c3);
    cache->n3 = std::move(n3);
    cache->proj_conv = std::move(proj_conv);
    cache->proj_bn = std::move(proj_bn);
    cache->sum = std::move(sum);
  }
  return out;
}

template <typename T>
TensorT<T> bottleneck_backward(BottleneckParamsT<T>& params,
                               const BottleneckCacheT<T>& cache,
                               const TensorT<T>& grad_out) {
  TensorT<T> grad_sum = relu_backward(cache.sum, grad_out);

  // Main path.
  TensorT<T> grad = bn_backward_acc(params.expand.bn, cache.c3, grad_sum);
  grad = conv_backward_acc(params.expand.conv, cache.r2, grad);
  grad = relu_backward(cache.n2, grad);
  grad = bn_backward_acc(params.spatial.bn, cache.c2, grad);
  grad = conv_backward_acc(params.spatial.conv, cache.r1, grad);
  grad = relu_backward(cache.n1, grad);
  grad = bn_backward_acc(params.reduce.bn, cache.c1, grad);
  TensorT<T> grad_x = conv_backward_acc(params.reduce.conv, cache.x, grad);

  // Skip path.
  if (params.projection) {
    TensorT<T> gp = bn_backward_acc(params.projection->bn, cache.proj_conv, grad_sum);
    gp = conv_backward_acc(params.projection->conv, cache.x, gp);
    add_inplace(grad_x, gp);
  } else {
    add_inplace(grad_x, grad_sum);
  }
  return grad_x;
}

// --- global convolutional network block --------------------------------------

template <typename T>
GcnParamsT<T> make_gcn(const GcnSpec& spec, int in_channels, Rng& rng) {
  require(spec.k >= 1 && spec.k % 2 == 1, "gcn: kernel extent must be odd");
  GcnParamsT<T> params;
  params.spec = spec;
  const int c = spec.out_channels;
  params.a1 = make_conv<T>(c, in_channels, 1, spec.k, 1, 1, rng);
  params.a2 = make_conv<T>(c, c, spec.k, 1, 1, 1, rng);
  params.b1 = make_conv<T>(c, in_channels, spec.k, 1, 1, 1, rng);
  params.b2 = make_conv<T>(c, c, 1, spec.k, 1, 1, rng);
  return params;
}

template <typename T>
TensorT<T> gcn_forward(const TensorT<T>& x, GcnParamsT<T>& params, GcnCacheT<T>* cache) {
  TensorT<T> a1 = conv2d_forward(x, params.a1.p);
  TensorT<T> a = conv2d_forward(a1, params.a2.p);
  TensorT<T> b1 = conv2d_forward(x, params.b1.p);
  TensorT<T> b = conv2d_forward(b1, params.b2.p);
  TensorT<T> out = elementwise_add(a, b);
  if (cache) {
    cache->x = x;
    cache->a1_out = std::move(a1);
    cache->b1_out = std::move(b1);
  }
  return out;
}

template <typename T>
TensorT<T> gcn_backward(GcnParamsT<T>& params, const GcnCacheT<T>& cache,
                        const TensorT<T>& grad_out) {
  TensorT<T> ga = conv_backward_acc(params.a2, cache.a1_out, grad_out);
  TensorT<T> grad_x = conv_backward_acc(params.a1, cache.x, ga);
  TensorT<T> gb = conv_backward_acc(params.b2, cache.b1_out, grad_out);
  TensorT<T> gxb = conv_backward_acc(params.b1, cache.x, gb);
  add_inplace(grad_x, gxb);
  return grad_x;
}

template <typename T>
std::size_t gcn_parameter_count(const GcnParamsT<T>& params) {
  return params.a1.p.weights.size() + params.a1.p.bias.size() +
         params.a2.p.weights.size() + params.a2.p.bias.size() +
         params.b1.p.weights.size() + params.b1.p.bias.size() +
         params.b2.p.weights.size() + params.b2.p.bias.size();
}

// --- boundary refinement block ----------------------------------------------

template <typename T>
BrParamsT<T> make_br(int channels, Rng& rng) {
  BrParamsT<T> params;
  params.conv1 = make_conv<T>(channels, channels, 3, 3, 1, 1, rng);
  params.conv2 = make_conv<T>(channels, channels, 3, 3, 1, 1, rng);
  return params;
}

template <typename T>
TensorT<T> br_forward(const TensorT<T>& x, BrParamsT<T>& params, BrCacheT<T>* cache) {
  TensorT<T> c1 = conv2d_forward(x, params.conv1.p);
  TensorT<T> r1 = relu(c1);
  TensorT<T> c2 = conv2d_forward(r1, params.conv2.p);
  TensorT<T> out = elementwise_add(x, c2);
  if (cache) {
    cache->x = x;
    cache->c1 = std::move(c1);
    cache->r1 = std::move(r1);
  }
  return out;
}

template <typename T>
TensorT<T> br_backward(BrParamsT<T>& params, const BrCacheT<T>& cache,
                       const TensorT<T>& grad_out) {
  TensorT<T> grad = conv_backward_acc(params.conv2, cache.r1, grad_out);
  grad = relu_backward(cache.c1, grad);
  TensorT<T> grad_x = conv_backward_acc(params.conv1, cache.x, grad);
  add_inplace(grad_x, grad_out);
  return grad_x;
}

// --- residual stages ---------------------------------------------------------

int res_stage_depth(int stage_index) {
  require(stage_index >= 1 && stage_index <= 4, "res stage index must be 1..4");
  const int depth[4] = {3, 4, 6, 3};
  return depth[stage_index - 1];
}

bool res_stage_downsamples(int stage_index) {
  require(stage_index >= 1 && stage_index <= 4, "res stage index must be 1..4");
  return stage_index != 4;
}

template <typename T>
ResStageParamsT<T> make_res_stage(int stage_index, int in_channels, int base_n, Rng& rng) {
  ResStageParamsT<T> params;
  params.stage_index = stage_index;
  const int depth = res_stage_depth(stage_index);
  int channels = in_channels;
  for (int i = 0; i < depth; ++i) {
    BottleneckSpec spec;
    spec.n = base_n;
    spec.in_channels = channels;
    spec.downsample = (i == 0) && res_stage_downsamples(stage_index);
    params.blocks.push_back(make_bottleneck<T>(spec, rng));
    channels = 4 * base_n;
  }
  return params;
}

template <typename T>
TensorT<T> res_stage_forward(const TensorT<T>& x, ResStageParamsT<T>& params, BnMode mode,
                             ResStageCacheT<T>* cache) {
  if (cache) cache->blocks.assign(params.blocks.size(), BottleneckCacheT<T>{});
  TensorT<T> cur = x;
  for (std::size_t i = 0; i < params.blocks.size(); ++i)
    cur = bottleneck_forward(cur, params.blocks[i], mode,
                             cache ? &cache->blocks[i] : nullptr);
  return cur;
}

template <typename T>
TensorT<T> res_stage_backward(ResStageParamsT<T>& params, const ResStageCacheT<T>& cache,
                              const TensorT<T>& grad_out) {
  TensorT<T> grad = grad_out;
  for (std::size_t i = params.blocks.size(); i-- > 0;)
    grad = bottleneck_backward(params.blocks[i], cache.blocks[i], grad);
  return grad;
}

#define RESFCN_INSTANTIATE_BLOCKS(T)                                                       \
  template LearnedConvT<T> make_conv(int, int, int, int, int, int, Rng&);                  \
  template LearnedConvT<T> make_deconv(int, int, int, int, Rng&);                          \
  template LearnedBnT<T> make_bn(int);                                                     \
  template AtrousStackParamsT<T> make_atrous_stack(int, int, Rng&);                        \
  template TensorT<T> atrous_stack_forward(const TensorT<T>&, AtrousStackParamsT<T>&,      \
                                           BnMode, AtrousStackCacheT<T>*);                 \
  template TensorT<T> atrous_stack_backward(AtrousStackParamsT<T>&,                        \
                                            const AtrousStackCacheT<T>&,                   \
                                            const TensorT<T>&);                            \
  template BottleneckParamsT<T> make_bottleneck(const BottleneckSpec&, Rng&);              \
  template TensorT<T> bottleneck_forward(const TensorT<T>&, BottleneckParamsT<T>&, BnMode, \
                                         BottleneckCacheT<T>*);                            \
  template TensorT<T> bottleneck_backward(BottleneckParamsT<T>&,                           \
                                          const BottleneckCacheT<T>&, const TensorT<T>&);  \
  template GcnParamsT<T> make_gcn(const GcnSpec&, int, Rng&);                              \
  template TensorT<T> gcn_forward(const TensorT<T>&, GcnParamsT<T>&, GcnCacheT<T>*);       \
  template TensorT<T> gcn_backward(GcnParamsT<T>&, const GcnCacheT<T>&,                    \
                                   const TensorT<T>&);                                     \
  template std::size_t gcn_parameter_count(const GcnParamsT<T>&);                          \
  template BrParamsT<T> make_br(int, Rng&);                                                \
  template TensorT<T> br_forward(const TensorT<T>&, BrParamsT<T>&, BrCacheT<T>*);          \
  template TensorT<T> br_backward(BrParamsT<T>&, const BrCacheT<T>&, const TensorT<T>&);   \
  template ResStageParamsT<T> make_res_stage(int, int, int, Rng&);                         \
  template TensorT<T> res_stage_forward(const TensorT<T>&, ResStageParamsT<T>&, BnMode,    \
                                        ResStageCacheT<T>*);                               \
  template TensorT<T> res_stage_backward(ResStageParamsT<T>&, const ResStageCacheT<T>&,    \
                                         const TensorT<T>&);

RESFCN_INSTANTIATE_BLOCKS(float)
RESFCN_INSTANTIATE_BLOCKS(double)
#undef RESFCN_INSTANTIATE_BLOCKS

}  // namespace resfcn
