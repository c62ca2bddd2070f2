#include "resfcn/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "resfcn/gemm.hpp"

namespace resfcn {

ConvGeometry conv2d_geometry(int in_h, int in_w, int kh, int kw, int stride,
                             int dilation, int pad_h, int pad_w) {
  require(kh >= 1 && kw >= 1, "conv2d: kernel extents must be >= 1");
  require(stride >= 1 && dilation >= 1, "conv2d: stride and dilation must be >= 1");
  const int eff_h = effective_extent(kh, dilation);
  const int eff_w = effective_extent(kw, dilation);
  ConvGeometry g;
  if (pad_h < 0) {
    g.out_h = (in_h + stride - 1) / stride;
    g.pad_h = std::max(0, (g.out_h - 1) * stride + eff_h - in_h) / 2;
  } else {
    g.pad_h = pad_h;
    g.out_h = (in_h + 2 * pad_h - eff_h) / stride + 1;
  }
  if (pad_w < 0) {
    g.out_w = (in_w + stride - 1) / stride;
    g.pad_w = std::max(0, (g.out_w - 1) * stride + eff_w - in_w) / 2;
  } else {
    g.pad_w = pad_w;
    g.out_w = (in_w + 2 * pad_w - eff_w) / stride + 1;
  }
  require(g.out_h >= 1 && g.out_w >= 1, "conv2d: zero-size output");
  return g;
}

namespace {

// col[(r*kh+u)*kw+v][oy*out_w+ox] = x[r, oy*stride + u*d - pad_h, ox*stride + v*d - pad_w]
template <typename T>
void im2col(const T* x, int channels, int in_h, int in_w, int kh, int kw, int stride,
            int dilation, const ConvGeometry& g, T* col) {
  const int ohw = g.out_h * g.out_w;
  for (int r = 0; r < channels; ++r) {
    const T* plane = x + static_cast<std::size_t>(r) * in_h * in_w;
    for (int u = 0; u < kh; ++u) {
      for (int v = 0; v < kw; ++v) {
        T* row = col + (static_cast<std::size_t>(r) * kh * kw +
                        static_cast<std::size_t>(u) * kw + v) *
                           ohw;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * stride + u * dilation - g.pad_h;
          T* dst = row + static_cast<std::size_t>(oy) * g.out_w;
          if (iy < 0 || iy >= in_h) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * in_w;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * stride + v * dilation - g.pad_w;
            dst[ox] = (ix >= 0 && ix < in_w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

// Transposed layout, col_t[oy*out_w+ox][(r*kh+u)*kw+v], used for the
// kernel-gradient GEMM.
template <typename T>
void im2col_t(const T* x, int channels, int in_h, int in_w, int kh, int kw, int stride,
              int dilation, const ConvGeometry& g, T* col_t) {
  const int rkk = channels * kh * kw;
  for (int oy = 0; oy < g.out_h; ++oy) {
    for (int ox = 0; ox < g.out_w; ++ox) {
      T* row = col_t + (static_cast<std::size_t>(oy) * g.out_w + ox) * rkk;
      std::size_t col_idx = 0;
      for (int r = 0; r < channels; ++r) {
        const T* plane = x + static_cast<std::size_t>(r) * in_h * in_w;
        for (int u = 0; u < kh; ++u) {
          const int iy = oy * stride + u * dilation - g.pad_h;
          for (int v = 0; v < kw; ++v, ++col_idx) {
            const int ix = ox * stride + v * dilation - g.pad_w;
            row[col_idx] = (iy >= 0 && iy < in_h && ix >= 0 && ix < in_w)
                               ? plane[static_cast<std::size_t>(iy) * in_w + ix]
                               : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, int channels, int in_h, int in_w, int kh, int kw,
                int stride, int dilation, const ConvGeometry& g, T* x) {
  const int ohw = g.out_h * g.out_w;
  for (int r = 0; r < channels; ++r) {
    T* plane = x + static_cast<std::size_t>(r) * in_h * in_w;
    for (int u = 0; u < kh; ++u) {
      for (int v = 0; v < kw; ++v) {
        const T* row = col + (static_cast<std::size_t>(r) * kh * kw +
                              static_cast<std::size_t>(u) * kw + v) *
                                 ohw;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * stride + u * dilation - g.pad_h;
          if (iy < 0 || iy >= in_h) continue;
          T* dst = plane + static_cast<std::size_t>(iy) * in_w;
          const T* src = row + static_cast<std::size_t>(oy) * g.out_w;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * stride + v * dilation - g.pad_w;
            if (ix >= 0 && ix < in_w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <typename T>
std::vector<T>& scratch_buffer(int slot) {
  thread_local std::vector<T> buffers[3];
  return buffers[slot];
}

template <typename T>
void validate_conv_input(const TensorT<T>& x, const ConvParamsT<T>& p, bool transposed) {
  require(x.rank() == 4, "conv2d: input must be (batch, channels, height, width)");
  require(p.weights.rank() == 4, "conv2d: weights must be rank 4");
  const int expected_in = transposed ? p.weights.dim(0) : p.weights.dim(1);
  require(x.dim(1) == expected_in, "conv2d: channel mismatch");
  const int out_channels = transposed ? p.weights.dim(1) : p.weights.dim(0);
  require(p.bias.rank() == 1 && p.bias.dim(0) == out_channels,
          "conv2d: bias length mismatch");
}

}  // namespace

template <typename T>
TensorT<T> conv2d_forward(const TensorT<T>& x, const ConvParamsT<T>& p) {
  validate_conv_input(x, p, /*transposed=*/false);
  const int batch = x.dim(0), in_c = x.dim(1), in_h = x.dim(2), in_w = x.dim(3);
  const int out_c = p.weights.dim(0), kh = p.weights.dim(2), kw = p.weights.dim(3);
  const ConvGeometry g =
      conv2d_geometry(in_h, in_w, kh, kw, p.stride, p.dilation, p.pad_h, p.pad_w);
  const int ohw = g.out_h * g.out_w;
  const int rkk = in_c * kh * kw;
  const bool pointwise = (kh == 1 && kw == 1 && p.stride == 1 && g.pad_h == 0 && g.pad_w == 0);

  TensorT<T> out({batch, out_c, g.out_h, g.out_w});
  const std::size_t x_stride = static_cast<std::size_t>(in_c) * in_h * in_w;
  const std::size_t out_stride = static_cast<std::size_t>(out_c) * ohw;

#pragma omp parallel for schedule(static)
  for (int b = 0; b < batch; ++b) {
    const T* xb = x.data() + static_cast<std::size_t>(b) * x_stride;
    T* ob = out.data() + static_cast<std::size_t>(b) * out_stride;
    const T* col = xb;
    if (!pointwise) {
      auto& buf = scratch_buffer<T>(0);
      buf.resize(static_cast<std::size_t>(rkk) * ohw);
      im2col(xb, in_c, in_h, in_w, kh, kw, p.stride, p.dilation, g, buf.data());
      col = buf.data();
    }
    gemm(out_c, ohw, rkk, p.weights.data(), rkk, col, ohw, ob, ohw, false);
    for (int s = 0; s < out_c; ++s) {
      const T bias = p.bias[static_cast<std::size_t>(s)];
      T* dst = ob + static_cast<std::size_t>(s) * ohw;
      for (int i = 0; i < ohw; ++i) dst[i] += bias;
    }
  }
  check_finite(out, "conv2d_forward");
  return out;
}

template <typename T>
ConvGradsT<T> conv2d_backward(const TensorT<T>& x, const ConvParamsT<T>& p,
                              const TensorT<T>& grad_out) {
  validate_conv_input(x, p, /*transposed=*/false);
  const int batch = x.dim(0), in_c = x.dim(1), in_h = x.dim(2), in_w = x.dim(3);
  const int out_c = p.weights.dim(0), kh = p.weights.dim(2), kw = p.weights.dim(3);
  const ConvGeometry g =
      conv2d_geometry(in_h, in_w, kh, kw, p.stride, p.dilation, p.pad_h, p.pad_w);
  require(grad_out.rank() == 4 && grad_out.dim(0) == batch && grad_out.dim(1) == out_c &&
              grad_out.dim(2) == g.out_h && grad_out.dim(3) == g.out_w,
          "conv2d_backward: grad_out shape mismatch");
  const int ohw = g.out_h * g.out_w;
  const int rkk = in_c * kh * kw;
  const bool pointwise = (kh == 1 && kw == 1 && p.stride == 1 && g.pad_h == 0 && g.pad_w == 0);

  ConvGradsT<T> grads{TensorT<T>(x.shape()), TensorT<T>(p.weights.shape()),
                      TensorT<T>(p.bias.shape())};
  const std::size_t x_stride = static_cast<std::size_t>(in_c) * in_h * in_w;
  const std::size_t out_stride = static_cast<std::size_t>(out_c) * ohw;

  // Bias gradient, fixed batch-major order.
  for (int b = 0; b < batch; ++b) {
    const T* gb = grad_out.data() + static_cast<std::size_t>(b) * out_stride;
    for (int s = 0; s < out_c; ++s) {
      T sum = T(0);
      const T* src = gb + static_cast<std::size_t>(s) * ohw;
      for (int i = 0; i < ohw; ++i) sum += src[i];
      grads.bias[static_cast<std::size_t>(s)] += sum;
    }
  }

  // Kernel gradient: accumulate sample GEMMs in batch order so the sum
  // per element never depends on the thread count.
  for (int b = 0; b < batch; ++b) {
    const T* xb = x.data() + static_cast<std::size_t>(b) * x_stride;
    const T* gb = grad_out.data() + static_cast<std::size_t>(b) * out_stride;
    auto& buf = scratch_buffer<T>(1);
    buf.resize(static_cast<std::size_t>(ohw) * rkk);
    im2col_t(xb, in_c, in_h, in_w, kh, kw, p.stride, p.dilation, g, buf.data());
    gemm_parallel(out_c, rkk, ohw, gb, ohw, buf.data(), rkk, grads.weights.data(), rkk,
                  true);
  }

  // Input gradient: grad_col = W^T * grad_out, scattered back per sample.
  TensorT<T> weights_t({rkk, out_c});
  for (int s = 0; s < out_c; ++s)
    for (int q = 0; q < rkk; ++q)
      weights_t[static_cast<std::size_t>(q) * out_c + s] =
          p.weights[static_cast<std::size_t>(s) * rkk + q];

#pragma omp parallel for schedule(static)
  for (int b = 0; b < batch; ++b) {
    const T* gb = grad_out.data() + static_cast<std::size_t>(b) * out_stride;
    T* gxb = grads.x.data() + static_cast<std::size_t>(b) * x_stride;
    if (pointwise) {
      gemm(rkk, ohw, out_c, weights_t.data(), out_c, gb, ohw, gxb, ohw, false);
    } else {
      auto& buf = scratch_buffer<T>(2);
      buf.resize(static_cast<std::size_t>(rkk) * ohw);
      gemm(rkk, ohw, out_c, weights_t.data(), out_c, gb, ohw, buf.data(), ohw, false);
      col2im_add(buf.data(), in_c, in_h, in_w, kh, kw, p.stride, p.dilation, g, gxb);
    }
  }
  return grads;
}

namespace {

// Geometry of the stride-2 same-padded conv that deconv2d transposes:
// that conv maps (2H, 2W) down to (H, W) with leading pad (k-2)/2.
struct DeconvGeometry {
  int pad_h, pad_w;
};

template <typename T>
DeconvGeometry deconv_geometry(const ConvParamsT<T>& p) {
  require(p.stride == 2 && p.dilation == 1,
          "deconv2d: only stride 2, dilation 1 is supported");
  require(p.pad_h < 0 && p.pad_w < 0, "deconv2d: only same padding is supported");
  const int kh = p.weights.dim(2), kw = p.weights.dim(3);
  require(kh >= 2 && kw >= 2, "deconv2d: kernel extent must be >= 2");
  return {(kh - 2) / 2, (kw - 2) / 2};
}

}  // namespace

template <typename T>
TensorT<T> deconv2d_forward(const TensorT<T>& x, const ConvParamsT<T>& p) {
  validate_conv_input(x, p, /*transposed=*/true);
  const DeconvGeometry dg = deconv_geometry(p);
  const int batch = x.dim(0), in_c = x.dim(1), in_h = x.dim(2), in_w = x.dim(3);
  const int out_c = p.weights.dim(1), kh = p.weights.dim(2), kw = p.weights.dim(3);
  const int out_h = 2 * in_h, out_w = 2 * in_w;

  TensorT<T> out({batch, out_c, out_h, out_w});
  const std::size_t x_stride = static_cast<std::size_t>(in_c) * in_h * in_w;
  const std::size_t out_stride = static_cast<std::size_t>(out_c) * out_h * out_w;
  const std::size_t w_ostride = static_cast<std::size_t>(kh) * kw;
  const std::size_t w_istride = static_cast<std::size_t>(out_c) * w_ostride;

#pragma omp parallel for schedule(static)
  for (int b = 0; b < batch; ++b) {
    const T* xb = x.data() + static_cast<std::size_t>(b) * x_stride;
    T* ob = out.data() + static_cast<std::size_t>(b) * out_stride;
    for (int o = 0; o < out_c; ++o) {
      T* plane = ob + static_cast<std::size_t>(o) * out_h * out_w;
      const T bias = p.bias[static_cast<std::size_t>(o)];
      for (int y = 0; y < out_h; ++y) {
        for (int xo = 0; xo < out_w; ++xo) {
          T acc = bias;
          for (int i = 0; i < in_c; ++i) {
            const T* xplane = xb + static_cast<std::size_t>(i) * in_h * in_w;
            const T* wk = p.weights.data() + static_cast<std::size_t>(i) * w_istride +
                          static_cast<std::size_t>(o) * w_ostride;
            for (int u = 0; u < kh; ++u) {
              const int ty = y + dg.pad_h - u;
              if (ty < 0 || (ty & 1) != 0) continue;
              const int hy = ty >> 1;
              if (hy >= in_h) continue;
              for (int v = 0; v < kw; ++v) {
                const int tx = xo + dg.pad_w - v;
                if (tx < 0 || (tx & 1) != 0) continue;
                const int hx = tx >> 1;
                if (hx >= in_w) continue;
                acc += xplane[static_cast<std::size_t>(hy) * in_w + hx] *
                       wk[static_cast<std::size_t>(u) * kw + v];
              }
            }
          }
          plane[static_cast<std::size_t>(y) * out_w + xo] = acc;
        }
      }
    }
  }
  check_finite(out, "deconv2d_forward");
  return out;
}

template <typename T>
ConvGradsT<T> deconv2d_backward(const TensorT<T>& x, const ConvParamsT<T>& p,
                                const TensorT<T>& grad_out) {
  validate_conv_input(x, p, /*transposed=*/true);
  const DeconvGeometry dg = deconv_geometry(p);
  const int batch = x.dim(0), in_c = x.dim(1), in_h = x.dim(2), in_w = x.dim(3);
  const int out_c = p.weights.dim(1), kh = p.weights.dim(2), kw = p.weights.dim(3);
  const int out_h = 2 * in_h, out_w = 2 * in_w;
  require(grad_out.rank() == 4 && grad_out.dim(0) == batch && grad_out.dim(1) == out_c &&
              grad_out.dim(2) == out_h && grad_out.dim(3) == out_w,
          "deconv2d_backward: grad_out shape mismatch");

  ConvGradsT<T> grads{TensorT<T>(x.shape()), TensorT<T>(p.weights.shape()),
                      TensorT<T>(p.bias.shape())};

  // grad_x is the adjoint of the adjoint: a plain stride-2 conv of
  // grad_out with the same kernels and no bias.
  ConvParamsT<T> as_conv{p.weights, TensorT<T>::zeros({in_c}), 2, 1, -1, -1};
  grads.x = conv2d_forward(grad_out, as_conv);

  const std::size_t go_stride = static_cast<std::size_t>(out_c) * out_h * out_w;
  const std::size_t x_stride = static_cast<std::size_t>(in_c) * in_h * in_w;
  for (int b = 0; b < batch; ++b) {
    const T* gb = grad_out.data() + static_cast<std::size_t>(b) * go_stride;
    for (int o = 0; o < out_c; ++o) {
      T sum = T(0);
      const T* src = gb + static_cast<std::size_t>(o) * out_h * out_w;
      for (int i = 0; i < out_h * out_w; ++i) sum += src[i];
      grads.bias[static_cast<std::size_t>(o)] += sum;
    }
  }

  // grad_W[i,o,u,v] = sum_{b,h,w} x[b,i,h,w] * gout[b,o,2h+u-pad, 2w+v-pad]
  const std::size_t w_ostride = static_cast<std::size_t>(kh) * kw;
  const std::size_t w_istride = static_cast<std::size_t>(out_c) * w_ostride;
#pragma omp parallel for schedule(static) collapse(2)
  for (int i = 0; i < in_c; ++i) {
    for (int o = 0; o < out_c; ++o) {
      T* wg = grads.weights.data() + static_cast<std::size_t>(i) * w_istride +
              static_cast<std::size_t>(o) * w_ostride;
      for (int b = 0; b < batch; ++b) {
        const T* xplane =
            x.data() + static_cast<std::size_t>(b) * x_stride + static_cast<std::size_t>(i) * in_h * in_w;
        const T* gplane = grad_out.data() + static_cast<std::size_t>(b) * go_stride +
                          static_cast<std::size_t>(o) * out_h * out_w;
        for (int u = 0; u < kh; ++u) {
          for (int v = 0; v < kw; ++v) {
            T acc = T(0);
            for (int h = 0; h < in_h; ++h) {
              const int gy = 2 * h + u - dg.pad_h;
              if (gy < 0 || gy >= out_h) continue;
              const T* grow = gplane + static_cast<std::size_t>(gy) * out_w;
              const T* xrow = xplane + static_cast<std::size_t>(h) * in_w;
              for (int w = 0; w < in_w; ++w) {
                const int gx = 2 * w + v - dg.pad_w;
                if (gx >= 0 && gx < out_w) acc += xrow[w] * grow[gx];
              }
            }
            wg[static_cast<std::size_t>(u) * kw + v] += acc;
          }
        }
      }
    }
  }
  return grads;
}

template <typename T>
std::pair<TensorT<T>, std::vector<std::uint32_t>> maxpool2x2_forward(const TensorT<T>& x) {
  require(x.rank() == 4, "maxpool2x2: input must be rank 4");
  const int batch = x.dim(0), channels = x.dim(1), in_h = x.dim(2), in_w = x.dim(3);
  require(in_h % 2 == 0 && in_w % 2 == 0, "maxpool2x2: spatial extents must be even");
  const int out_h = in_h / 2, out_w = in_w / 2;

  TensorT<T> out({batch, channels, out_h, out_w});
  std::vector<std::uint32_t> index_map(out.size());
  const T* px = x.data();
  T* po = out.data();
  std::size_t oi = 0;
  for (int b = 0; b < batch; ++b) {
    for (int c = 0; c < channels; ++c) {
      const std::size_t plane =
          (static_cast<std::size_t>(b) * channels + c) * in_h * in_w;
      for (int oy = 0; oy < out_h; ++oy) {
        for (int ox = 0; ox < out_w; ++ox, ++oi) {
          const std::size_t base = plane + static_cast<std::size_t>(2 * oy) * in_w + 2 * ox;
          // Row-major window order; strict > keeps the first winner on ties.
          std::size_t best = base;
          T best_val = px[base];
          const std::size_t candidates[3] = {base + 1, base + in_w, base + in_w + 1};
          for (std::size_t cand : candidates) {
            if (px[cand] > best_val) {
              best_val = px[cand];
              best = cand;
            }
          }
          po[oi] = best_val;
          index_map[oi] = static_cast<std::uint32_t>(best);
        }
      }
    }
  }
  return {std::move(out), std::move(index_map)};
}

template <typename T>
TensorT<T> maxpool2x2_backward(const std::vector<std::uint32_t>& index_map,
                               const std::vector<int>& x_shape,
                               const TensorT<T>& grad_out) {
  require(index_map.size() == grad_out.size(), "maxpool2x2_backward: index map size mismatch");
  TensorT<T> grad_x(x_shape);
  T* gx = grad_x.data();
  const T* go = grad_out.data();
  for (std::size_t i = 0; i < index_map.size(); ++i) gx[index_map[i]] += go[i];
  return grad_x;
}

namespace {

template <typename T>
void batch_stats(const TensorT<T>& x, std::vector<double>& mean, std::vector<double>& var) {
  const int batch = x.dim(0), channels = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const double count = static_cast<double>(batch) * static_cast<double>(hw);
  mean.assign(static_cast<std::size_t>(channels), 0.0);
  var.assign(static_cast<std::size_t>(channels), 0.0);
  const T* px = x.data();
  for (int b = 0; b < batch; ++b) {
    for (int c = 0; c < channels; ++c) {
      const T* plane = px + (static_cast<std::size_t>(b) * channels + c) * hw;
      double sum = 0.0, sq = 0.0;
      for (std::size_t i = 0; i < hw; ++i) {
        const double v = static_cast<double>(plane[i]);
        sum += v;
        sq += v * v;
      }
      mean[static_cast<std::size_t>(c)] += sum;
      var[static_cast<std::size_t>(c)] += sq;
    }
  }
  for (int c = 0; c < channels; ++c) {
    const double m = mean[static_cast<std::size_t>(c)] / count;
    mean[static_cast<std::size_t>(c)] = m;
    var[static_cast<std::size_t>(c)] =
        std::max(0.0, var[static_cast<std::size_t>(c)] / count - m * m);
  }
}

}  // namespace

template <typename T>
TensorT<T> batchnorm_forward(const TensorT<T>& x, BatchNormParamsT<T>& p, BnMode mode) {
  require(x.rank() == 4, "batchnorm: input must be rank 4");
  const int batch = x.dim(0), channels = x.dim(1);
  require(p.gamma.dim(0) == channels, "batchnorm: channel mismatch");
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);

  std::vector<double> mean, var;
  if (mode == BnMode::train) {
    batch_stats(x, mean, var);
    for (int c = 0; c < channels; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      p.running_mean[ci] = p.momentum * p.running_mean[ci] +
                           (T(1) - p.momentum) * static_cast<T>(mean[ci]);
      p.running_var[ci] =
          p.momentum * p.running_var[ci] + (T(1) - p.momentum) * static_cast<T>(var[ci]);
    }
  } else {
    mean.resize(static_cast<std::size_t>(channels));
    var.resize(static_cast<std::size_t>(channels));
    for (int c = 0; c < channels; ++c) {
      mean[static_cast<std::size_t>(c)] = static_cast<double>(p.running_mean[static_cast<std::size_t>(c)]);
      var[static_cast<std::size_t>(c)] = static_cast<double>(p.running_var[static_cast<std::size_t>(c)]);
    }
  }

  TensorT<T> out(x.shape());
  const T* px = x.data();
  T* po = out.data();
#pragma omp parallel for schedule(static) collapse(2)
  for (int b = 0; b < batch; ++b) {
    for (int c = 0; c < channels; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      const T inv_std = static_cast<T>(1.0 / std::sqrt(var[ci] + static_cast<double>(p.epsilon)));
      const T shift = static_cast<T>(mean[ci]);
      const T g = p.gamma[ci], be = p.beta[ci];
      const std::size_t off = (static_cast<std::size_t>(b) * channels + c) * hw;
      for (std::size_t i = 0; i < hw; ++i)
        po[off + i] = g * (px[off + i] - shift) * inv_std + be;
    }
  }
  check_finite(out, "batchnorm_forward");
  return out;
}

template <typename T>
BatchNormGradsT<T> batchnorm_backward(const TensorT<T>& x, const BatchNormParamsT<T>& p,
                                      const TensorT<T>& grad_out) {
  require(x.same_shape(grad_out), "batchnorm_backward: shape mismatch");
  const int batch = x.dim(0), channels = x.dim(1);
  require(p.gamma.dim(0) == channels, "batchnorm_backward: channel mismatch");
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const double count = static_cast<double>(batch) * static_cast<double>(hw);

  std::vector<double> mean, var;
  batch_stats(x, mean, var);

  BatchNormGradsT<T> grads{TensorT<T>(x.shape()), TensorT<T>(p.gamma.shape()),
                           TensorT<T>(p.beta.shape())};
  const T* px = x.data();
  const T* pg = grad_out.data();

  // Per channel: grad_beta = sum g, grad_gamma = sum g*x_hat,
  // grad_x = gamma*istd*(g - grad_beta/N - x_hat*grad_gamma/N).
  std::vector<double> sum_g(static_cast<std::size_t>(channels), 0.0);
  std::vector<double> sum_gx(static_cast<std::size_t>(channels), 0.0);
  for (int b = 0; b < batch; ++b) {
    for (int c = 0; c < channels; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      const double istd = 1.0 / std::sqrt(var[ci] + static_cast<double>(p.epsilon));
      const std::size_t off = (static_cast<std::size_t>(b) * channels + c) * hw;
      double sg = 0.0, sgx = 0.0;
      for (std::size_t i = 0; i < hw; ++i) {
        const double g = static_cast<double>(pg[off + i]);
        const double xh = (static_cast<double>(px[off + i]) - mean[ci]) * istd;
        sg += g;
        sgx += g * xh;
      }
      sum_g[ci] += sg;
      sum_gx[ci] += sgx;
    }
  }
  for (int c = 0; c < channels; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    grads.beta[ci] = static_cast<T>(sum_g[ci]);
    grads.gamma[ci] = static_cast<T>(sum_gx[ci]);
  }

  T* gx = grads.x.data();
#pragma omp parallel for schedule(static) collapse(2)
  for (int b = 0; b < batch; ++b) {
    for (int c = 0; c < channels; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      const double istd = 1.0 / std::sqrt(var[ci] + static_cast<double>(p.epsilon));
      const double scale_term = static_cast<double>(p.gamma[ci]) * istd;
      const double mean_g = sum_g[ci] / count;
      const double mean_gx = sum_gx[ci] / count;
      const std::size_t off = (static_cast<std::size_t>(b) * channels + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const double xh = (static_cast<double>(px[off + i]) - mean[ci]) * istd;
        gx[off + i] = static_cast<T>(
            scale_term * (static_cast<double>(pg[off + i]) - mean_g - xh * mean_gx));
      }
    }
  }
  return grads;
}

template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
  TensorT<T> out(x.shape());
  const T* px = x.data();
  T* po = out.data();
  const std::size_t n = x.size();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i)
    po[i] = px[i] > T(0) ? px[i] : T(0);
  return out;
}

template <typename T>
TensorT<T> relu_backward(const TensorT<T>& x, const TensorT<T>& grad_out) {
  require(x.same_shape(grad_out), "relu_backward: shape mismatch");
  TensorT<T> out(x.shape());
  const T* px = x.data();
  const T* pg = grad_out.data();
  T* po = out.data();
  const std::size_t n = x.size();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i)
    po[i] = px[i] > T(0) ? pg[i] : T(0);
  return out;
}

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& x) {
  // Clamp keeps the output in the open interval so downstream logs and
  // the Dice ratio stay well-defined.
  constexpr T kMargin = std::is_same_v<T, float> ? T(1e-7) : T(1e-12);
  TensorT<T> out(x.shape());
  const T* px = x.data();
  T* po = out.data();
  const std::size_t n = x.size();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    const T s = T(1) / (T(1) + std::exp(-px[i]));
    po[i] = std::min(T(1) - kMargin, std::max(kMargin, s));
  }
  return out;
}

template <typename T>
TensorT<T> sigmoid_backward(const TensorT<T>& out, const TensorT<T>& grad_out) {
  require(out.same_shape(grad_out), "sigmoid_backward: shape mismatch");
  TensorT<T> grad(out.shape());
  const T* po = out.data();
  const T* pg = grad_out.data();
  T* pr = grad.data();
  const std::size_t n = out.size();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i)
    pr[i] = po[i] * (T(1) - po[i]) * pg[i];
  return grad;
}

#define RESFCN_INSTANTIATE_LAYERS(T)                                                      \
  template TensorT<T> conv2d_forward(const TensorT<T>&, const ConvParamsT<T>&);           \
  template ConvGradsT<T> conv2d_backward(const TensorT<T>&, const ConvParamsT<T>&,        \
                                         const TensorT<T>&);                              \
  template TensorT<T> deconv2d_forward(const TensorT<T>&, const ConvParamsT<T>&);         \
  template ConvGradsT<T> deconv2d_backward(const TensorT<T>&, const ConvParamsT<T>&,      \
                                           const TensorT<T>&);                            \
  template std::pair<TensorT<T>, std::vector<std::uint32_t>> maxpool2x2_forward(          \
      const TensorT<T>&);                                                                 \
  template TensorT<T> maxpool2x2_backward(const std::vector<std::uint32_t>&,              \
                                          const std::vector<int>&, const TensorT<T>&);    \
  template TensorT<T> batchnorm_forward(const TensorT<T>&, BatchNormParamsT<T>&, BnMode); \
  template BatchNormGradsT<T> batchnorm_backward(const TensorT<T>&,                       \
                                                 const BatchNormParamsT<T>&,              \
                                                 const TensorT<T>&);                      \
  template TensorT<T> relu(const TensorT<T>&);                                            \
  template TensorT<T> relu_backward(const TensorT<T>&, const TensorT<T>&);                \
  template TensorT<T> sigmoid(const TensorT<T>&);                                         \
  template TensorT<T> sigmoid_backward(const TensorT<T>&, const TensorT<T>&);

RESFCN_INSTANTIATE_LAYERS(float)
RESFCN_INSTANTIATE_LAYERS(double)
#undef RESFCN_INSTANTIATE_LAYERS

}  // namespace resfcn
