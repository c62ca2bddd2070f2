#include <doctest.h>

#include <cmath>
#include <cstring>

#include "oracles.hpp"
#include "resfcn/layers.hpp"
#include "resfcn/rng.hpp"
#include "test_helpers.hpp"

using namespace resfcn;
using namespace resfcn::testing;

namespace {

template <typename T>
ConvParamsT<T> random_conv(int out_c, int in_c, int kh, int kw, int stride, int dilation,
                           Rng& rng) {
  ConvParamsT<T> p;
  p.weights = random_tensor<T>({out_c, in_c, kh, kw}, rng);
  p.bias = random_tensor<T>({out_c}, rng);
  p.stride = stride;
  p.dilation = dilation;
  return p;
}

}  // namespace

TEST_CASE("conv2d ones-kernel overlap counts") {
  Tensor x = Tensor::ones({1, 1, 3, 3});
  ConvParams p{Tensor::ones({1, 1, 3, 3}), Tensor::zeros({1}), 1, 1, -1, -1};
  Tensor out = conv2d_forward(x, p);
  REQUIRE(out.shape() == std::vector<int>{1, 1, 3, 3});
  CHECK(out.at(0, 0, 1, 1) == 9.0f);
  CHECK(out.at(0, 0, 0, 0) == 4.0f);
  CHECK(out.at(0, 0, 0, 2) == 4.0f);
  CHECK(out.at(0, 0, 2, 0) == 4.0f);
  CHECK(out.at(0, 0, 2, 2) == 4.0f);
  CHECK(out.at(0, 0, 0, 1) == 6.0f);
}

TEST_CASE("dilated conv equals hole-expanded conventional conv, bitwise") {
  Rng rng(21);
  for (int d : {2, 4}) {
    Tensor x = random_tensor<float>({2, 3, 16, 16}, rng);
    auto p = random_conv<float>(4, 3, 3, 3, 1, d, rng);
    Tensor dilated = conv2d_forward(x, p);
    ConvParams dense{expand_kernel_with_holes(p.weights, d), p.bias, 1, 1, -1, -1};
    Tensor conventional = conv2d_forward(x, dense);
    REQUIRE(dilated.shape() == conventional.shape());
    CHECK(std::memcmp(dilated.data(), conventional.data(),
                      dilated.size() * sizeof(float)) == 0);
  }
}

TEST_CASE("conv2d matches naive six-loop oracle") {
  Rng rng(31);
  for (int config = 0; config < 12; ++config) {
    const int stride = (config % 2) + 1;
    const int d = stride == 1 ? ((config % 3) == 0 ? 1 : (config % 3) == 1 ? 2 : 4) : 1;
    Tensor x = random_tensor<float>({2, 3, 8, 8}, rng);
    auto p = random_conv<float>(4, 3, 3, 3, stride, d, rng);
    Tensor fast = conv2d_forward(x, p);
    Tensor slow = naive_conv2d(x, p);
    REQUIRE(fast.shape() == slow.shape());
    for (std::size_t i = 0; i < fast.size(); ++i)
      CHECK(close_rel(fast[i], slow[i], 1e-5));
  }
}

TEST_CASE("conv2d first-block geometry: 64x64x3 -> 64x64x32") {
  Rng rng(1);
  Tensor x = random_tensor<float>({1, 3, 64, 64}, rng);
  auto p = random_conv<float>(32, 3, 3, 3, 1, 1, rng);
  Tensor out = conv2d_forward(x, p);
  CHECK(out.shape() == std::vector<int>{1, 32, 64, 64});
}

TEST_CASE("conv2d error paths") {
  Rng rng(2);
  Tensor x = random_tensor<float>({1, 3, 8, 8}, rng);
  auto wrong = random_conv<float>(4, 2, 3, 3, 1, 1, rng);
  CHECK_THROWS_AS(conv2d_forward(x, wrong), std::invalid_argument);

  auto p = random_conv<float>(4, 3, 3, 3, 1, 1, rng);
  p.pad_h = 0;
  p.pad_w = 0;
  Tensor tiny = random_tensor<float>({1, 3, 2, 2}, rng);
  CHECK_THROWS_AS(conv2d_forward(tiny, p), std::invalid_argument);
}

TEST_CASE("conv2d linearity with zero bias") {
  Rng rng(77);
  Tensor x = random_tensor<float>({1, 2, 6, 6}, rng);
  Tensor y = random_tensor<float>({1, 2, 6, 6}, rng);
  auto p = random_conv<float>(3, 2, 3, 3, 1, 1, rng);
  p.bias = Tensor::zeros({3});
  const float alpha = 1.7f, beta = -0.6f;
  Tensor mixed = elementwise_add(scale(x, alpha), scale(y, beta));
  Tensor lhs = conv2d_forward(mixed, p);
  Tensor rhs = elementwise_add(scale(conv2d_forward(x, p), alpha),
                               scale(conv2d_forward(y, p), beta));
  for (std::size_t i = 0; i < lhs.size(); ++i) CHECK(close_rel(lhs[i], rhs[i], 1e-5));
}

TEST_CASE("conv2d_backward trivial cases") {
  Rng rng(3);
  Tensor x = random_tensor<float>({1, 2, 5, 5}, rng);
  auto p = random_conv<float>(2, 2, 3, 3, 1, 1, rng);
  Tensor zero_grad = Tensor::zeros({1, 2, 5, 5});
  auto grads = conv2d_backward(x, p, zero_grad);
  for (std::size_t i = 0; i < grads.x.size(); ++i) CHECK(grads.x[i] == 0.0f);
  for (std::size_t i = 0; i < grads.weights.size(); ++i) CHECK(grads.weights[i] == 0.0f);
  for (std::size_t i = 0; i < grads.bias.size(); ++i) CHECK(grads.bias[i] == 0.0f);

  // Unit gradient at one output pixel: grad_W is the input window under
  // the kernel for that pixel.
  Tensor g = Tensor::zeros({1, 2, 5, 5});
  g.at(0, 1, 2, 2) = 1.0f;
  grads = conv2d_backward(x, p, g);
  for (int r = 0; r < 2; ++r)
    for (int u = 0; u < 3; ++u)
      for (int v = 0; v < 3; ++v) {
        const int iy = 2 + u - 1, ix = 2 + v - 1;
        const float expect = x.at(0, r, iy, ix);
        CHECK(grads.weights.at(1, r, u, v) == doctest::Approx(expect));
        CHECK(grads.weights.at(0, r, u, v) == 0.0f);
      }
  CHECK(grads.bias[1] == 1.0f);
  CHECK(grads.bias[0] == 0.0f);
}

TEST_CASE("conv2d_backward matches finite differences") {
  const struct {
    int stride, dilation;
  } configs[] = {{1, 1}, {1, 2}, {2, 1}};
  for (const auto& cfg : configs) {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      Rng rng(1000 + seed);
      Tensor64 x = random_tensor<double>({1, 2, 5, 5}, rng);
      auto p = random_conv<double>(2, 2, 3, 3, cfg.stride, cfg.dilation, rng);
      Tensor64 probe_out = conv2d_forward(x, p);
      Tensor64 w = random_tensor<double>(probe_out.shape(), rng);
      auto loss = [&]() { return weighted_sum(conv2d_forward(x, p), w); };
      auto grads = conv2d_backward(x, p, w);

      auto rx = check_gradient(x, grads.x, loss);
      CHECK_MESSAGE(rx.ok, "grad_x rel err " << rx.max_rel_err);
      auto rw = check_gradient(p.weights, grads.weights, loss);
      CHECK_MESSAGE(rw.ok, "grad_w rel err " << rw.max_rel_err);
      auto rb = check_gradient(p.bias, grads.bias, loss);
      CHECK_MESSAGE(rb.ok, "grad_b rel err " << rb.max_rel_err);
    }
  }
}

TEST_CASE("deconv2d shape: 4x4x256 in, 21 filters -> 8x8x21") {
  Rng rng(4);
  Tensor x = random_tensor<float>({1, 256, 4, 4}, rng);
  ConvParams p{random_tensor<float>({256, 21, 3, 3}, rng), Tensor::zeros({21}), 2, 1, -1, -1};
  Tensor out = deconv2d_forward(x, p);
  CHECK(out.shape() == std::vector<int>{1, 21, 8, 8});
}

TEST_CASE("deconv2d is the adjoint of stride-2 conv2d") {
  Rng rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    // conv: (1,3,8,8) -> (1,4,4,4); deconv with the same kernels maps back.
    Tensor x = random_tensor<float>({1, 3, 8, 8}, rng);
    Tensor y = random_tensor<float>({1, 4, 4, 4}, rng);
    Tensor w = random_tensor<float>({4, 3, 3, 3}, rng);
    ConvParams conv_p{w, Tensor::zeros({4}), 2, 1, -1, -1};
    ConvParams deconv_p{w, Tensor::zeros({3}), 2, 1, -1, -1};
    Tensor cx = conv2d_forward(x, conv_p);
    Tensor dy = deconv2d_forward(y, deconv_p);
    double lhs = 0.0, rhs = 0.0;
    for (std::size_t i = 0; i < cx.size(); ++i) lhs += cx[i] * y[i];
    for (std::size_t i = 0; i < dy.size(); ++i) rhs += dy[i] * x[i];
    CHECK(close_rel(lhs, rhs, 1e-5));
  }
}

TEST_CASE("deconv2d impulse response stamps the kernel") {
  Tensor x = Tensor::zeros({1, 1, 4, 4});
  x.at(0, 0, 1, 2) = 1.0f;
  Tensor w({1, 1, 3, 3});
  for (int i = 0; i < 9; ++i) w[static_cast<std::size_t>(i)] = static_cast<float>(i + 1);
  ConvParams p{w, Tensor::zeros({1}), 2, 1, -1, -1};
  Tensor out = deconv2d_forward(x, p);
  REQUIRE(out.shape() == std::vector<int>{1, 1, 8, 8});
  // Output pixel (2h+u, 2w+v) receives W[u,v] from an impulse at (h,w).
  float total = 0.0f;
  for (std::size_t i = 0; i < out.size(); ++i) total += out[i];
  for (int u = 0; u < 3; ++u)
    for (int v = 0; v < 3; ++v) {
      const int oy = 2 * 1 + u, ox = 2 * 2 + v;
      if (oy < 8 && ox < 8) CHECK(out.at(0, 0, oy, ox) == w.at(0, 0, u, v));
    }
  CHECK(total == doctest::Approx(1 + 2 + 3 + 4 + 5 + 6 + 7 + 8 + 9));
}

TEST_CASE("deconv2d_backward: grad_x equals conv2d_forward of grad_out") {
  Rng rng(6);
  Tensor x = random_tensor<float>({2, 3, 4, 4}, rng);
  ConvParams p{random_tensor<float>({3, 2, 3, 3}, rng), random_tensor<float>({2}, rng), 2,
               1, -1, -1};
  Tensor g = random_tensor<float>({2, 2, 8, 8}, rng);
  auto grads = deconv2d_backward(x, p, g);
  ConvParams as_conv{p.weights, Tensor::zeros({3}), 2, 1, -1, -1};
  Tensor expect = conv2d_forward(g, as_conv);
  REQUIRE(grads.x.shape() == expect.shape());
  for (std::size_t i = 0; i < expect.size(); ++i)
    CHECK(grads.x[i] == doctest::Approx(expect[i]));

  Tensor zero = Tensor::zeros({2, 2, 8, 8});
  auto zgrads = deconv2d_backward(x, p, zero);
  for (std::size_t i = 0; i < zgrads.weights.size(); ++i) CHECK(zgrads.weights[i] == 0.0f);
}

TEST_CASE("deconv2d_backward matches finite differences") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    Rng rng(2000 + seed);
    Tensor64 x = random_tensor<double>({1, 2, 3, 3}, rng);
    ConvParamsT<double> p{random_tensor<double>({2, 3, 3, 3}, rng),
                          random_tensor<double>({3}, rng), 2, 1, -1, -1};
    Tensor64 w = random_tensor<double>({1, 3, 6, 6}, rng);
    auto loss = [&]() { return weighted_sum(deconv2d_forward(x, p), w); };
    auto grads = deconv2d_backward(x, p, w);
    CHECK(check_gradient(x, grads.x, loss).ok);
    CHECK(check_gradient(p.weights, grads.weights, loss).ok);
    CHECK(check_gradient(p.bias, grads.bias, loss).ok);
  }
}

TEST_CASE("deconv2d rejects unsupported geometry") {
  Rng rng(7);
  Tensor x = random_tensor<float>({1, 2, 4, 4}, rng);
  ConvParams p{random_tensor<float>({2, 2, 3, 3}, rng), Tensor::zeros({2}), 1, 1, -1, -1};
  CHECK_THROWS_AS(deconv2d_forward(x, p), std::invalid_argument);
  p.stride = 2;
  p.dilation = 2;
  CHECK_THROWS_AS(deconv2d_forward(x, p), std::invalid_argument);
}

TEST_CASE("maxpool2x2 basics") {
  Tensor x({1, 1, 2, 2}, {1.0f, 2.0f, 3.0f, 4.0f});
  auto [out, idx] = maxpool2x2_forward(x);
  REQUIRE(out.shape() == std::vector<int>{1, 1, 1, 1});
  CHECK(out[0] == 4.0f);
  CHECK(idx[0] == 3);

  // Ties break to the first element in row-major window order.
  Tensor flat = Tensor::full({1, 1, 4, 4}, 2.5f);
  auto [cout, cidx] = maxpool2x2_forward(flat);
  for (std::size_t i = 0; i < cout.size(); ++i) CHECK(cout[i] == 2.5f);
  CHECK(cidx[0] == 0);
  CHECK(cidx[1] == 2);
  CHECK(cidx[2] == 8);

  Tensor odd = Tensor::zeros({1, 1, 3, 4});
  CHECK_THROWS_AS(maxpool2x2_forward(odd), std::invalid_argument);
}

TEST_CASE("maxpool2x2 table geometry 64x64x32 -> 32x32x32") {
  Rng rng(8);
  Tensor x = random_tensor<float>({1, 32, 64, 64}, rng);
  auto [out, idx] = maxpool2x2_forward(x);
  CHECK(out.shape() == std::vector<int>{1, 32, 32, 32});
}

TEST_CASE("maxpool2x2_backward routes to argmax positions") {
  Rng rng(9);
  Tensor x = random_tensor<float>({1, 2, 6, 6}, rng);
  auto [out, idx] = maxpool2x2_forward(x);
  Tensor ones = Tensor::ones(out.shape());
  Tensor gx = maxpool2x2_backward(idx, x.shape(), ones);
  float per_channel[2] = {0.0f, 0.0f};
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 36; ++i)
      per_channel[c] += gx[static_cast<std::size_t>(c * 36 + i)];
  CHECK(per_channel[0] == 9.0f);
  CHECK(per_channel[1] == 9.0f);

  Tensor zero = Tensor::zeros(out.shape());
  Tensor gz = maxpool2x2_backward(idx, x.shape(), zero);
  for (std::size_t i = 0; i < gz.size(); ++i) CHECK(gz[i] == 0.0f);
}

TEST_CASE("maxpool2x2_backward matches finite differences on tie-free input") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    Rng rng(3000 + seed);
    Tensor64 x = random_tensor<double>({1, 2, 4, 4}, rng);
    Tensor64 w = random_tensor<double>({1, 2, 2, 2}, rng);
    auto loss = [&]() {
      auto [out, idx] = maxpool2x2_forward(x);
      return weighted_sum(out, w);
    };
    auto [out, idx] = maxpool2x2_forward(x);
    Tensor64 gx = maxpool2x2_backward(idx, x.shape(), w);
    CHECK(check_gradient(x, gx, loss).ok);
  }
}

TEST_CASE("batchnorm train mode normalizes per channel") {
  Rng rng(10);
  Tensor x = random_tensor<float>({4, 3, 5, 5}, rng, -3.0, 7.0);
  BatchNormParams p{Tensor::ones({3}), Tensor::zeros({3}), Tensor::zeros({3}),
                    Tensor::ones({3}), 0.9f, 1e-5f};
  Tensor y = batchnorm_forward(x, p, BnMode::train);
  auto [m, v] = mean_and_var(y, {0, 2, 3});
  for (int c = 0; c < 3; ++c) {
    CHECK(std::abs(m[static_cast<std::size_t>(c)]) < 1e-5f);
    CHECK(std::abs(v[static_cast<std::size_t>(c)] - 1.0f) < 1e-4f);
  }

  // Affine law: gamma=2, beta=3 shifts the normalized output.
  BatchNormParams p2{Tensor::full({3}, 2.0f), Tensor::full({3}, 3.0f), Tensor::zeros({3}),
                     Tensor::ones({3}), 0.9f, 1e-5f};
  Tensor y2 = batchnorm_forward(x, p2, BnMode::train);
  auto [m2, v2] = mean_and_var(y2, {0, 2, 3});
  for (int c = 0; c < 3; ++c) {
    CHECK(m2[static_cast<std::size_t>(c)] == doctest::Approx(3.0).epsilon(1e-3));
    CHECK(v2[static_cast<std::size_t>(c)] == doctest::Approx(4.0).epsilon(1e-3));
  }
}

TEST_CASE("batchnorm infer mode with unit running stats is the identity") {
  Rng rng(11);
  Tensor x = random_tensor<float>({2, 3, 4, 4}, rng);
  BatchNormParams p{Tensor::ones({3}), Tensor::zeros({3}), Tensor::zeros({3}),
                    Tensor::ones({3}), 0.9f, 1e-5f};
  Tensor y = batchnorm_forward(x, p, BnMode::infer);
  for (std::size_t i = 0; i < x.size(); ++i)
    CHECK(y[i] == doctest::Approx(x[i]).epsilon(1e-4));
}

TEST_CASE("batchnorm train mode updates running statistics") {
  Rng rng(12);
  Tensor x = random_tensor<float>({8, 2, 4, 4}, rng, 1.0, 3.0);
  BatchNormParams p{Tensor::ones({2}), Tensor::zeros({2}), Tensor::zeros({2}),
                    Tensor::ones({2}), 0.9f, 1e-5f};
  auto [bm, bv] = mean_and_var(x, {0, 2, 3});
  batchnorm_forward(x, p, BnMode::train);
  for (int c = 0; c < 2; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    CHECK(p.running_mean[ci] == doctest::Approx(0.1f * bm[ci]).epsilon(1e-3));
    CHECK(p.running_var[ci] == doctest::Approx(0.9f + 0.1f * bv[ci]).epsilon(1e-3));
  }
}

TEST_CASE("batchnorm_backward basics and finite differences") {
  Rng rng(13);
  Tensor x = random_tensor<float>({2, 3, 4, 4}, rng);
  BatchNormParams p{random_tensor<float>({3}, rng, 0.5, 1.5),
                    random_tensor<float>({3}, rng), Tensor::zeros({3}), Tensor::ones({3}),
                    0.9f, 1e-5f};
  Tensor zero = Tensor::zeros(x.shape());
  auto zg = batchnorm_backward(x, p, zero);
  for (std::size_t i = 0; i < zg.x.size(); ++i) CHECK(zg.x[i] == 0.0f);

  Tensor g = random_tensor<float>(x.shape(), rng);
  auto grads = batchnorm_backward(x, p, g);
  Tensor expected_beta = reduce_sum(g, {0, 2, 3});
  for (int c = 0; c < 3; ++c)
    CHECK(grads.beta[static_cast<std::size_t>(c)] ==
          doctest::Approx(expected_beta[static_cast<std::size_t>(c)]).epsilon(1e-4));

  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng drng(4000 + seed);
    Tensor64 dx = random_tensor<double>({2, 2, 3, 3}, drng);
    BatchNormParamsT<double> dp{random_tensor<double>({2}, drng, 0.5, 1.5),
                                random_tensor<double>({2}, drng),
                                Tensor64::zeros({2}),
                                Tensor64::ones({2}),
                                0.9,
                                1e-5};
    Tensor64 w = random_tensor<double>(dx.shape(), drng);
    auto loss = [&]() {
      BatchNormParamsT<double> scratch = dp;
      return weighted_sum(batchnorm_forward(dx, scratch, BnMode::train), w);
    };
    auto grads64 = batchnorm_backward(dx, dp, w);
    CHECK(check_gradient(dx, grads64.x, loss).ok);
    CHECK(check_gradient(dp.gamma, grads64.gamma, loss).ok);
    CHECK(check_gradient(dp.beta, grads64.beta, loss).ok);
  }
}

TEST_CASE("relu forward, idempotence, gradient") {
  Tensor x({3}, {-3.0f, 0.0f, 2.0f});
  Tensor y = relu(x);
  CHECK(y[0] == 0.0f);
  CHECK(y[1] == 0.0f);
  CHECK(y[2] == 2.0f);

  Rng rng(14);
  Tensor r = random_tensor<float>({2, 3, 4, 4}, rng);
  Tensor once = relu(r);
  Tensor twice = relu(once);
  for (std::size_t i = 0; i < once.size(); ++i) CHECK(once[i] == twice[i]);

  // Gradient via finite differences on inputs bounded away from 0.
  Rng drng(15);
  Tensor64 dx({6});
  for (std::size_t i = 0; i < dx.size(); ++i) {
    const double v = drng.uniform(0.2, 1.5);
    dx[i] = (i % 2 == 0) ? v : -v;
  }
  Tensor64 w = random_tensor<double>({6}, drng);
  auto loss = [&]() { return weighted_sum(relu(dx), w); };
  Tensor64 gx = relu_backward(dx, w);
  CHECK(check_gradient(dx, gx, loss).ok);
  CHECK(relu_backward(Tensor64({1}, {0.0}), Tensor64({1}, {5.0}))[0] == 0.0);
}

TEST_CASE("sigmoid symmetry and gradient") {
  Tensor x({1}, {0.0f});
  CHECK(sigmoid(x)[0] == doctest::Approx(0.5));

  Rng rng(16);
  Tensor r = random_tensor<float>({128}, rng, -6.0, 6.0);
  Tensor pos = sigmoid(r);
  Tensor neg = sigmoid(scale(r, -1.0f));
  for (std::size_t i = 0; i < r.size(); ++i) {
    CHECK(std::abs(pos[i] + neg[i] - 1.0f) < 1e-6f);
    CHECK(pos[i] > 0.0f);
    CHECK(pos[i] < 1.0f);
  }

  Rng drng(17);
  Tensor64 dx = random_tensor<double>({8}, drng, -3.0, 3.0);
  Tensor64 w = random_tensor<double>({8}, drng);
  auto loss = [&]() { return weighted_sum(sigmoid(dx), w); };
  Tensor64 out = sigmoid(dx);
  Tensor64 gx = sigmoid_backward(out, w);
  CHECK(check_gradient(dx, gx, loss).ok);
}

TEST_CASE("receptive field growth through the dilated stack") {
  // Impulse through successive 3x3 convs with d = 1, 2, 4: the response
  // widens to 3, 7, 15 pixels. A single conv's response spans the
  // effective extent (k-1)*d + 1.
  const int n = 33, mid = 16;
  auto span_of = [&](const Tensor& t) {
    int lo = n, hi = -1;
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x)
        if (std::abs(t.at(0, 0, y, x)) > 1e-12f) {
          lo = std::min(lo, y);
          hi = std::max(hi, y);
        }
    return hi - lo + 1;
  };
  Tensor delta = Tensor::zeros({1, 1, n, n});
  delta.at(0, 0, mid, mid) = 1.0f;
  ConvParams ones{Tensor::ones({1, 1, 3, 3}), Tensor::zeros({1}), 1, 1, -1, -1};

  Tensor stage1 = conv2d_forward(delta, ones);
  CHECK(span_of(stage1) == 3);
  ConvParams d2 = ones;
  d2.dilation = 2;
  Tensor stage2 = conv2d_forward(stage1, d2);
  CHECK(span_of(stage2) == 7);
  ConvParams d4 = ones;
  d4.dilation = 4;
  Tensor stage3 = conv2d_forward(stage2, d4);
  CHECK(span_of(stage3) == 15);

  // Individual kernels: extents 3, 5, 9 with 3 taps along each axis.
  CHECK(span_of(conv2d_forward(delta, d2)) == 5);
  CHECK(span_of(conv2d_forward(delta, d4)) == 9);
}
