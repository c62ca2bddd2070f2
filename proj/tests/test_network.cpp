#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "resfcn/network.hpp"
#include "test_helpers.hpp"

using namespace resfcn;
using namespace resfcn::testing;

namespace {

NetworkConfig reduced_config() {
  NetworkConfig config;
  config.k = 5;
  config.score_channels = 5;
  config.entry_filters = 8;
  config.stage_n = {8, 16, 32, 64};
  return config;
}

template <typename T>
TensorT<T> random_input(int batch, int hw, Rng& rng) {
  return random_tensor<T>({batch, 3, hw, hw}, rng);
}

}  // namespace

TEST_CASE("forward shape chain matches the trunk table") {
  Rng rng(100);
  Network net = build_resfcn<float>(9, rng);
  Tensor x = random_input<float>(2, 64, rng);
  NetTapeT<float> tape;
  Tensor prob = forward(net, x, BnMode::infer, &tape);

  const std::vector<std::pair<std::string, std::vector<int>>> expected = {
      {"input", {2, 3, 64, 64}},        {"conv_block", {2, 32, 64, 64}},
      {"max_pool", {2, 32, 32, 32}},    {"res_block1", {2, 256, 16, 16}},
      {"res_block2", {2, 512, 8, 8}},   {"res_block3", {2, 1024, 4, 4}},
      {"res_block4", {2, 2048, 4, 4}},  {"deconv1", {2, 21, 8, 8}},
      {"deconv2", {2, 21, 16, 16}},     {"deconv3", {2, 21, 32, 32}},
      {"deconv4", {2, 21, 64, 64}},     {"conv_head", {2, 1, 64, 64}},
  };
  REQUIRE(tape.shapes.size() == expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) {
    CHECK(tape.shapes[i].first == expected[i].first);
    CHECK(tape.shapes[i].second == expected[i].second);
  }

  REQUIRE(prob.shape() == std::vector<int>{2, 1, 64, 64});
  for (std::size_t i = 0; i < prob.size(); ++i) {
    CHECK(prob[i] > 0.0f);
    CHECK(prob[i] < 1.0f);
  }
}

TEST_CASE("build_resfcn rejects unsupported k") {
  Rng rng(101);
  CHECK_THROWS_AS(build_resfcn<float>(3, rng), std::invalid_argument);
  CHECK_THROWS_AS(build_resfcn<float>(8, rng), std::invalid_argument);
}

TEST_CASE("same seed builds identical parameters") {
  NetworkConfig config = reduced_config();
  Rng a(777), b(777);
  Network na = build_resfcn<float>(config, a);
  Network nb = build_resfcn<float>(config, b);
  auto ea = collect_params(na);
  auto eb = collect_params(nb);
  REQUIRE(ea.size() == eb.size());
  for (std::size_t i = 0; i < ea.size(); ++i) {
    REQUIRE(ea[i].value->size() == eb[i].value->size());
    for (std::size_t j = 0; j < ea[i].value->size(); ++j)
      CHECK((*ea[i].value)[j] == (*eb[i].value)[j]);
  }
  CHECK(parameter_count(na) == parameter_count(nb));
  CHECK(architecture_hash(na) == architecture_hash(nb));
}

TEST_CASE("infer mode forward is deterministic") {
  Rng rng(102);
  Network net = build_resfcn<float>(reduced_config(), rng);
  Tensor x = random_input<float>(2, 16, rng);
  Tensor p1 = forward(net, x, BnMode::infer);
  Tensor p2 = forward(net, x, BnMode::infer);
  for (std::size_t i = 0; i < p1.size(); ++i) CHECK(p1[i] == p2[i]);

  Tensor bad = random_tensor<float>({1, 4, 16, 16}, rng);
  CHECK_THROWS_AS(forward(net, bad, BnMode::infer), std::invalid_argument);
}

TEST_CASE("untrained output mean stays near one half") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(9000 + seed);
    Network net = build_resfcn<float>(reduced_config(), rng);
    Tensor x = random_input<float>(2, 16, rng);
    Tensor prob = forward(net, x, BnMode::train);
    double mean = 0.0;
    for (std::size_t i = 0; i < prob.size(); ++i) mean += prob[i];
    mean /= static_cast<double>(prob.size());
    CHECK(std::abs(mean - 0.5) < 0.2);
  }
}

TEST_CASE("zero loss gradient yields zero parameter gradients") {
  Rng rng(103);
  Network net = build_resfcn<float>(reduced_config(), rng);
  Tensor x = random_input<float>(2, 16, rng);
  NetTapeT<float> tape;
  forward(net, x, BnMode::train, &tape);
  zero_grads(net);
  backward(net, tape, Tensor::zeros({2, 1, 16, 16}));
  for (auto& entry : collect_params(net)) {
    if (!entry.grad) continue;
    for (std::size_t i = 0; i < entry.grad->size(); ++i)
      CHECK((*entry.grad)[i] == 0.0f);
  }
}

TEST_CASE("gradient flows back to the atrous stack") {
  Rng rng(104);
  Network net = build_resfcn<float>(reduced_config(), rng);
  Tensor x = random_input<float>(2, 16, rng);
  NetTapeT<float> tape;
  forward(net, x, BnMode::train, &tape);
  zero_grads(net);
  Rng grng(105);
  backward(net, tape, random_tensor<float>({2, 1, 16, 16}, grng));
  double norm = 0.0;
  const auto& gw = net.entry.stages[0].conv.grad_weights;
  for (std::size_t i = 0; i < gw.size(); ++i) norm += static_cast<double>(gw[i]) * gw[i];
  CHECK(norm > 0.0);
}

TEST_CASE("full-network directional derivative matches finite differences") {
  for (std::uint64_t seed = 0; seed < 2; ++seed) {
    Rng rng(7000 + seed);
    NetworkT<double> net = build_resfcn<double>(reduced_config(), rng);
    TensorT<double> x = random_input<double>(2, 16, rng);
    TensorT<double> w = random_tensor<double>({2, 1, 16, 16}, rng);

    auto entries = collect_params(net);
    std::vector<Tensor64> direction;
    for (auto& entry : entries) {
      Tensor64 d(entry.value->shape());
      if (entry.grad)
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = rng.uniform(-1.0, 1.0);
      direction.push_back(std::move(d));
    }

    auto loss = [&]() {
      TensorT<double> prob = forward(net, x, BnMode::train);
      double total = 0.0;
      for (std::size_t i = 0; i < prob.size(); ++i) total += prob[i] * w[i];
      return total;
    };
    auto nudge = [&](double h) {
      for (std::size_t e = 0; e < entries.size(); ++e) {
        if (!entries[e].grad) continue;
        auto& value = *entries[e].value;
        for (std::size_t i = 0; i < value.size(); ++i) value[i] += h * direction[e][i];
      }
    };

    NetTapeT<double> tape;
    forward(net, x, BnMode::train, &tape);
    zero_grads(net);
    backward(net, tape, w);
    double analytic = 0.0;
    for (std::size_t e = 0; e < entries.size(); ++e) {
      if (!entries[e].grad) continue;
      const auto& grad = *entries[e].grad;
      for (std::size_t i = 0; i < grad.size(); ++i) analytic += grad[i] * direction[e][i];
    }

    const double h = 1e-5;
    nudge(+h);
    const double plus = loss();
    nudge(-2.0 * h);
    const double minus = loss();
    nudge(+h);
    const double numeric = (plus - minus) / (2.0 * h);
    CHECK(close_rel(analytic, numeric, 1e-3));
  }
}

TEST_CASE("checkpoint round-trip restores every parameter bitwise") {
  Rng rng(106);
  Network net = build_resfcn<float>(reduced_config(), rng);
  // Perturb running stats so the round-trip covers them too.
  forward(net, random_input<float>(2, 16, rng), BnMode::train);

  std::vector<EpochStats> history = {{1, -0.25, -0.20, 1e-3}, {2, -0.50, -0.45, 1e-3}};
  const std::string path = "test_ckpt_roundtrip.bin";
  save_checkpoint(net, path, &history);
  LoadedCheckpoint loaded = load_checkpoint(path);

  auto ea = collect_params(net);
  auto eb = collect_params(loaded.net);
  REQUIRE(ea.size() == eb.size());
  for (std::size_t i = 0; i < ea.size(); ++i)
    for (std::size_t j = 0; j < ea[i].value->size(); ++j)
      CHECK((*ea[i].value)[j] == (*eb[i].value)[j]);
  REQUIRE(loaded.history.size() == 2);
  CHECK(loaded.history[1].train_loss == -0.50);
  std::remove(path.c_str());
}

TEST_CASE("checkpoint load rejects mismatched k and truncated blobs") {
  Rng rng(107);
  NetworkConfig config = reduced_config();  // k = 5
  Network net = build_resfcn<float>(config, rng);
  const std::string path = "test_ckpt_mismatch.bin";
  save_checkpoint(net, path);

  CHECK_THROWS_WITH_AS(load_checkpoint(path, 9),
                       doctest::Contains("architecture mismatch"), std::runtime_error);

  // Truncate the final blob.
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 64));
  out.close();
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("truncated"),
                       std::runtime_error);

  std::remove(path.c_str());
  CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
}
