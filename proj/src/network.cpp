#include "resfcn/network.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace resfcn {

namespace {

constexpr const char* kCheckpointMagic = "RESFCN-CKPT v1";

bool valid_k(int k) { return k == 5 || k == 7 || k == 9; }

}  // namespace

template <typename T>
NetworkT<T> build_resfcn(const NetworkConfig& config, Rng& rng) {
  require(valid_k(config.k), "build_resfcn: unsupported GCN kernel size");
  require(config.score_channels >= 1 && config.entry_filters >= 1 &&
              config.in_channels >= 1,
          "build_resfcn: bad config");

  NetworkT<T> net;
  net.config = config;
  const int c = config.score_channels;

  net.entry = make_atrous_stack<T>(config.in_channels, config.entry_filters, rng);

  int channels = config.entry_filters;
  for (int stage = 1; stage <= 4; ++stage) {
    net.stages.push_back(make_res_stage<T>(
        stage, channels, config.stage_n[static_cast<std::size_t>(stage - 1)], rng));
    channels = 4 * config.stage_n[static_cast<std::size_t>(stage - 1)];
  }
  const int s1_out = 4 * config.stage_n[0];
  const int s2_out = 4 * config.stage_n[1];
  const int s4_out = 4 * config.stage_n[3];

  const GcnSpec gcn{config.k, c};
  net.gcn_top = make_gcn<T>(gcn, s4_out, rng);
  net.br_top = make_br<T>(c, rng);
  net.deconv1 = make_deconv<T>(c, c, 3, 3, rng);
  net.gcn_tap2 = make_gcn<T>(gcn, s2_out, rng);
  net.br_tap2 = make_br<T>(c, rng);
  net.br_fuse1 = make_br<T>(c, rng);
  net.deconv2 = make_deconv<T>(c, c, 3, 3, rng);
  net.gcn_tap1 = make_gcn<T>(gcn, s1_out, rng);
  net.br_tap1 = make_br<T>(c, rng);
  net.br_fuse2 = make_br<T>(c, rng);
  net.deconv3 = make_deconv<T>(c, c, 3, 3, rng);
  net.gcn_tap0 = make_gcn<T>(gcn, config.entry_filters, rng);
  net.br_tap0 = make_br<T>(c, rng);
  net.br_fuse3 = make_br<T>(c, rng);
  net.deconv4 = make_deconv<T>(c, c, 3, 3, rng);
  net.br_final = make_br<T>(c, rng);
  net.head = make_conv<T>(1, c, 1, 1, 1, 1, rng);
  return net;
}

template <typename T>
TensorT<T> forward(NetworkT<T>& net, const TensorT<T>& x, BnMode mode,
                   NetTapeT<T>* tape) {
  require(x.rank() == 4 && x.dim(1) == net.config.in_channels,
          "forward: input must be (batch, in_channels, H, W)");
  auto record = [&](const char* name, const TensorT<T>& t) {
    if (tape) tape->shapes.emplace_back(name, t.shape());
  };
  if (tape) tape->shapes.clear();
  record("input", x);

  // Encoder.
  TensorT<T> entry_out =
      atrous_stack_forward(x, net.entry, mode, tape ? &tape->entry : nullptr);
  record("conv_block", entry_out);

  auto [pool_out, pool_idx] = maxpool2x2_forward(entry_out);
  record("max_pool", pool_out);
  if (tape) {
    tape->pool_idx = std::move(pool_idx);
    tape->pool_in_shape = entry_out.shape();
    tape->pool_out = pool_out;
    tape->stages.assign(4, ResStageCacheT<T>{});
  }

  static const char* stage_names[4] = {"res_block1", "res_block2", "res_block3",
                                       "res_block4"};
  TensorT<T> stage_out[4];
  TensorT<T> cur = pool_out;
  for (int i = 0; i < 4; ++i) {
    cur = res_stage_forward(cur, net.stages[static_cast<std::size_t>(i)], mode,
                            tape ? &tape->stages[static_cast<std::size_t>(i)] : nullptr);
    record(stage_names[i], cur);
    stage_out[i] = cur;
    if (tape) tape->stage_out[i] = cur;
  }

  // Decoder: each encoder tap goes through GCN + BR; fusion is addition
  // of the upsampled score map and the tap, followed by another BR.
  TensorT<T> top = gcn_forward(stage_out[3], net.gcn_top, tape ? &tape->gcn_top : nullptr);
  top = br_forward(top, net.br_top, tape ? &tape->br_top : nullptr);
  if (tape) tape->deconv_in[0] = top;
  TensorT<T> up = deconv2d_forward(top, net.deconv1.p);
  record("deconv1", up);

  TensorT<T> tap = gcn_forward(stage_out[1], net.gcn_tap2, tape ? &tape->gcn_tap2 : nullptr);
  tap = br_forward(tap, net.br_tap2, tape ? &tape->br_tap2 : nullptr);
  TensorT<T> fused = elementwise_add(up, tap);
  fused = br_forward(fused, net.br_fuse1, tape ? &tape->br_fuse1 : nullptr);
  if (tape) tape->deconv_in[1] = fused;
  up = deconv2d_forward(fused, net.deconv2.p);
  record("deconv2", up);

  tap = gcn_forward(stage_out[0], net.gcn_tap1, tape ? &tape->gcn_tap1 : nullptr);
  tap = br_forward(tap, net.br_tap1, tape ? &tape->br_tap1 : nullptr);
  fused = elementwise_add(up, tap);
  fused = br_forward(fused, net.br_fuse2, tape ? &tape->br_fuse2 : nullptr);
  if (tape) tape->deconv_in[2] = fused;
  up = deconv2d_forward(fused, net.deconv3.p);
  record("deconv3", up);

  tap = gcn_forward(pool_out, net.gcn_tap0, tape ? &tape->gcn_tap0 : nullptr);
  tap = br_forward(tap, net.br_tap0, tape ? &tape->br_tap0 : nullptr);
  fused = elementwise_add(up, tap);
  fused = br_forward(fused, net.br_fuse3, tape ? &tape->br_fuse3 : nullptr);
  if (tape) tape->deconv_in[3] = fused;
  up = deconv2d_forward(fused, net.deconv4.p);
  record("deconv4", up);

  TensorT<T> refined = br_forward(up, net.br_final, tape ? &tape->br_final : nullptr);
  if (tape) tape->head_in = refined;
  TensorT<T> logits = conv2d_forward(refined, net.head.p);
  record("conv_head", logits);
  TensorT<T> prob = sigmoid(logits);
  if (tape) tape->prob = prob;
  return prob;
}

namespace {

template <typename T>
TensorT<T> deconv_backward_acc(LearnedConvT<T>& conv, const TensorT<T>& x,
                               const TensorT<T>& grad_out) {
  auto grads = deconv2d_backward(x, conv.p, grad_out);
  add_inplace(conv.grad_weights, grads.weights);
  add_inplace(conv.grad_bias, grads.bias);
  return std::move(grads.x);
}

}  // namespace

template <typename T>
void backward(NetworkT<T>& net, const NetTapeT<T>& tape, const TensorT<T>& grad_prob) {
  require(grad_prob.same_shape(tape.prob), "backward: grad shape mismatch");

  // Head.
  TensorT<T> grad = sigmoid_backward(tape.prob, grad_prob);
  {
    auto head_grads = conv2d_backward(tape.head_in, net.head.p, grad);
    add_inplace(net.head.grad_weights, head_grads.weights);
    add_inplace(net.head.grad_bias, head_grads.bias);
    grad = std::move(head_grads.x);
  }
  grad = br_backward(net.br_final, tape.br_final, grad);

  // Deconv4 and the pool-tap fusion.
  grad = deconv_backward_acc(net.deconv4, tape.deconv_in[3], grad);
  grad = br_backward(net.br_fuse3, tape.br_fuse3, grad);
  TensorT<T> grad_tap = br_backward(net.br_tap0, tape.br_tap0, grad);
  TensorT<T> grad_pool = gcn_backward(net.gcn_tap0, tape.gcn_tap0, grad_tap);

  // Deconv3 and the stage-1 tap fusion.
  grad = deconv_backward_acc(net.deconv3, tape.deconv_in[2], grad);
  grad = br_backward(net.br_fuse2, tape.br_fuse2, grad);
  grad_tap = br_backward(net.br_tap1, tape.br_tap1, grad);
  TensorT<T> grad_s1 = gcn_backward(net.gcn_tap1, tape.gcn_tap1, grad_tap);

  // Deconv2 and the stage-2 tap fusion.
  grad = deconv_backward_acc(net.deconv2, tape.deconv_in[1], grad);
  grad = br_backward(net.br_fuse1, tape.br_fuse1, grad);
  grad_tap = br_backward(net.br_tap2, tape.br_tap2, grad);
  TensorT<T> grad_s2 = gcn_backward(net.gcn_tap2, tape.gcn_tap2, grad_tap);

  // Deconv1 and the stage-4 head of the decoder.
  grad = deconv_backward_acc(net.deconv1, tape.deconv_in[0], grad);
  grad = br_backward(net.br_top, tape.br_top, grad);
  TensorT<T> grad_s4 = gcn_backward(net.gcn_top, tape.gcn_top, grad);

  // Encoder, joining the tap gradients where the forward branched.
  grad = res_stage_backward(net.stages[3], tape.stages[3], grad_s4);
  grad = res_stage_backward(net.stages[2], tape.stages[2], grad);
  add_inplace(grad, grad_s2);
  grad = res_stage_backward(net.stages[1], tape.stages[1], grad);
  add_inplace(grad, grad_s1);
  grad = res_stage_backward(net.stages[0], tape.stages[0], grad);
  add_inplace(grad, grad_pool);

  grad = maxpool2x2_backward(tape.pool_idx, tape.pool_in_shape, grad);
  atrous_stack_backward(net.entry, tape.entry, grad);
}

namespace {

template <typename T>
class ParamWalker {
public:
  explicit ParamWalker(std::vector<ParamEntry<T>>& out) : out_(out) {}

  void conv(const std::string& name, LearnedConvT<T>& c) {
    out_.push_back({name + ".weights", &c.p.weights, &c.grad_weights, true});
    out_.push_back({name + ".bias", &c.p.bias, &c.grad_bias, false});
  }
  void bn(const std::string& name, LearnedBnT<T>& b) {
    out_.push_back({name + ".gamma", &b.p.gamma, &b.grad_gamma, false});
    out_.push_back({name + ".beta", &b.p.beta, &b.grad_beta, false});
    out_.push_back({name + ".running_mean", &b.p.running_mean, nullptr, false});
    out_.push_back({name + ".running_var", &b.p.running_var, nullptr, false});
  }
  void conv_bn(const std::string& name, ConvBnT<T>& cb) {
    conv(name + ".conv", cb.conv);
    bn(name + ".bn", cb.bn);
  }
  void gcn(const std::string& name, GcnParamsT<T>& g) {
    conv(name + ".a1", g.a1);
    conv(name + ".a2", g.a2);
    conv(name + ".b1", g.b1);
    conv(name + ".b2", g.b2);
  }
  void br(const std::string& name, BrParamsT<T>& b) {
    conv(name + ".conv1", b.conv1);
    conv(name + ".conv2", b.conv2);
  }
  void bottleneck(const std::string& name, BottleneckParamsT<T>& b) {
    conv_bn(name + ".reduce", b.reduce);
    conv_bn(name + ".spatial", b.spatial);
    conv_bn(name + ".expand", b.expand);
    if (b.projection) conv_bn(name + ".projection", *b.projection);
  }

private:
  std::vector<ParamEntry<T>>& out_;
};

}  // namespace

template <typename T>
std::vector<ParamEntry<T>> collect_params(NetworkT<T>& net) {
  std::vector<ParamEntry<T>> entries;
  ParamWalker<T> walk(entries);
  for (int i = 0; i < 3; ++i)
    walk.conv_bn("entry.stage" + std::to_string(i),
                 net.entry.stages[static_cast<std::size_t>(i)]);
  for (int s = 0; s < 4; ++s) {
    auto& stage = net.stages[static_cast<std::size_t>(s)];
    for (std::size_t b = 0; b < stage.blocks.size(); ++b)
      walk.bottleneck("stage" + std::to_string(s + 1) + ".block" + std::to_string(b),
                      stage.blocks[b]);
  }
  walk.gcn("decoder.gcn_top", net.gcn_top);
  walk.br("decoder.br_top", net.br_top);
  walk.conv("decoder.deconv1", net.deconv1);
  walk.gcn("decoder.gcn_tap2", net.gcn_tap2);
  walk.br("decoder.br_tap2", net.br_tap2);
  walk.br("decoder.br_fuse1", net.br_fuse1);
  walk.conv("decoder.deconv2", net.deconv2);
  walk.gcn("decoder.gcn_tap1", net.gcn_tap1);
  walk.br("decoder.br_tap1", net.br_tap1);
  walk.br("decoder.br_fuse2", net.br_fuse2);
  walk.conv("decoder.deconv3", net.deconv3);
  walk.gcn("decoder.gcn_tap0", net.gcn_tap0);
  walk.br("decoder.br_tap0", net.br_tap0);
  walk.br("decoder.br_fuse3", net.br_fuse3);
  walk.conv("decoder.deconv4", net.deconv4);
  walk.br("decoder.br_final", net.br_final);
  walk.conv("decoder.head", net.head);
  return entries;
}

template <typename T>
void zero_grads(NetworkT<T>& net) {
  for (auto& entry : collect_params(net)) {
    if (!entry.grad) continue;
    std::fill(entry.grad->values().begin(), entry.grad->values().end(), T(0));
  }
}

template <typename T>
std::size_t parameter_count(NetworkT<T>& net) {
  std::size_t count = 0;
  for (auto& entry : collect_params(net))
    if (entry.grad) count += entry.value->size();
  return count;
}

namespace {

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t hash = 1469598103934665603ull;
  for (unsigned char ch : text) {
    hash ^= ch;
    hash *= 1099511628211ull;
  }
  return hash;
}

template <typename T>
std::string architecture_signature(NetworkT<T>& net) {
  std::ostringstream sig;
  sig << "k=" << net.config.k << ";c=" << net.config.score_channels
      << ";in=" << net.config.in_channels << ";entry=" << net.config.entry_filters
      << ";n=" << net.config.stage_n[0] << "," << net.config.stage_n[1] << ","
      << net.config.stage_n[2] << "," << net.config.stage_n[3] << ";";
  for (auto& entry : collect_params(net)) {
    sig << entry.name << "(";
    for (int d : entry.value->shape()) sig << d << ",";
    sig << ");";
  }
  return sig.str();
}

}  // namespace

template <typename T>
std::uint64_t architecture_hash(NetworkT<T>& net) {
  return fnv1a(architecture_signature(net));
}

void save_checkpoint(NetworkT<float>& net, const std::string& path,
                     const std::vector<EpochStats>* history) {
  auto entries = collect_params(net);

  nlohmann::json manifest;
  manifest["format"] = "resfcn-checkpoint";
  manifest["version"] = 1;
  manifest["k"] = net.config.k;
  manifest["score_channels"] = net.config.score_channels;
  manifest["in_channels"] = net.config.in_channels;
  manifest["entry_filters"] = net.config.entry_filters;
  manifest["stage_n"] = net.config.stage_n;
  std::ostringstream hash_hex;
  hash_hex << std::hex << architecture_hash(net);
  manifest["arch_hash"] = hash_hex.str();

  nlohmann::json tensors = nlohmann::json::array();
  for (auto& entry : entries)
    tensors.push_back({{"name", entry.name}, {"shape", entry.value->shape()}});
  manifest["tensors"] = std::move(tensors);

  if (history) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : *history)
      rows.push_back({{"epoch", row.epoch},
                      {"train_loss", row.train_loss},
                      {"val_loss", row.val_loss},
                      {"learning_rate", row.learning_rate}});
    manifest["history"] = std::move(rows);
  }

  const std::string body = manifest.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out << kCheckpointMagic << "\n" << body.size() << "\n" << body << "\n";
  for (auto& entry : entries) {
    static_assert(sizeof(float) == 4);
    out.write(reinterpret_cast<const char*>(entry.value->data()),
              static_cast<std::streamsize>(entry.value->size() * sizeof(float)));
  }
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path, std::optional<int> expect_k) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);

  std::string magic;
  std::getline(in, magic);
  if (magic != kCheckpointMagic)
    throw std::runtime_error("load_checkpoint: not a checkpoint file");
  std::string length_line;
  std::getline(in, length_line);
  const std::size_t body_size = std::stoull(length_line);
  std::string body(body_size, '\0');
  in.read(body.data(), static_cast<std::streamsize>(body_size));
  if (!in) throw std::runtime_error("load_checkpoint: truncated manifest");
  in.get();  // trailing newline

  const nlohmann::json manifest = nlohmann::json::parse(body);
  if (manifest.at("version").get<int>() != 1)
    throw std::runtime_error("load_checkpoint: unsupported version");

  NetworkConfig config;
  config.k = manifest.at("k").get<int>();
  config.score_channels = manifest.at("score_channels").get<int>();
  config.in_channels = manifest.at("in_channels").get<int>();
  config.entry_filters = manifest.at("entry_filters").get<int>();
  config.stage_n = manifest.at("stage_n").get<std::array<int, 4>>();
  if (expect_k && config.k != *expect_k)
    throw std::runtime_error("load_checkpoint: architecture mismatch (checkpoint k=" +
                             std::to_string(config.k) + ", expected k=" +
                             std::to_string(*expect_k) + ")");

  LoadedCheckpoint loaded;
  Rng dummy(0);
  loaded.net = build_resfcn<float>(config, dummy);
  auto entries = collect_params(loaded.net);

  const auto& tensors = manifest.at("tensors");
  if (tensors.size() != entries.size())
    throw std::runtime_error("load_checkpoint: architecture mismatch (tensor count)");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& meta = tensors[i];
    if (meta.at("name").get<std::string>() != entries[i].name ||
        meta.at("shape").get<std::vector<int>>() != entries[i].value->shape())
      throw std::runtime_error("load_checkpoint: architecture mismatch at " +
                               entries[i].name);
    in.read(reinterpret_cast<char*>(entries[i].value->data()),
            static_cast<std::streamsize>(entries[i].value->size() * sizeof(float)));
    if (!in)
      throw std::runtime_error("load_checkpoint: truncated blob for " + entries[i].name);
  }

  std::ostringstream hash_hex;
  hash_hex << std::hex << architecture_hash(loaded.net);
  if (manifest.at("arch_hash").get<std::string>() != hash_hex.str())
    throw std::runtime_error("load_checkpoint: architecture hash mismatch");

  if (manifest.contains("history")) {
    for (const auto& row : manifest.at("history")) {
      EpochStats stats;
      stats.epoch = row.at("epoch").get<int>();
      stats.train_loss = row.at("train_loss").get<double>();
      stats.val_loss = row.at("val_loss").get<double>();
      stats.learning_rate = row.at("learning_rate").get<double>();
      loaded.history.push_back(stats);
    }
  }
  return loaded;
}

#define RESFCN_INSTANTIATE_NETWORK(T)                                              \
  template NetworkT<T> build_resfcn(const NetworkConfig&, Rng&);                   \
  template TensorT<T> forward(NetworkT<T>&, const TensorT<T>&, BnMode,             \
                              NetTapeT<T>*);                                       \
  template void backward(NetworkT<T>&, const NetTapeT<T>&, const TensorT<T>&);     \
  template std::vector<ParamEntry<T>> collect_params(NetworkT<T>&);                \
  template void zero_grads(NetworkT<T>&);                                          \
  template std::size_t parameter_count(NetworkT<T>&);                              \
  template std::uint64_t architecture_hash(NetworkT<T>&);

RESFCN_INSTANTIATE_NETWORK(float)
RESFCN_INSTANTIATE_NETWORK(double)
#undef RESFCN_INSTANTIATE_NETWORK

}  // namespace resfcn
