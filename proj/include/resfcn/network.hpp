#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "resfcn/blocks.hpp"

namespace resfcn {

// Architecture knobs. The defaults are the full trunk; tests use scaled
// down widths for differentiation checks.
struct NetworkConfig {
  int k = 9;               // GCN kernel size, one of {5, 7, 9}
  int score_channels = 21; // decoder score-map channels
  int in_channels = 3;     // DWI, ADC, T2WI
  int entry_filters = 32;
  std::array<int, 4> stage_n = {64, 128, 256, 512};

  bool operator==(const NetworkConfig&) const = default;
};

// One named parameter tensor. grad is null for running statistics,
// which are saved in checkpoints but not touched by the optimizer.
// l2 marks convolution/deconvolution kernels, the only tensors the
// kernel regularizer applies to.
template <typename T>
struct ParamEntry {
  std::string name;
  TensorT<T>* value = nullptr;
  TensorT<T>* grad = nullptr;
  bool l2 = false;
};

template <typename T>
struct NetworkT {
  NetworkConfig config;

  AtrousStackParamsT<T> entry;
  std::vector<ResStageParamsT<T>> stages;  // four stages

  GcnParamsT<T> gcn_top;    // on stage-4 output
  BrParamsT<T> br_top;
  LearnedConvT<T> deconv1, deconv2, deconv3, deconv4;
  GcnParamsT<T> gcn_tap2;   // stage-2 output, 8x8
  BrParamsT<T> br_tap2, br_fuse1;
  GcnParamsT<T> gcn_tap1;   // stage-1 output, 16x16
  BrParamsT<T> br_tap1, br_fuse2;
  GcnParamsT<T> gcn_tap0;   // pooled entry features, 32x32
  BrParamsT<T> br_tap0, br_fuse3;
  BrParamsT<T> br_final;
  LearnedConvT<T> head;     // 1x1 conv to a single channel
};

using Network = NetworkT<float>;

// Saved forward intermediates for one backward pass, plus the recorded
// shape chain of the trunk.
template <typename T>
struct NetTapeT {
  AtrousStackCacheT<T> entry;
  std::vector<std::uint32_t> pool_idx;
  std::vector<int> pool_in_shape;
  TensorT<T> pool_out;
  std::vector<ResStageCacheT<T>> stages;
  TensorT<T> stage_out[4];

  GcnCacheT<T> gcn_top;
  BrCacheT<T> br_top;
  TensorT<T> deconv_in[4];
  GcnCacheT<T> gcn_tap2, gcn_tap1, gcn_tap0;
  BrCacheT<T> br_tap2, br_tap1, br_tap0;
  BrCacheT<T> br_fuse1, br_fuse2, br_fuse3, br_final;
  TensorT<T> head_in;
  TensorT<T> prob;

  std::vector<std::pair<std::string, std::vector<int>>> shapes;
};

template <typename T>
NetworkT<T> build_resfcn(const NetworkConfig& config, Rng& rng);

// Convenience overload matching the paper trunk.
template <typename T>
NetworkT<T> build_resfcn(int k, Rng& rng) {
  NetworkConfig config;
  config.k = k;
  return build_resfcn<T>(config, rng);
}

// Probability map in (0,1), shape (B, 1, H, W). Train mode uses batch
// statistics (and a tape enables a later backward); infer mode uses the
// running statistics.
template <typename T>
TensorT<T> forward(NetworkT<T>& net, const TensorT<T>& x, BnMode mode,
                   NetTapeT<T>* tape = nullptr);

// Accumulates parameter gradients for the train-mode forward recorded
// in the tape; grad_prob is dLoss/dProbability.
template <typename T>
void backward(NetworkT<T>& net, const NetTapeT<T>& tape, const TensorT<T>& grad_prob);

// Walks every parameter in a fixed order. Entries point into the
// network, so collect again after copying or moving it.
template <typename T>
std::vector<ParamEntry<T>> collect_params(NetworkT<T>& net);

template <typename T>
void zero_grads(NetworkT<T>& net);

// Number of learned scalars (excludes running statistics).
template <typename T>
std::size_t parameter_count(NetworkT<T>& net);

// FNV-1a over the config and the ordered tensor names and shapes.
template <typename T>
std::uint64_t architecture_hash(NetworkT<T>& net);

// Per-epoch training record; embedded in checkpoint manifests and
// emitted as the history CSV.
struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double learning_rate = 0.0;
};

// Checkpoint file: one magic line, the manifest byte count, a JSON
// manifest (config, architecture hash, tensor directory, history), then
// the raw little-endian float32 blobs in directory order. See
// docs/checkpoint_format.md.
void save_checkpoint(NetworkT<float>& net, const std::string& path,
                     const std::vector<EpochStats>* history = nullptr);

struct LoadedCheckpoint {
  NetworkT<float> net;
  std::vector<EpochStats> history;
};

LoadedCheckpoint load_checkpoint(const std::string& path,
                                 std::optional<int> expect_k = std::nullopt);

}  // namespace resfcn
