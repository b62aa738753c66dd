#pragma once

// Single-view 2D encoder/decoder network with skip connections, trained with
// a smoothed Dice loss on the foreground probability.
//
// Architecture for `pool_stages` = L and `convs_per_block` = B:
//   encoder level l = 0..L-1 : B x (3x3 conv + ReLU) at width w[l], then 2x2 max-pool
//   bottleneck              : B x (3x3 conv + ReLU) at width w[L]
//   decoder level l = L-1..0: 2x nearest upsample, concat [upsampled, skip l],
//                             B x (3x3 conv + ReLU) at width w[l]
//   head                    : 1x1 conv to num_classes, softmax over classes
//
// Activations are stored channel-major over the whole batch (C x N x H x W) so
// every convolution is one GEMM per sample against an im2col buffer, and
// channel concatenation is plain row stacking.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mvseg/views.hpp"

namespace mvseg {

struct ModelConfig {
  std::array<std::size_t, 2> input_size{180, 180};  // (H, W)
  std::size_t in_channels = 1;
  std::size_t num_classes = 2;
  std::size_t pool_stages = 2;
  std::size_t convs_per_block = 3;
  std::vector<std::size_t> channel_widths{64, 128, 256};
  std::uint64_t seed = 0;

  /// Throws ConfigError: H, W divisible by 2^pool_stages, one width per
  /// resolution level, num_classes >= 2.
  void validate() const;

  /// 3x3 convolutions plus the final 1x1.
  std::size_t conv_layer_count() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& doc);
};

/// Named tensors stored back to back in one flat buffer.
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    std::vector<std::size_t> shape;
    std::size_t offset = 0;
    std::size_t count = 0;
  };

  std::size_t add(std::string name, std::vector<std::size_t> shape);

  const std::vector<Entry>& entries() const { return entries_; }
  const Entry& entry(const std::string& name) const;

  std::span<float> values() { return values_; }
  std::span<const float> values() const { return values_; }
  std::span<float> tensor(const Entry& e) { return values().subspan(e.offset, e.count); }
  std::span<const float> tensor(const Entry& e) const { return values().subspan(e.offset, e.count); }

  std::size_t size() const { return values_.size(); }

 private:
  std::vector<Entry> entries_;
  std::vector<float> values_;
};

struct ConvSpec {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;  // 3 (padding 1) or 1
  std::size_t weight = 0;  // entry indices into the parameter store
  std::size_t bias = 0;
  bool relu = true;
};

struct TrainedModel {
  ModelConfig config;
  ParameterStore params;
  std::vector<ConvSpec> convs;  // execution order; the head is last
  ViewAxis view = ViewAxis::axial;

  std::size_t param_count() const { return params.size(); }
};

/// Lay out the network for `cfg` and initialise weights with seeded He
/// fan-in normal draws (std = sqrt(2 / (k*k*c_in))); biases start at 0.
TrainedModel build_model(const ModelConfig& cfg, ViewAxis view = ViewAxis::axial);

/// Closed-form sum of k*k*c_in*c_out + c_out over all layers.
std::size_t expected_param_count(const ModelConfig& cfg);

/// Per-pixel class probabilities for a batch of H x W slices given in
/// row-major (N, H, W) order. Output is (N, H, W, num_classes).
std::vector<float> forward(const TrainedModel& model, std::span<const float> batch, std::size_t n);

/// Foreground-class probability only, (N, H, W).
std::vector<float> predict_foreground(const TrainedModel& model, std::span<const float> batch, std::size_t n);

/// Activations and scratch kept between a training forward and backward
/// pass. Reusable across batches of the same size.
class TrainingPass {
 public:
  explicit TrainingPass(const TrainedModel& model);
  ~TrainingPass();
  TrainingPass(const TrainingPass&) = delete;
  TrainingPass& operator=(const TrainingPass&) = delete;

  /// Runs the network; returns foreground probabilities (N, H, W).
  std::span<const float> forward(std::span<const float> batch, std::size_t n);

  /// Back-propagates d(loss)/d(foreground probability) and writes parameter
  /// gradients (same layout as the parameter store) into `grads`.
  void backward(std::span<const float> d_foreground, std::span<float> grads);

  /// Class probabilities of the last forward, class-major (C, N, H, W).
  std::span<const float> probabilities() const;

 private:
  struct State;
  const TrainedModel& model_;
  State* state_;
};

/// Smoothed Dice loss:
///   -(2 * sum(p * g) + s) / (sum(p) + sum(g) + s)
/// over all pixels of all slices. Throws ContractError on size mismatch or
/// s <= 0.
double dice_loss(std::span<const float> pred_fg, std::span<const float> gt, double smooth = 1.0);

/// Analytic gradient of dice_loss with respect to pred_fg.
void dice_loss_grad(std::span<const float> pred_fg, std::span<const float> gt, double smooth,
                    std::span<float> grad);

struct AdamConfig {
  float learning_rate = 2e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float epsilon = 1e-7f;
};

class AdamOptimizer {
 public:
  AdamOptimizer(std::size_t parameter_count, AdamConfig config);

  void step(std::span<float> params, std::span<const float> grads);
  long steps_taken() const { return t_; }

 private:
  AdamConfig config_;
  std::vector<float> m_;
  std::vector<float> v_;
  long t_ = 0;
};

/// Single-file checkpoint: magic, JSON header (config, view, tensor
/// directory), then little-endian float32 values.
void save_checkpoint(const TrainedModel& model, const std::filesystem::path& path);

/// Throws FormatError if the file is malformed or its stored parameter count
/// disagrees with the architecture the config describes.
TrainedModel load_checkpoint(const std::filesystem::path& path);

}  // namespace mvseg
