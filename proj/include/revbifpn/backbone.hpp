#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "revbifpn/coupling.hpp"
#include "revbifpn/engine.hpp"

namespace revbifpn {

struct BackboneConfig {
  std::array<int, 4> channels{48, 64, 80, 160};  // c_0..c_3 before width scaling
  double width_multiplier = 1.0;
  int extra_depth = 2;  // fusion silos after the three expansion silos
  int height = 224;
  int width = 224;
  int in_channels = 3;
  int num_classes = 1000;
  StreamProfile profile;
  // Neck output channels before width scaling; zero means "derive from channels"
  // using the 48/64/128/320 over 48/64/80/160 proportions.
  std::array<int, 4> neck_channels{0, 0, 0, 0};
  int head_channels = 0;  // 0 = 2 * scaled neck c_3

  // c_i * m_w rounded to the nearest positive multiple of 16.
  [[nodiscard]] std::array<int, 4> scaled_channels() const;
  [[nodiscard]] std::array<int, 4> scaled_neck_channels() const;
  [[nodiscard]] int scaled_head_channels() const;
  // Throws ConfigError: h, w divisible by 32; channels positive; stem capacity.
  void validate() const;

  static BackboneConfig s0();
  // 16 channels per level on 1-channel 64x64 images.
  static BackboneConfig toy();
};

int round_to_multiple_of_16(double channels);

// Stem + (residual stage, expanding silo) x 3 + (residual stage, silo) x d.
template <typename T>
std::unique_ptr<Tape<T>> build_backbone(const BackboneConfig& config, BackwardMode mode, Rng& rng);

template <typename T>
struct HeadCache {
  std::vector<MBConvCache<T>> neck;
  std::vector<MBConvCache<T>> down;
  Tensor<T> final_in;
  Tensor<T> final_conv_out;
  NormCache<T> final_norm;
  Tensor<T> final_pre_act;
  Tensor<T> pooled;
  std::vector<Shape> input_shapes;
  Shape final_shape;

  [[nodiscard]] std::size_t bytes() const;
};

// Non-reversible neck + classification head. One MBConv per level as the neck,
// then a cascade of stride-2 MBConvs added into the next level down to the
// lowest resolution, a 1x1 conv (BN, hard-swish), global average pooling and a
// dense layer.
template <typename T>
class ClassificationHead {
 public:
  ClassificationHead(std::span<const int> pyramid_channels, std::span<const int> neck_channels,
                     int head_channels, int num_classes, const StreamProfile& profile, Rng& rng);

  Tensor<T> forward(const FeaturePyramid<T>& p, const ForwardContext& ctx, HeadCache<T>* cache);
  FeaturePyramid<T> backward(const HeadCache<T>& cache, const Tensor<T>& grad_logits);

  [[nodiscard]] std::uint64_t macs(const std::vector<Shape>& in) const;
  [[nodiscard]] std::size_t param_count() const;
  void collect(std::vector<ParamRef<T>>& out, const std::string& prefix);

  Dense<T>& classifier() { return dense_; }
  [[nodiscard]] int num_classes() const { return num_classes_; }

 private:
  std::vector<MBConv<T>> neck_;
  std::vector<MBConv<T>> down_;
  Conv2d<T> final_conv_;
  BatchNorm<T> final_norm_;
  Dense<T> dense_;
  int num_classes_;
};

template <typename T>
struct StepResult {
  T loss = T(0);
  double grad_norm = 0.0;
  std::uint64_t fwd_evals_forward = 0;
  std::uint64_t fwd_evals_backward = 0;
  std::size_t peak_activation_bytes = 0;
};

template <typename T>
class Model {
 public:
  Model(const BackboneConfig& config, BackwardMode mode, std::uint64_t seed);

  Tape<T>& tape() { return *tape_; }
  ClassificationHead<T>& head() { return *head_; }
  [[nodiscard]] const BackboneConfig& config() const { return config_; }

  FeaturePyramid<T> features(const Tensor<T>& images, std::uint64_t invocation = 0);
  Tensor<T> logits(const Tensor<T>& images, std::uint64_t invocation = 0);
  // Loss only, no gradients and no registry traffic.
  T loss(const Tensor<T>& images, std::span<const int> labels, std::uint64_t invocation = 0);
  // Full forward + backward. Zeroes and then fills parameter gradients; the
  // result carries the op counters and the peak activation bytes of the step.
  StepResult<T> loss_and_grad(const Tensor<T>& images, std::span<const int> labels,
                              std::uint64_t invocation);

  std::vector<ParamRef<T>> parameters();
  [[nodiscard]] std::uint64_t backbone_macs(int batch) const;
  [[nodiscard]] std::uint64_t head_macs(int batch) const;
  [[nodiscard]] std::size_t backbone_params() const;
  [[nodiscard]] std::size_t head_params() const;

 private:
  BackboneConfig config_;
  std::unique_ptr<Tape<T>> tape_;
  std::unique_ptr<ClassificationHead<T>> head_;
};

// Gaussian class prototypes; samples are prototype + noise, labelled by their
// nearest prototype, so the classes are linearly separable.
template <typename T>
struct SyntheticDataset {
  Tensor<T> images;  // (count, c, h, w)
  std::vector<int> labels;

  [[nodiscard]] int size() const { return images.shape().n; }
  // Batch `index` of size `batch`, wrapping around the dataset.
  [[nodiscard]] std::pair<Tensor<T>, std::vector<int>> batch(int index, int batch) const;
};

struct DatasetSpec {
  int count = 64;
  int classes = 4;
  int channels = 1;
  int height = 64;
  int width = 64;
  double noise = 0.5;
};

template <typename T>
SyntheticDataset<T> make_synthetic_dataset(const DatasetSpec& spec, std::uint64_t seed);

struct TrainOptions {
  int steps = 50;
  int batch = 8;
  double learning_rate = 0.05;
  double momentum = 0.9;
};

struct TrainStepRecord {
  int step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  std::uint64_t fwd_evals_forward = 0;
  std::uint64_t fwd_evals_backward = 0;
  std::size_t peak_activation_bytes = 0;
};

struct TrainRecord {
  BackwardMode mode = BackwardMode::kStored;
  std::vector<TrainStepRecord> steps;
};

// SGD with momentum on softmax cross-entropy. Deterministic given `seed`.
// Throws NumericError naming the step when the loss is not finite.
template <typename T>
TrainRecord train_toy(const BackboneConfig& config, const SyntheticDataset<T>& data,
                      BackwardMode mode, const TrainOptions& options, std::uint64_t seed);

}  // namespace revbifpn
