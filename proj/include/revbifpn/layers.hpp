#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "revbifpn/ops.hpp"

namespace revbifpn {

using Rng = std::mt19937_64;

// Mutable view of one named parameter and its gradient buffer.
template <typename T>
struct ParamRef {
  std::string name;
  Shape shape;
  std::span<T> value;
  std::span<T> grad;
};

template <typename T>
void zero_grads(std::span<const ParamRef<T>> params);

// Adds N(0, stddev) noise to every parameter value.
template <typename T>
void jitter_parameters(std::span<const ParamRef<T>> params, Rng& rng, double stddev);

enum class Phase { kForward, kBackward };

// Forward evaluations of F transforms, split by the pass that triggered them.
struct OpCounters {
  std::uint64_t forward_phase = 0;
  std::uint64_t backward_phase = 0;
  std::map<std::string, std::uint64_t> by_class;

  void record(Phase phase, const std::string& kernel_class);
  void reset() { *this = OpCounters{}; }
};

struct ForwardContext {
  std::uint64_t invocation = 0;  // forward-invocation identity seen by batch norm
  Phase phase = Phase::kForward;
  OpCounters* counters = nullptr;

  void count(const std::string& kernel_class) const {
    if (counters != nullptr) counters->record(phase, kernel_class);
  }
};

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  // Kaiming-normal weights (fan-in), zero bias.
  Conv2d(int in_c, int out_c, int kernel, int stride, int padding, int groups, bool bias,
         Rng& rng);

  [[nodiscard]] Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, params_); }
  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& grad_out);

  [[nodiscard]] Shape output_shape(const Shape& in) const { return conv_geometry(in, params_).out(); }
  [[nodiscard]] std::uint64_t macs(const Shape& in) const {
    return conv2d_macs(conv_geometry(in, params_));
  }
  [[nodiscard]] std::size_t param_count() const { return params_.weight.numel() + params_.bias.size(); }
  void collect(std::vector<ParamRef<T>>& out, const std::string& prefix);

  ConvParams<T>& params() { return params_; }
  [[nodiscard]] const ConvParams<T>& params() const { return params_; }

 private:
  ConvParams<T> params_;
  Tensor<T> grad_weight_;
  std::vector<T> grad_bias_;
};

template <typename T>
class BatchNorm {
 public:
  BatchNorm() = default;
  explicit BatchNorm(int channels, T gamma_init = T(1));

  Tensor<T> forward(const Tensor<T>& x, const ForwardContext& ctx, NormCache<T>* cache) {
    return batch_norm(x, state_, ctx.invocation, cache);
  }
  Tensor<T> backward(const NormCache<T>& cache, const Tensor<T>& grad_out) {
    return batch_norm_backward(cache, state_, grad_out, std::span<T>(grad_gamma_),
                               std::span<T>(grad_beta_));
  }
  [[nodiscard]] std::size_t param_count() const { return 2 * state_.gamma.size(); }
  void collect(std::vector<ParamRef<T>>& out, const std::string& prefix);

  NormState<T>& state() { return state_; }
  [[nodiscard]] const NormState<T>& state() const { return state_; }

 private:
  NormState<T> state_;
  std::vector<T> grad_gamma_;
  std::vector<T> grad_beta_;
};

template <typename T>
class SqueezeExcite {
 public:
  SqueezeExcite() = default;
  SqueezeExcite(int channels, double ratio, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x, SqueezeExciteCache<T>* cache) const {
    return squeeze_excite(x, params_, cache);
  }
  Tensor<T> backward(const SqueezeExciteCache<T>& cache, const Tensor<T>& grad_out) {
    return squeeze_excite_backward(cache, params_, grad_out, grads_);
  }
  [[nodiscard]] std::uint64_t macs(const Shape& in) const;
  [[nodiscard]] std::size_t param_count() const;
  void collect(std::vector<ParamRef<T>>& out, const std::string& prefix);

  SqueezeExciteParams<T>& params() { return params_; }

 private:
  SqueezeExciteParams<T> params_;
  SqueezeExciteGrads<T> grads_;
};

template <typename T>
class Dense {
 public:
  Dense() = default;
  Dense(int in, int out, Rng& rng);

  [[nodiscard]] Tensor<T> forward(const Tensor<T>& x) const {
    return dense(x, weight_, std::span<const T>(bias_));
  }
  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& grad_out) {
    return dense_backward(x, weight_, grad_out, grad_weight_, std::span<T>(grad_bias_));
  }
  [[nodiscard]] std::uint64_t macs(int batch) const {
    return static_cast<std::uint64_t>(batch) * weight_.numel();
  }
  [[nodiscard]] std::size_t param_count() const { return weight_.numel() + bias_.size(); }
  void collect(std::vector<ParamRef<T>>& out, const std::string& prefix);

  Tensor<T>& weight() { return weight_; }
  std::vector<T>& bias() { return bias_; }

 private:
  Tensor<T> weight_;
  std::vector<T> bias_;
  Tensor<T> grad_weight_;
  std::vector<T> grad_bias_;
};

// Inverted bottleneck: 1x1 expand -> BN -> hswish -> depthwise kxk (stride s)
// -> BN -> hswish -> [squeeze-excite] -> 1x1 project -> BN -> [bilinear upsample].
struct MBConvSpec {
  int in_c = 1;
  int out_c = 1;
  int expansion = 1;
  int kernel = 3;
  int stride = 1;
  int padding = 1;
  int upsample = 1;     // 1 = none, else bilinear factor 2/4/8
  double se_ratio = 0;  // 0 = no squeeze-excite
  bool zero_init_last_norm = true;

  [[nodiscard]] int hidden() const { return in_c * expansion; }
  void validate() const;
};

template <typename T>
struct MBConvCache {
  Tensor<T> input;
  NormCache<T> norm1;
  Tensor<T> pre_act1;
  Tensor<T> act1;
  NormCache<T> norm2;
  Tensor<T> pre_act2;
  std::optional<SqueezeExciteCache<T>> se;
  Tensor<T> project_in;
  NormCache<T> norm3;

  [[nodiscard]] std::size_t bytes() const;
};

template <typename T>
class MBConv {
 public:
  MBConv() = default;
  MBConv(const MBConvSpec& spec, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x, const ForwardContext& ctx, MBConvCache<T>* cache);
  // Accumulates parameter gradients; returns the input gradient.
  Tensor<T> backward(const MBConvCache<T>& cache, const Tensor<T>& grad_out);

  [[nodiscard]] Shape output_shape(const Shape& in) const;
  [[nodiscard]] std::uint64_t macs(const Shape& in) const;
  [[nodiscard]] std::size_t param_count() const;
  void collect(std::vector<ParamRef<T>>& out, const std::string& prefix);

  [[nodiscard]] const MBConvSpec& spec() const { return spec_; }
  BatchNorm<T>& last_norm() { return norm3_; }
  std::vector<BatchNorm<T>*> norms();

 private:
  MBConvSpec spec_;
  Conv2d<T> expand_;
  BatchNorm<T> norm1_;
  Conv2d<T> depthwise_;
  BatchNorm<T> norm2_;
  std::optional<SqueezeExcite<T>> se_;
  Conv2d<T> project_;
  BatchNorm<T> norm3_;
};

}  // namespace revbifpn
