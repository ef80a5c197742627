#pragma once

// Tensor-core operations: pure functions over Tensor values plus their
// analytic backward passes. Layers (layers.hpp) bind these to parameters.

#include <cstdint>
#include <optional>
#include <vector>

#include "revbifpn/kernels.hpp"
#include "revbifpn/tensor.hpp"

namespace revbifpn {

template <typename T>
struct ConvParams {
  Tensor<T> weight;       // (out_c, in_c / groups, kh, kw)
  std::vector<T> bias;    // empty or length out_c
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

template <typename T>
kernels::ConvGeometry conv_geometry(const Shape& in, const ConvParams<T>& p);

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvParams<T>& p);

// Returns the input gradient and accumulates weight/bias gradients.
// `grad_bias` may be empty when the conv has no bias.
template <typename T>
Tensor<T> conv2d_backward(const Tensor<T>& x, const ConvParams<T>& p, const Tensor<T>& grad_out,
                          Tensor<T>& grad_weight, std::span<T> grad_bias);

// MAC count: out_elems * in_c_per_group * kh * kw.
std::uint64_t conv2d_macs(const kernels::ConvGeometry& g);

// factor must be 2, 4 or 8. Half-pixel sample centers, clamped at borders.
void check_upsample_factor(int factor);
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, int factor);
template <typename T>
Tensor<T> bilinear_upsample_backward(const Tensor<T>& grad_out, int factor);

// Output channel index = c * block^2 + dy * block + dx.
template <typename T>
Tensor<T> space_to_depth(const Tensor<T>& x, int block);
template <typename T>
Tensor<T> depth_to_space(const Tensor<T>& y, int block);

enum class Elementwise { kAdd, kSub, kMul };
template <typename T>
Tensor<T> elementwise(Elementwise op, const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b);
template <typename T>
void sub_inplace(Tensor<T>& a, const Tensor<T>& b);

template <typename T>
T hard_swish(T x);
template <typename T>
T hard_swish_derivative(T x);
template <typename T>
Tensor<T> hard_swish(const Tensor<T>& x);
template <typename T>
Tensor<T> hard_swish_backward(const Tensor<T>& x, const Tensor<T>& grad_out);

template <typename T>
T sigmoid(T x);

enum class NormMode { kTrain, kEval };

template <typename T>
struct NormState {
  std::vector<T> gamma;
  std::vector<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.9);
  T epsilon = T(1e-3);
  NormMode mode = NormMode::kTrain;
  // Invocation id of the last forward that updated the running statistics.
  std::optional<std::uint64_t> last_update;

  static NormState identity(int channels, T gamma_init = T(1));
  [[nodiscard]] int channels() const { return static_cast<int>(gamma.size()); }
};

template <typename T>
struct NormCache {
  Tensor<T> normalized;     // x_hat
  std::vector<T> inv_std;   // per channel
  NormMode mode = NormMode::kTrain;
};

// Train mode normalizes with batch statistics and folds them into the running
// statistics once per distinct `invocation`; a repeated invocation id (a
// recomputed forward of the same step) leaves the running statistics alone.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, NormState<T>& s, std::uint64_t invocation,
                     NormCache<T>* cache = nullptr);
template <typename T>
Tensor<T> batch_norm_backward(const NormCache<T>& cache, const NormState<T>& s,
                              const Tensor<T>& grad_out, std::span<T> grad_gamma,
                              std::span<T> grad_beta);

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);
template <typename T>
Tensor<T> global_avg_pool_backward(const Shape& in, const Tensor<T>& grad_out);

// x: (n, in, 1, 1); weight: (out, in, 1, 1); bias: length out.
template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& weight, std::span<const T> bias);
template <typename T>
Tensor<T> dense_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& grad_out,
                         Tensor<T>& grad_weight, std::span<T> grad_bias);

// Gating units = max(1, round(ratio * c)); ratio in (0, 1].
int squeeze_units(int channels, double ratio);

template <typename T>
struct SqueezeExciteParams {
  Tensor<T> reduce_w;       // (units, c, 1, 1)
  std::vector<T> reduce_b;  // units
  Tensor<T> expand_w;       // (c, units, 1, 1)
  std::vector<T> expand_b;  // c
};

template <typename T>
struct SqueezeExciteCache {
  Tensor<T> input;
  Tensor<T> pooled;
  Tensor<T> reduced;   // pre-activation
  Tensor<T> activated;
  Tensor<T> gate;      // (n, c, 1, 1)
  [[nodiscard]] std::size_t bytes() const {
    return input.bytes() + pooled.bytes() + reduced.bytes() + activated.bytes() + gate.bytes();
  }
};

template <typename T>
Tensor<T> squeeze_excite(const Tensor<T>& x, const SqueezeExciteParams<T>& p,
                         SqueezeExciteCache<T>* cache = nullptr);

template <typename T>
struct SqueezeExciteGrads {
  Tensor<T> reduce_w;
  std::vector<T> reduce_b;
  Tensor<T> expand_w;
  std::vector<T> expand_b;
};

template <typename T>
Tensor<T> squeeze_excite_backward(const SqueezeExciteCache<T>& cache,
                                  const SqueezeExciteParams<T>& p, const Tensor<T>& grad_out,
                                  SqueezeExciteGrads<T>& grads);

// Mean softmax cross-entropy over the batch. logits: (n, classes, 1, 1).
template <typename T>
T softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels,
                        Tensor<T>* grad_logits = nullptr);

}  // namespace revbifpn
