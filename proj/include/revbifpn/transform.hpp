#pragma once

// F transforms used inside couplings. A transform is only ever evaluated
// forward; couplings invert by subtracting its output, never by inverting it.

#include <memory>
#include <string>
#include <vector>

#include "revbifpn/layers.hpp"

namespace revbifpn {

struct TransformCache {
  virtual ~TransformCache() = default;
  [[nodiscard]] virtual std::size_t bytes() const = 0;
};

template <typename T>
class Transform {
 public:
  virtual ~Transform() = default;

  // Fills *cache with what backward() needs when cache is non-null.
  virtual Tensor<T> forward(const Tensor<T>& x, const ForwardContext& ctx,
                            std::unique_ptr<TransformCache>* cache) = 0;
  // Accumulates parameter gradients; returns d loss / d x.
  virtual Tensor<T> backward(const TransformCache& cache, const Tensor<T>& grad_out) = 0;

  [[nodiscard]] virtual Shape output_shape(const Shape& in) const = 0;
  [[nodiscard]] virtual std::uint64_t macs(const Shape& in) const = 0;
  [[nodiscard]] virtual std::size_t param_count() const = 0;
  virtual void collect(std::vector<ParamRef<T>>& out, const std::string& prefix) = 0;
  // Batch-norm layers owned by the transform (empty when none).
  virtual std::vector<BatchNorm<T>*> norms() { return {}; }
};

template <typename T>
class MBConvTransform final : public Transform<T> {
 public:
  MBConvTransform(const MBConvSpec& spec, Rng& rng) : block_(spec, rng) {}

  Tensor<T> forward(const Tensor<T>& x, const ForwardContext& ctx,
                    std::unique_ptr<TransformCache>* cache) override;
  Tensor<T> backward(const TransformCache& cache, const Tensor<T>& grad_out) override;
  [[nodiscard]] Shape output_shape(const Shape& in) const override { return block_.output_shape(in); }
  [[nodiscard]] std::uint64_t macs(const Shape& in) const override { return block_.macs(in); }
  [[nodiscard]] std::size_t param_count() const override { return block_.param_count(); }
  void collect(std::vector<ParamRef<T>>& out, const std::string& prefix) override {
    block_.collect(out, prefix);
  }
  std::vector<BatchNorm<T>*> norms() override { return block_.norms(); }

  MBConv<T>& block() { return block_; }

 private:
  MBConv<T> block_;
};

// y = a * x with one scalar parameter a. Used to state couplings as explicit
// matrices in tests.
template <typename T>
class ScaleTransform final : public Transform<T> {
 public:
  explicit ScaleTransform(T scale) : scale_(scale) {}

  Tensor<T> forward(const Tensor<T>& x, const ForwardContext& ctx,
                    std::unique_ptr<TransformCache>* cache) override;
  Tensor<T> backward(const TransformCache& cache, const Tensor<T>& grad_out) override;
  [[nodiscard]] Shape output_shape(const Shape& in) const override { return in; }
  [[nodiscard]] std::uint64_t macs(const Shape& in) const override { return in.numel(); }
  [[nodiscard]] std::size_t param_count() const override { return 1; }
  void collect(std::vector<ParamRef<T>>& out, const std::string& prefix) override;

  [[nodiscard]] T scale() const { return scale_; }

 private:
  T scale_;
  T grad_ = T(0);
};

// Per-level MBConv internals: expansion ratio and squeeze-excite ratio.
struct StreamProfile {
  std::vector<int> expansion{1, 2, 3, 4};
  std::vector<double> se_ratio{0.25, 0.25, 0.0, 0.0};
  int down_kernel_sign = +1;  // depthwise kernel 2^{k+1} + sign
  int up_kernel = 3;

  [[nodiscard]] int expansion_at(int level) const;
  [[nodiscard]] double se_at(int level) const;
};

// MBConv spec that maps level `src` (channels src_c) to level `dst` (dst_c).
// Downsampling by 2^k: depthwise stride 2^k, kernel 2^{k+1}+1, padding 2^k.
// Upsampling by 2^k: depthwise stride 1, kernel 3, then bilinear x 2^k.
MBConvSpec make_resample_transform(int src, int dst, int src_c, int dst_c,
                                   const StreamProfile& profile = {});

// Same-resolution MBConv (stride 1, kernel 3) for reversible residual blocks.
MBConvSpec make_residual_transform(int level, int in_c, int out_c,
                                   const StreamProfile& profile = {});

}  // namespace revbifpn
