#include "revbifpn/transform.hpp"

#include <cstdlib>

namespace revbifpn {

namespace {

template <typename T>
struct MBConvTransformCache final : TransformCache {
  MBConvCache<T> inner;
  [[nodiscard]] std::size_t bytes() const override { return inner.bytes(); }
};

template <typename T>
struct ScaleCache final : TransformCache {
  Tensor<T> input;
  [[nodiscard]] std::size_t bytes() const override { return input.bytes(); }
};

}  // namespace

template <typename T>
Tensor<T> MBConvTransform<T>::forward(const Tensor<T>& x, const ForwardContext& ctx,
                                      std::unique_ptr<TransformCache>* cache) {
  if (cache == nullptr) return block_.forward(x, ctx, nullptr);
  auto c = std::make_unique<MBConvTransformCache<T>>();
  Tensor<T> y = block_.forward(x, ctx, &c->inner);
  *cache = std::move(c);
  return y;
}

template <typename T>
Tensor<T> MBConvTransform<T>::backward(const TransformCache& cache, const Tensor<T>& grad_out) {
  return block_.backward(dynamic_cast<const MBConvTransformCache<T>&>(cache).inner, grad_out);
}

template <typename T>
Tensor<T> ScaleTransform<T>::forward(const Tensor<T>& x, const ForwardContext&,
                                     std::unique_ptr<TransformCache>* cache) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = scale_ * x[i];
  if (cache != nullptr) {
    auto c = std::make_unique<ScaleCache<T>>();
    c->input = x;
    *cache = std::move(c);
  }
  return y;
}

template <typename T>
Tensor<T> ScaleTransform<T>::backward(const TransformCache& cache, const Tensor<T>& grad_out) {
  const auto& x = dynamic_cast<const ScaleCache<T>&>(cache).input;
  Tensor<T> gx(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    gx[i] = scale_ * grad_out[i];
    grad_ += x[i] * grad_out[i];
  }
  return gx;
}

template <typename T>
void ScaleTransform<T>::collect(std::vector<ParamRef<T>>& out, const std::string& prefix) {
  out.push_back({prefix + ".scale", Shape{1, 1, 1, 1}, std::span<T>(&scale_, 1),
                 std::span<T>(&grad_, 1)});
}

int StreamProfile::expansion_at(int level) const {
  if (level < 0 || level >= static_cast<int>(expansion.size())) {
    throw ConfigError("StreamProfile: no expansion ratio for level " + std::to_string(level));
  }
  return expansion[static_cast<std::size_t>(level)];
}

double StreamProfile::se_at(int level) const {
  if (level < 0 || level >= static_cast<int>(se_ratio.size())) return 0.0;
  return se_ratio[static_cast<std::size_t>(level)];
}

MBConvSpec make_resample_transform(int src, int dst, int src_c, int dst_c,
                                   const StreamProfile& profile) {
  const int k = std::abs(dst - src);
  if (src < 0 || dst < 0 || k < 1 || k > 3) {
    throw ConfigError("make_resample_transform: invalid level pair " + std::to_string(src) +
                      " -> " + std::to_string(dst) + " (|src - dst| must be 1..3)");
  }
  if (profile.down_kernel_sign != 1 && profile.down_kernel_sign != -1) {
    throw ConfigError("make_resample_transform: down_kernel_sign must be +1 or -1");
  }
  MBConvSpec s;
  s.in_c = src_c;
  s.out_c = dst_c;
  s.expansion = profile.expansion_at(src);
  s.se_ratio = profile.se_at(src);
  if (dst > src) {
    const int factor = 1 << k;
    s.stride = factor;
    s.kernel = 2 * factor + profile.down_kernel_sign;
    // With kernel 2^{k+1}+1 this padding keeps out = in / 2^k exactly; the -1
    // variant needs one less.
    s.padding = profile.down_kernel_sign > 0 ? factor : factor - 1;
  } else {
    s.stride = 1;
    s.kernel = profile.up_kernel;
    s.padding = profile.up_kernel / 2;
    s.upsample = 1 << k;
  }
  s.validate();
  return s;
}

MBConvSpec make_residual_transform(int level, int in_c, int out_c, const StreamProfile& profile) {
  MBConvSpec s;
  s.in_c = in_c;
  s.out_c = out_c;
  s.expansion = profile.expansion_at(level);
  s.se_ratio = profile.se_at(level);
  s.kernel = 3;
  s.stride = 1;
  s.padding = 1;
  s.validate();
  return s;
}

template class MBConvTransform<float>;
template class MBConvTransform<double>;
template class ScaleTransform<float>;
template class ScaleTransform<double>;

}  // namespace revbifpn
