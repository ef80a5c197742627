#include "revbifpn/layers.hpp"

#include <cmath>

namespace revbifpn {

namespace {

template <typename T>
void kaiming_fill(std::span<T> values, int fan_in, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (T& v : values) v = static_cast<T>(dist(rng));
}

Shape vec_shape(std::size_t len) { return Shape{static_cast<int>(len), 1, 1, 1}; }

}  // namespace

template <typename T>
void zero_grads(std::span<const ParamRef<T>> params) {
  for (const auto& p : params) std::fill(p.grad.begin(), p.grad.end(), T(0));
}

template <typename T>
void jitter_parameters(std::span<const ParamRef<T>> params, Rng& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (const auto& p : params)
    for (T& v : p.value) v += static_cast<T>(dist(rng));
}

void OpCounters::record(Phase phase, const std::string& kernel_class) {
  if (phase == Phase::kForward) {
    ++forward_phase;
  } else {
    ++backward_phase;
  }
  ++by_class[kernel_class];
}

template <typename T>
Conv2d<T>::Conv2d(int in_c, int out_c, int kernel, int stride, int padding, int groups,
                  bool bias, Rng& rng) {
  if (groups < 1 || in_c % groups != 0 || out_c % groups != 0) {
    throw ConfigError("Conv2d: channels " + std::to_string(in_c) + "->" + std::to_string(out_c) +
                      " incompatible with groups " + std::to_string(groups));
  }
  params_.weight = Tensor<T>(Shape{out_c, in_c / groups, kernel, kernel});
  params_.stride = stride;
  params_.padding = padding;
  params_.groups = groups;
  kaiming_fill(params_.weight.data(), in_c / groups * kernel * kernel, rng);
  if (bias) params_.bias.assign(out_c, T(0));
  grad_weight_ = Tensor<T>(params_.weight.shape());
  grad_bias_.assign(params_.bias.size(), T(0));
}

template <typename T>
Tensor<T> Conv2d<T>::backward(const Tensor<T>& x, const Tensor<T>& grad_out) {
  return conv2d_backward(x, params_, grad_out, grad_weight_, std::span<T>(grad_bias_));
}

template <typename T>
void Conv2d<T>::collect(std::vector<ParamRef<T>>& out, const std::string& prefix) {
  out.push_back({prefix + ".weight", params_.weight.shape(), params_.weight.data(),
                 grad_weight_.data()});
  if (!params_.bias.empty()) {
    out.push_back({prefix + ".bias", vec_shape(params_.bias.size()), std::span<T>(params_.bias),
                   std::span<T>(grad_bias_)});
  }
}

template <typename T>
BatchNorm<T>::BatchNorm(int channels, T gamma_init)
    : state_(NormState<T>::identity(channels, gamma_init)),
      grad_gamma_(channels, T(0)),
      grad_beta_(channels, T(0)) {}

template <typename T>
void BatchNorm<T>::collect(std::vector<ParamRef<T>>& out, const std::string& prefix) {
  out.push_back({prefix + ".gamma", vec_shape(state_.gamma.size()), std::span<T>(state_.gamma),
                 std::span<T>(grad_gamma_)});
  out.push_back({prefix + ".beta", vec_shape(state_.beta.size()), std::span<T>(state_.beta),
                 std::span<T>(grad_beta_)});
}

template <typename T>
SqueezeExcite<T>::SqueezeExcite(int channels, double ratio, Rng& rng) {
  const int units = squeeze_units(channels, ratio);
  params_.reduce_w = Tensor<T>(Shape{units, channels, 1, 1});
  params_.reduce_b.assign(units, T(0));
  params_.expand_w = Tensor<T>(Shape{channels, units, 1, 1});
  params_.expand_b.assign(channels, T(0));
  kaiming_fill(params_.reduce_w.data(), channels, rng);
  kaiming_fill(params_.expand_w.data(), units, rng);
  grads_.reduce_w = Tensor<T>(params_.reduce_w.shape());
  grads_.reduce_b.assign(units, T(0));
  grads_.expand_w = Tensor<T>(params_.expand_w.shape());
  grads_.expand_b.assign(channels, T(0));
}

template <typename T>
std::uint64_t SqueezeExcite<T>::macs(const Shape& in) const {
  return static_cast<std::uint64_t>(in.n) *
         (params_.reduce_w.numel() + params_.expand_w.numel());
}

template <typename T>
std::size_t SqueezeExcite<T>::param_count() const {
  return params_.reduce_w.numel() + params_.reduce_b.size() + params_.expand_w.numel() +
         params_.expand_b.size();
}

template <typename T>
void SqueezeExcite<T>::collect(std::vector<ParamRef<T>>& out, const std::string& prefix) {
  out.push_back({prefix + ".reduce.weight", params_.reduce_w.shape(), params_.reduce_w.data(),
                 grads_.reduce_w.data()});
  out.push_back({prefix + ".reduce.bias", vec_shape(params_.reduce_b.size()),
                 std::span<T>(params_.reduce_b), std::span<T>(grads_.reduce_b)});
  out.push_back({prefix + ".expand.weight", params_.expand_w.shape(), params_.expand_w.data(),
                 grads_.expand_w.data()});
  out.push_back({prefix + ".expand.bias", vec_shape(params_.expand_b.size()),
                 std::span<T>(params_.expand_b), std::span<T>(grads_.expand_b)});
}

template <typename T>
Dense<T>::Dense(int in, int out, Rng& rng)
    : weight_(Shape{out, in, 1, 1}),
      bias_(out, T(0)),
      grad_weight_(Shape{out, in, 1, 1}),
      grad_bias_(out, T(0)) {
  kaiming_fill(weight_.data(), in, rng);
}

template <typename T>
void Dense<T>::collect(std::vector<ParamRef<T>>& out, const std::string& prefix) {
  out.push_back({prefix + ".weight", weight_.shape(), weight_.data(), grad_weight_.data()});
  out.push_back({prefix + ".bias", vec_shape(bias_.size()), std::span<T>(bias_),
                 std::span<T>(grad_bias_)});
}

void MBConvSpec::validate() const {
  if (in_c < 1 || out_c < 1 || expansion < 1) throw ConfigError("MBConv: non-positive channels");
  if (kernel < 1 || stride < 1 || padding < 0) throw ConfigError("MBConv: invalid depthwise geometry");
  if (upsample != 1) check_upsample_factor(upsample);
  if (upsample != 1 && stride != 1) throw ConfigError("MBConv: upsampling requires stride 1");
  if (se_ratio < 0.0 || se_ratio > 1.0) throw ConfigError("MBConv: se_ratio must be in [0, 1]");
}

template <typename T>
std::size_t MBConvCache<T>::bytes() const {
  std::size_t b = input.bytes() + norm1.normalized.bytes() + pre_act1.bytes() + act1.bytes() +
                  norm2.normalized.bytes() + pre_act2.bytes() +
                  project_in.bytes() + norm3.normalized.bytes();
  if (se) b += se->bytes();
  return b;
}

template <typename T>
MBConv<T>::MBConv(const MBConvSpec& spec, Rng& rng) : spec_(spec) {
  spec.validate();
  const int hidden = spec.hidden();
  expand_ = Conv2d<T>(spec.in_c, hidden, 1, 1, 0, 1, false, rng);
  norm1_ = BatchNorm<T>(hidden);
  depthwise_ = Conv2d<T>(hidden, hidden, spec.kernel, spec.stride, spec.padding, hidden, false, rng);
  norm2_ = BatchNorm<T>(hidden);
  if (spec.se_ratio > 0.0) se_.emplace(hidden, spec.se_ratio, rng);
  project_ = Conv2d<T>(hidden, spec.out_c, 1, 1, 0, 1, false, rng);
  norm3_ = BatchNorm<T>(spec.out_c, spec.zero_init_last_norm ? T(0) : T(1));
}

template <typename T>
Tensor<T> MBConv<T>::forward(const Tensor<T>& x, const ForwardContext& ctx,
                             MBConvCache<T>* cache) {
  NormCache<T> n1, n2, n3;
  Tensor<T> pre1 = norm1_.forward(expand_.forward(x), ctx, &n1);
  Tensor<T> act1 = hard_swish(pre1);
  Tensor<T> pre2 = norm2_.forward(depthwise_.forward(act1), ctx, &n2);
  Tensor<T> act2 = hard_swish(pre2);
  std::optional<SqueezeExciteCache<T>> se_cache;
  Tensor<T> project_in;
  if (se_) {
    se_cache.emplace();
    project_in = se_->forward(act2, &*se_cache);
  } else {
    project_in = act2;
  }
  Tensor<T> y = norm3_.forward(project_.forward(project_in), ctx, &n3);
  if (spec_.upsample != 1) y = bilinear_upsample(y, spec_.upsample);
  if (cache != nullptr) {
    cache->input = x;
    cache->norm1 = std::move(n1);
    cache->pre_act1 = std::move(pre1);
    cache->act1 = std::move(act1);
    cache->norm2 = std::move(n2);
    cache->pre_act2 = std::move(pre2);
    cache->se = std::move(se_cache);
    cache->project_in = std::move(project_in);
    cache->norm3 = std::move(n3);
  }
  return y;
}

template <typename T>
Tensor<T> MBConv<T>::backward(const MBConvCache<T>& cache, const Tensor<T>& grad_out) {
  Tensor<T> g = spec_.upsample != 1 ? bilinear_upsample_backward(grad_out, spec_.upsample) : grad_out;
  g = norm3_.backward(cache.norm3, g);
  g = project_.backward(cache.project_in, g);
  if (se_) g = se_->backward(*cache.se, g);
  g = hard_swish_backward(cache.pre_act2, g);
  g = norm2_.backward(cache.norm2, g);
  g = depthwise_.backward(cache.act1, g);
  g = hard_swish_backward(cache.pre_act1, g);
  g = norm1_.backward(cache.norm1, g);
  return expand_.backward(cache.input, g);
}

template <typename T>
Shape MBConv<T>::output_shape(const Shape& in) const {
  Shape s = depthwise_.output_shape(expand_.output_shape(in));
  s = project_.output_shape(s);
  s.h *= spec_.upsample;
  s.w *= spec_.upsample;
  return s;
}

template <typename T>
std::uint64_t MBConv<T>::macs(const Shape& in) const {
  const Shape e = expand_.output_shape(in);
  const Shape d = depthwise_.output_shape(e);
  std::uint64_t m = expand_.macs(in) + depthwise_.macs(e) + project_.macs(d);
  if (se_) m += se_->macs(d);
  return m;
}

template <typename T>
std::size_t MBConv<T>::param_count() const {
  std::size_t p = expand_.param_count() + norm1_.param_count() + depthwise_.param_count() +
                  norm2_.param_count() + project_.param_count() + norm3_.param_count();
  if (se_) p += se_->param_count();
  return p;
}

template <typename T>
void MBConv<T>::collect(std::vector<ParamRef<T>>& out, const std::string& prefix) {
  expand_.collect(out, prefix + ".expand");
  norm1_.collect(out, prefix + ".bn1");
  depthwise_.collect(out, prefix + ".dw");
  norm2_.collect(out, prefix + ".bn2");
  if (se_) se_->collect(out, prefix + ".se");
  project_.collect(out, prefix + ".project");
  norm3_.collect(out, prefix + ".bn3");
}

template <typename T>
std::vector<BatchNorm<T>*> MBConv<T>::norms() {
  return {&norm1_, &norm2_, &norm3_};
}

#define REVBIFPN_INSTANTIATE(T)                                                 \
  template void zero_grads(std::span<const ParamRef<T>>);                       \
  template void jitter_parameters(std::span<const ParamRef<T>>, Rng&, double);  \
  template class Conv2d<T>;                                                     \
  template class BatchNorm<T>;                                                  \
  template class SqueezeExcite<T>;                                              \
  template class Dense<T>;                                                      \
  template struct MBConvCache<T>;                                               \
  template class MBConv<T>;

REVBIFPN_INSTANTIATE(float)
REVBIFPN_INSTANTIATE(double)
#undef REVBIFPN_INSTANTIATE

}  // namespace revbifpn
