#include "revbifpn/ops.hpp"

#include <algorithm>
#include <cmath>

namespace revbifpn {

template <typename T>
kernels::ConvGeometry conv_geometry(const Shape& in, const ConvParams<T>& p) {
  const Shape& ws = p.weight.shape();
  kernels::ConvGeometry g{in, ws.n, ws.h, ws.w, p.stride, p.padding, p.groups};
  g.validate();
  if (ws.c * p.groups != in.c) {
    throw ConfigError("conv2d: weight expects " + std::to_string(ws.c * p.groups) +
                      " input channels (weight " + ws.str() + ", groups " +
                      std::to_string(p.groups) + "), input is " + in.str());
  }
  if (!p.bias.empty() && static_cast<int>(p.bias.size()) != ws.n) {
    throw ConfigError("conv2d: bias length " + std::to_string(p.bias.size()) +
                      " != out channels " + std::to_string(ws.n));
  }
  return g;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvParams<T>& p) {
  const auto g = conv_geometry(x.shape(), p);
  Tensor<T> y(g.out());
  kernels::conv2d_forward<T>(g, x.data(), p.weight.data(), std::span<const T>(p.bias), y.data());
  REVBIFPN_DEBUG_CHECK_FINITE(y, "conv2d");
  return y;
}

template <typename T>
Tensor<T> conv2d_backward(const Tensor<T>& x, const ConvParams<T>& p, const Tensor<T>& grad_out,
                          Tensor<T>& grad_weight, std::span<T> grad_bias) {
  const auto g = conv_geometry(x.shape(), p);
  if (grad_out.shape() != g.out()) {
    throw ConfigError("conv2d_backward: grad shape " + grad_out.shape().str() + " != " +
                      g.out().str());
  }
  require_same_shape(grad_weight, p.weight, "conv2d_backward weight grad");
  Tensor<T> gx(x.shape());
  kernels::conv2d_backward_input<T>(g, grad_out.data(), p.weight.data(), gx.data());
  kernels::conv2d_backward_weight<T>(g, x.data(), grad_out.data(), grad_weight.data(), grad_bias);
  return gx;
}

std::uint64_t conv2d_macs(const kernels::ConvGeometry& g) {
  return static_cast<std::uint64_t>(g.out().numel()) * g.in_per_group() * g.kh * g.kw;
}

void check_upsample_factor(int factor) {
  if (factor != 2 && factor != 4 && factor != 8) {
    throw ConfigError("bilinear_upsample: factor must be 2, 4 or 8, got " +
                      std::to_string(factor));
  }
}

template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, int factor) {
  check_upsample_factor(factor);
  const Shape& s = x.shape();
  Tensor<T> y(Shape{s.n, s.c, s.h * factor, s.w * factor});
  kernels::bilinear_upsample_forward<T>(s, factor, x.data(), y.data());
  return y;
}

template <typename T>
Tensor<T> bilinear_upsample_backward(const Tensor<T>& grad_out, int factor) {
  check_upsample_factor(factor);
  const Shape& s = grad_out.shape();
  if (s.h % factor != 0 || s.w % factor != 0) {
    throw ConfigError("bilinear_upsample_backward: grad " + s.str() + " not divisible by " +
                      std::to_string(factor));
  }
  const Shape in{s.n, s.c, s.h / factor, s.w / factor};
  Tensor<T> gx(in);
  kernels::bilinear_upsample_backward<T>(in, factor, grad_out.data(), gx.data());
  return gx;
}

template <typename T>
Tensor<T> space_to_depth(const Tensor<T>& x, int block) {
  const Shape& s = x.shape();
  if (block < 1 || s.h % block != 0 || s.w % block != 0) {
    throw ConfigError("space_to_depth: spatial dims of " + s.str() + " not divisible by block " +
                      std::to_string(block));
  }
  const int oh = s.h / block;
  const int ow = s.w / block;
  Tensor<T> y(Shape{s.n, s.c * block * block, oh, ow});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int dy = 0; dy < block; ++dy)
        for (int dx = 0; dx < block; ++dx) {
          const int oc = (c * block + dy) * block + dx;
          for (int i = 0; i < oh; ++i)
            for (int j = 0; j < ow; ++j) y.at(n, oc, i, j) = x.at(n, c, i * block + dy, j * block + dx);
        }
  return y;
}

template <typename T>
Tensor<T> depth_to_space(const Tensor<T>& y, int block) {
  const Shape& s = y.shape();
  if (block < 1 || s.c % (block * block) != 0) {
    throw ConfigError("depth_to_space: channels of " + s.str() + " not divisible by block^2 " +
                      std::to_string(block * block));
  }
  const int c_out = s.c / (block * block);
  Tensor<T> x(Shape{s.n, c_out, s.h * block, s.w * block});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < c_out; ++c)
      for (int dy = 0; dy < block; ++dy)
        for (int dx = 0; dx < block; ++dx) {
          const int ic = (c * block + dy) * block + dx;
          for (int i = 0; i < s.h; ++i)
            for (int j = 0; j < s.w; ++j) x.at(n, c, i * block + dy, j * block + dx) = y.at(n, ic, i, j);
        }
  return x;
}

template <typename T>
Tensor<T> elementwise(Elementwise op, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "elementwise");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) {
    switch (op) {
      case Elementwise::kAdd: out[i] = a[i] + b[i]; break;
      case Elementwise::kSub: out[i] = a[i] - b[i]; break;
      case Elementwise::kMul: out[i] = a[i] * b[i]; break;
    }
  }
  return out;
}

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  for (std::size_t i = 0; i < a.numel(); ++i) a[i] += b[i];
}

template <typename T>
void sub_inplace(Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  for (std::size_t i = 0; i < a.numel(); ++i) a[i] -= b[i];
}

template <typename T>
T hard_swish(T x) {
  return x * std::clamp(x + T(3), T(0), T(6)) / T(6);
}

// Right-continuous at the kinks x = -3 and x = 3.
template <typename T>
T hard_swish_derivative(T x) {
  if (x < T(-3)) return T(0);
  if (x >= T(3)) return T(1);
  return (T(2) * x + T(3)) / T(6);
}

template <typename T>
Tensor<T> hard_swish(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = hard_swish(x[i]);
  return y;
}

template <typename T>
Tensor<T> hard_swish_backward(const Tensor<T>& x, const Tensor<T>& grad_out) {
  require_same_shape(x, grad_out, "hard_swish_backward");
  Tensor<T> gx(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) gx[i] = grad_out[i] * hard_swish_derivative(x[i]);
  return gx;
}

template <typename T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
NormState<T> NormState<T>::identity(int channels, T gamma_init) {
  NormState<T> s;
  s.gamma.assign(channels, gamma_init);
  s.beta.assign(channels, T(0));
  s.running_mean.assign(channels, T(0));
  s.running_var.assign(channels, T(1));
  return s;
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, NormState<T>& s, std::uint64_t invocation,
                     NormCache<T>* cache) {
  const Shape& sh = x.shape();
  if (sh.c != s.channels()) {
    throw ConfigError("batch_norm: input " + sh.str() + " has " + std::to_string(sh.c) +
                      " channels, state has " + std::to_string(s.channels()));
  }
  if (!(s.epsilon > T(0))) throw ConfigError("batch_norm: epsilon must be positive");
  const std::size_t plane = sh.plane();
  const std::size_t count = static_cast<std::size_t>(sh.n) * plane;
  Tensor<T> xhat(sh);
  std::vector<T> inv_std(sh.c);
  const bool train = s.mode == NormMode::kTrain;
  const bool update = train && s.last_update != invocation;
  for (int c = 0; c < sh.c; ++c) {
    T mean;
    T var;
    if (train) {
      double sum = 0.0;
      for (int n = 0; n < sh.n; ++n) {
        const T* p = x.raw() + x.index(n, c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) sum += p[i];
      }
      const double m = sum / static_cast<double>(count);
      double sq = 0.0;
      for (int n = 0; n < sh.n; ++n) {
        const T* p = x.raw() + x.index(n, c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = p[i] - m;
          sq += d * d;
        }
      }
      const double v = sq / static_cast<double>(count);
      mean = static_cast<T>(m);
      var = static_cast<T>(v);
      if (update) {
        const double unbiased = count > 1 ? v * count / static_cast<double>(count - 1) : v;
        s.running_mean[c] = s.momentum * s.running_mean[c] + (T(1) - s.momentum) * mean;
        s.running_var[c] =
            s.momentum * s.running_var[c] + (T(1) - s.momentum) * static_cast<T>(unbiased);
      }
    } else {
      mean = s.running_mean[c];
      var = s.running_var[c];
    }
    inv_std[c] = T(1) / std::sqrt(var + s.epsilon);
    for (int n = 0; n < sh.n; ++n) {
      const T* p = x.raw() + x.index(n, c, 0, 0);
      T* q = xhat.raw() + xhat.index(n, c, 0, 0);
      for (std::size_t i = 0; i < plane; ++i) q[i] = (p[i] - mean) * inv_std[c];
    }
  }
  if (update) s.last_update = invocation;

  Tensor<T> y(sh);
  for (int n = 0; n < sh.n; ++n)
    for (int c = 0; c < sh.c; ++c) {
      const T* q = xhat.raw() + xhat.index(n, c, 0, 0);
      T* o = y.raw() + y.index(n, c, 0, 0);
      for (std::size_t i = 0; i < plane; ++i) o[i] = s.gamma[c] * q[i] + s.beta[c];
    }
  if (cache != nullptr) {
    cache->normalized = std::move(xhat);
    cache->inv_std = std::move(inv_std);
    cache->mode = s.mode;
  }
  REVBIFPN_DEBUG_CHECK_FINITE(y, "batch_norm");
  return y;
}

template <typename T>
Tensor<T> batch_norm_backward(const NormCache<T>& cache, const NormState<T>& s,
                              const Tensor<T>& grad_out, std::span<T> grad_gamma,
                              std::span<T> grad_beta) {
  const Tensor<T>& xhat = cache.normalized;
  require_same_shape(xhat, grad_out, "batch_norm_backward");
  const Shape& sh = xhat.shape();
  const std::size_t plane = sh.plane();
  const double count = static_cast<double>(sh.n) * plane;
  Tensor<T> gx(sh);
  for (int c = 0; c < sh.c; ++c) {
    double sum_g = 0.0;
    double sum_gx = 0.0;
    for (int n = 0; n < sh.n; ++n) {
      const T* g = grad_out.raw() + grad_out.index(n, c, 0, 0);
      const T* q = xhat.raw() + xhat.index(n, c, 0, 0);
      for (std::size_t i = 0; i < plane; ++i) {
        sum_g += g[i];
        sum_gx += static_cast<double>(g[i]) * q[i];
      }
    }
    grad_gamma[c] += static_cast<T>(sum_gx);
    grad_beta[c] += static_cast<T>(sum_g);
    const T scale = s.gamma[c] * cache.inv_std[c];
    const T mean_g = static_cast<T>(sum_g / count);
    const T mean_gx = static_cast<T>(sum_gx / count);
    for (int n = 0; n < sh.n; ++n) {
      const T* g = grad_out.raw() + grad_out.index(n, c, 0, 0);
      const T* q = xhat.raw() + xhat.index(n, c, 0, 0);
      T* o = gx.raw() + gx.index(n, c, 0, 0);
      if (cache.mode == NormMode::kTrain) {
        for (std::size_t i = 0; i < plane; ++i) o[i] = scale * (g[i] - mean_g - q[i] * mean_gx);
      } else {
        for (std::size_t i = 0; i < plane; ++i) o[i] = scale * g[i];
      }
    }
  }
  return gx;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const Shape& s = x.shape();
  Tensor<T> y(Shape{s.n, s.c, 1, 1});
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* p = x.raw() + x.index(n, c, 0, 0);
      double sum = 0.0;
      for (std::size_t i = 0; i < plane; ++i) sum += p[i];
      y.at(n, c, 0, 0) = static_cast<T>(sum / static_cast<double>(plane));
    }
  return y;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Shape& in, const Tensor<T>& grad_out) {
  Tensor<T> gx(in);
  const std::size_t plane = in.plane();
  const T inv = T(1) / static_cast<T>(plane);
  for (int n = 0; n < in.n; ++n)
    for (int c = 0; c < in.c; ++c) {
      const T g = grad_out.at(n, c, 0, 0) * inv;
      T* p = gx.raw() + gx.index(n, c, 0, 0);
      std::fill(p, p + plane, g);
    }
  return gx;
}

template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& weight, std::span<const T> bias) {
  const Shape& s = x.shape();
  const int in = s.c * s.h * s.w;
  const int out = weight.shape().n;
  if (weight.shape().c != in || weight.shape().h != 1 || weight.shape().w != 1) {
    throw ConfigError("dense: weight " + weight.shape().str() + " incompatible with input " +
                      s.str());
  }
  if (!bias.empty() && static_cast<int>(bias.size()) != out) {
    throw ConfigError("dense: bias length mismatch");
  }
  Tensor<T> y(Shape{s.n, out, 1, 1});
  for (int n = 0; n < s.n; ++n) {
    const T* xp = x.raw() + static_cast<std::size_t>(n) * in;
    for (int o = 0; o < out; ++o) {
      const T* wp = weight.raw() + static_cast<std::size_t>(o) * in;
      T acc = bias.empty() ? T(0) : bias[o];
      for (int i = 0; i < in; ++i) acc += wp[i] * xp[i];
      y.at(n, o, 0, 0) = acc;
    }
  }
  return y;
}

template <typename T>
Tensor<T> dense_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& grad_out,
                         Tensor<T>& grad_weight, std::span<T> grad_bias) {
  const Shape& s = x.shape();
  const int in = s.c * s.h * s.w;
  const int out = weight.shape().n;
  Tensor<T> gx(s);
  for (int n = 0; n < s.n; ++n) {
    const T* xp = x.raw() + static_cast<std::size_t>(n) * in;
    T* gxp = gx.raw() + static_cast<std::size_t>(n) * in;
    for (int o = 0; o < out; ++o) {
      const T g = grad_out.at(n, o, 0, 0);
      const T* wp = weight.raw() + static_cast<std::size_t>(o) * in;
      T* gwp = grad_weight.raw() + static_cast<std::size_t>(o) * in;
      if (!grad_bias.empty()) grad_bias[o] += g;
      for (int i = 0; i < in; ++i) {
        gxp[i] += wp[i] * g;
        gwp[i] += xp[i] * g;
      }
    }
  }
  return gx;
}

int squeeze_units(int channels, double ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0)) {
    throw ConfigError("squeeze_excite: ratio must be in (0, 1], got " + std::to_string(ratio));
  }
  return std::max(1, static_cast<int>(std::lround(ratio * channels)));
}

template <typename T>
Tensor<T> squeeze_excite(const Tensor<T>& x, const SqueezeExciteParams<T>& p,
                         SqueezeExciteCache<T>* cache) {
  Tensor<T> pooled = global_avg_pool(x);
  Tensor<T> reduced = dense(pooled, p.reduce_w, std::span<const T>(p.reduce_b));
  Tensor<T> activated = hard_swish(reduced);
  Tensor<T> gate = dense(activated, p.expand_w, std::span<const T>(p.expand_b));
  for (std::size_t i = 0; i < gate.numel(); ++i) gate[i] = sigmoid(gate[i]);
  const Shape& s = x.shape();
  Tensor<T> y(s);
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T g = gate.at(n, c, 0, 0);
      const T* xp = x.raw() + x.index(n, c, 0, 0);
      T* yp = y.raw() + y.index(n, c, 0, 0);
      for (std::size_t i = 0; i < plane; ++i) yp[i] = xp[i] * g;
    }
  if (cache != nullptr) {
    cache->input = x;
    cache->pooled = std::move(pooled);
    cache->reduced = std::move(reduced);
    cache->activated = std::move(activated);
    cache->gate = std::move(gate);
  }
  return y;
}

template <typename T>
Tensor<T> squeeze_excite_backward(const SqueezeExciteCache<T>& cache,
                                  const SqueezeExciteParams<T>& p, const Tensor<T>& grad_out,
                                  SqueezeExciteGrads<T>& grads) {
  const Tensor<T>& x = cache.input;
  const Shape& s = x.shape();
  const std::size_t plane = s.plane();
  Tensor<T> gx(s);
  Tensor<T> ggate(Shape{s.n, s.c, 1, 1});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T g = cache.gate.at(n, c, 0, 0);
      const T* xp = x.raw() + x.index(n, c, 0, 0);
      const T* gyp = grad_out.raw() + grad_out.index(n, c, 0, 0);
      T* gxp = gx.raw() + gx.index(n, c, 0, 0);
      T acc = T(0);
      for (std::size_t i = 0; i < plane; ++i) {
        gxp[i] = gyp[i] * g;
        acc += gyp[i] * xp[i];
      }
      // d sigmoid = g (1 - g)
      ggate.at(n, c, 0, 0) = acc * g * (T(1) - g);
    }
  Tensor<T> gact = dense_backward(cache.activated, p.expand_w, ggate, grads.expand_w,
                                  std::span<T>(grads.expand_b));
  Tensor<T> gred = hard_swish_backward(cache.reduced, gact);
  Tensor<T> gpool = dense_backward(cache.pooled, p.reduce_w, gred, grads.reduce_w,
                                   std::span<T>(grads.reduce_b));
  add_inplace(gx, global_avg_pool_backward(s, gpool));
  return gx;
}

template <typename T>
T softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels,
                        Tensor<T>* grad_logits) {
  const Shape& s = logits.shape();
  const int classes = s.c * s.h * s.w;
  if (static_cast<int>(labels.size()) != s.n) {
    throw ConfigError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                      " labels for batch of " + std::to_string(s.n));
  }
  if (grad_logits != nullptr) *grad_logits = Tensor<T>(s);
  double total = 0.0;
  std::vector<double> prob(classes);
  for (int n = 0; n < s.n; ++n) {
    const int label = labels[n];
    if (label < 0 || label >= classes) throw ConfigError("softmax_cross_entropy: label out of range");
    const T* z = logits.raw() + static_cast<std::size_t>(n) * classes;
    double mx = z[0];
    for (int k = 1; k < classes; ++k) mx = std::max(mx, static_cast<double>(z[k]));
    double sum = 0.0;
    for (int k = 0; k < classes; ++k) {
      prob[k] = std::exp(static_cast<double>(z[k]) - mx);
      sum += prob[k];
    }
    total += std::log(sum) + mx - z[label];
    if (grad_logits != nullptr) {
      T* g = grad_logits->raw() + static_cast<std::size_t>(n) * classes;
      for (int k = 0; k < classes; ++k) {
        g[k] = static_cast<T>((prob[k] / sum - (k == label ? 1.0 : 0.0)) / s.n);
      }
    }
  }
  return static_cast<T>(total / s.n);
}

#define REVBIFPN_INSTANTIATE(T)                                                                  \
  template kernels::ConvGeometry conv_geometry(const Shape&, const ConvParams<T>&);              \
  template Tensor<T> conv2d(const Tensor<T>&, const ConvParams<T>&);                             \
  template Tensor<T> conv2d_backward(const Tensor<T>&, const ConvParams<T>&, const Tensor<T>&,   \
                                     Tensor<T>&, std::span<T>);                                  \
  template Tensor<T> bilinear_upsample(const Tensor<T>&, int);                                   \
  template Tensor<T> bilinear_upsample_backward(const Tensor<T>&, int);                          \
  template Tensor<T> space_to_depth(const Tensor<T>&, int);                                      \
  template Tensor<T> depth_to_space(const Tensor<T>&, int);                                      \
  template Tensor<T> elementwise(Elementwise, const Tensor<T>&, const Tensor<T>&);               \
  template void add_inplace(Tensor<T>&, const Tensor<T>&);                                       \
  template void sub_inplace(Tensor<T>&, const Tensor<T>&);                                       \
  template T hard_swish(T);                                                                      \
  template T hard_swish_derivative(T);                                                           \
  template Tensor<T> hard_swish(const Tensor<T>&);                                               \
  template Tensor<T> hard_swish_backward(const Tensor<T>&, const Tensor<T>&);                    \
  template T sigmoid(T);                                                                         \
  template struct NormState<T>;                                                                  \
  template Tensor<T> batch_norm(const Tensor<T>&, NormState<T>&, std::uint64_t, NormCache<T>*);  \
  template Tensor<T> batch_norm_backward(const NormCache<T>&, const NormState<T>&,               \
                                         const Tensor<T>&, std::span<T>, std::span<T>);          \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                          \
  template Tensor<T> global_avg_pool_backward(const Shape&, const Tensor<T>&);                   \
  template Tensor<T> dense(const Tensor<T>&, const Tensor<T>&, std::span<const T>);              \
  template Tensor<T> dense_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,        \
                                    Tensor<T>&, std::span<T>);                                   \
  template Tensor<T> squeeze_excite(const Tensor<T>&, const SqueezeExciteParams<T>&,             \
                                    SqueezeExciteCache<T>*);                                     \
  template Tensor<T> squeeze_excite_backward(const SqueezeExciteCache<T>&,                       \
                                             const SqueezeExciteParams<T>&, const Tensor<T>&,    \
                                             SqueezeExciteGrads<T>&);                            \
  template T softmax_cross_entropy(const Tensor<T>&, std::span<const int>, Tensor<T>*);

REVBIFPN_INSTANTIATE(float)
REVBIFPN_INSTANTIATE(double)
#undef REVBIFPN_INSTANTIATE

}  // namespace revbifpn
