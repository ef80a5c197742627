#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "revbifpn/layers.hpp"

using namespace revbifpn;

namespace {

template <typename T>
Tensor<T> randn(Shape s, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, scale);
  Tensor<T> t(s);
  for (T& v : t.data()) v = static_cast<T>(d(rng));
  return t;
}

// Direct seven-loop convolution.
Tensor<double> conv_oracle(const Tensor<double>& x, const ConvParams<double>& p) {
  const Shape& s = x.shape();
  const Shape& ws = p.weight.shape();
  const int icpg = ws.c;
  const int ocpg = ws.n / p.groups;
  const int oh = (s.h + 2 * p.padding - ws.h) / p.stride + 1;
  const int ow = (s.w + 2 * p.padding - ws.w) / p.stride + 1;
  Tensor<double> y(Shape{s.n, ws.n, oh, ow});
  for (int n = 0; n < s.n; ++n)
    for (int oc = 0; oc < ws.n; ++oc)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          double acc = p.bias.empty() ? 0.0 : p.bias[oc];
          const int g = oc / ocpg;
          for (int ic = 0; ic < icpg; ++ic)
            for (int ky = 0; ky < ws.h; ++ky)
              for (int kx = 0; kx < ws.w; ++kx) {
                const int yy = i * p.stride - p.padding + ky;
                const int xx = j * p.stride - p.padding + kx;
                if (yy < 0 || yy >= s.h || xx < 0 || xx >= s.w) continue;
                acc += p.weight.at(oc, ic, ky, kx) * x.at(n, g * icpg + ic, yy, xx);
              }
          y.at(n, oc, i, j) = acc;
        }
  return y;
}

double bilinear_oracle(const Tensor<double>& x, int n, int c, int oy, int ox, int f) {
  const Shape& s = x.shape();
  auto coord = [&](int o, int size) {
    double src = (o + 0.5) / f - 0.5;
    if (src < 0) src = 0;
    if (src > size - 1) src = size - 1;
    return src;
  };
  const double sy = coord(oy, s.h);
  const double sx = coord(ox, s.w);
  const int y0 = static_cast<int>(sy);
  const int x0 = static_cast<int>(sx);
  const int y1 = std::min(y0 + 1, s.h - 1);
  const int x1 = std::min(x0 + 1, s.w - 1);
  const double fy = sy - y0;
  const double fx = sx - x0;
  return (1 - fy) * ((1 - fx) * x.at(n, c, y0, x0) + fx * x.at(n, c, y0, x1)) +
         fy * ((1 - fx) * x.at(n, c, y1, x0) + fx * x.at(n, c, y1, x1));
}

double hswish_ref(double x) { return x * std::min(std::max(x + 3.0, 0.0), 6.0) / 6.0; }

ConvParams<double> random_conv(int in_c, int out_c, int k, int stride, int pad, int groups,
                               bool bias, std::uint64_t seed) {
  ConvParams<double> p;
  p.weight = randn<double>(Shape{out_c, in_c / groups, k, k}, seed);
  if (bias) {
    const auto b = randn<double>(Shape{1, out_c, 1, 1}, seed + 1);
    p.bias.assign(b.data().begin(), b.data().end());
  }
  p.stride = stride;
  p.padding = pad;
  p.groups = groups;
  return p;
}

}  // namespace

TEST_CASE("conv2d matches the direct loop oracle") {
  struct Case { int in_c, out_c, k, stride, pad, groups, h; };
  for (const Case c : {Case{3, 4, 3, 1, 1, 1, 8}, Case{6, 6, 5, 2, 2, 6, 9}, Case{4, 8, 1, 1, 0, 2, 5},
                       Case{8, 8, 17, 8, 8, 8, 16}}) {
    const auto p = random_conv(c.in_c, c.out_c, c.k, c.stride, c.pad, c.groups, true, 11);
    const auto x = randn<double>(Shape{2, c.in_c, c.h, c.h}, 5);
    const auto y = conv2d(x, p);
    const auto ref = conv_oracle(x, p);
    REQUIRE(y.shape() == ref.shape());
    CHECK(max_abs_diff(y, ref) < 1e-12);
  }
}

TEST_CASE("conv2d impulse response reproduces the flipped kernel footprint") {
  ConvParams<double> p;
  p.weight = Tensor<double>(Shape{1, 1, 3, 3});
  for (int i = 0; i < 9; ++i) p.weight[static_cast<std::size_t>(i)] = i + 1;
  p.padding = 1;
  Tensor<double> x(Shape{1, 1, 5, 5});
  x.at(0, 0, 2, 2) = 1.0;
  const auto y = conv2d(x, p);
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) CHECK(y.at(0, 0, 2 + dy, 2 + dx) == p.weight.at(0, 0, 1 - dy, 1 - dx));
  CHECK(y.at(0, 0, 0, 0) == 0.0);
}

TEST_CASE("conv MAC count of a 3x3 conv 3->4 on 8x8 with pad 1") {
  ConvParams<double> p;
  p.weight = Tensor<double>(Shape{4, 3, 3, 3});
  p.padding = 1;
  CHECK(conv2d_macs(conv_geometry(Shape{1, 3, 8, 8}, p)) == 6912);
}

TEST_CASE("conv2d backward matches central differences") {
  const auto p0 = random_conv(4, 6, 3, 2, 1, 2, true, 3);
  const auto x = randn<double>(Shape{2, 4, 7, 7}, 4);
  const auto gy = randn<double>(conv2d(x, p0).shape(), 9);
  auto loss = [&](const Tensor<double>& xx, const ConvParams<double>& p) {
    const auto y = conv2d(xx, p);
    double l = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) l += y[i] * gy[i];
    return l;
  };
  Tensor<double> gw(p0.weight.shape());
  std::vector<double> gb(6, 0.0);
  const auto gx = conv2d_backward(x, p0, gy, gw, std::span<double>(gb));
  const double h = 1e-6;
  for (std::size_t i : {0ul, 17ul, 101ul, 195ul}) {
    auto xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    CHECK(std::abs((loss(xp, p0) - loss(xm, p0)) / (2 * h) - gx[i]) < 1e-7);
  }
  for (std::size_t i : {0ul, 5ul, 33ul, 107ul}) {
    auto pp = p0, pm = p0;
    pp.weight[i] += h;
    pm.weight[i] -= h;
    CHECK(std::abs((loss(x, pp) - loss(x, pm)) / (2 * h) - gw[i]) < 1e-7);
  }
  auto pp = p0, pm = p0;
  pp.bias[2] += h;
  pm.bias[2] -= h;
  CHECK(std::abs((loss(x, pp) - loss(x, pm)) / (2 * h) - gb[2]) < 1e-7);
}

TEST_CASE("conv geometry errors name the offending dims") {
  ConvParams<double> p;
  p.weight = Tensor<double>(Shape{4, 3, 3, 3});
  CHECK_THROWS_AS((void)conv2d(Tensor<double>(Shape{1, 5, 8, 8}), p), ConfigError);
  p.groups = 2;
  CHECK_THROWS_AS((void)conv2d(Tensor<double>(Shape{1, 3, 8, 8}), p), ConfigError);
}

TEST_CASE("bilinear upsampling matches the pointwise oracle") {
  for (int f : {2, 4, 8}) {
    const auto x = randn<double>(Shape{2, 3, 5, 4}, 21);
    const auto y = bilinear_upsample(x, f);
    REQUIRE(y.shape() == (Shape{2, 3, 5 * f, 4 * f}));
    double worst = 0;
    for (int n = 0; n < 2; ++n)
      for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 5 * f; ++i)
          for (int j = 0; j < 4 * f; ++j)
            worst = std::max(worst, std::abs(y.at(n, c, i, j) - bilinear_oracle(x, n, c, i, j, f)));
    CHECK(worst < 1e-14);
  }
}

TEST_CASE("bilinear upsampling preserves constants and rejects bad factors") {
  const Tensor<double> x(Shape{1, 2, 3, 3}, 1.5);
  const auto y = bilinear_upsample(x, 4);
  for (double v : y.data()) CHECK(v == doctest::Approx(1.5).epsilon(1e-15));
  CHECK_THROWS_AS((void)bilinear_upsample(x, 3), ConfigError);
}

TEST_CASE("bilinear backward is the adjoint of forward") {
  const auto x = randn<double>(Shape{1, 2, 4, 6}, 1);
  const auto g = randn<double>(Shape{1, 2, 16, 24}, 2);
  const auto y = bilinear_upsample(x, 4);
  const auto gx = bilinear_upsample_backward(g, 4);
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < y.numel(); ++i) lhs += y[i] * g[i];
  for (std::size_t i = 0; i < x.numel(); ++i) rhs += x[i] * gx[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-13));
}

TEST_CASE("space_to_depth channel index map and round trip") {
  const auto x = randn<double>(Shape{2, 3, 8, 12}, 7);
  const auto y = space_to_depth(x, 4);
  REQUIRE(y.shape() == (Shape{2, 48, 2, 3}));
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c)
      for (int dy = 0; dy < 4; ++dy)
        for (int dx = 0; dx < 4; ++dx)
          for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 3; ++j)
              CHECK(y.at(n, c * 16 + dy * 4 + dx, i, j) == x.at(n, c, 4 * i + dy, 4 * j + dx));
  const auto back = depth_to_space(y, 4);
  CHECK(max_abs_diff(back, x) == 0.0);
  CHECK(space_to_depth(Tensor<float>(Shape{1, 3, 224, 224}), 4).shape() == (Shape{1, 48, 56, 56}));
  CHECK_THROWS_AS((void)space_to_depth(x, 5), ConfigError);
}

TEST_CASE("elementwise ops are exact") {
  const auto a = randn<double>(Shape{1, 2, 3, 3}, 1);
  const auto b = randn<double>(Shape{1, 2, 3, 3}, 2);
  const auto s = elementwise(Elementwise::kAdd, a, b);
  const auto d = elementwise(Elementwise::kSub, s, b);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(s[i] == a[i] + b[i]);
  const auto m = elementwise(Elementwise::kMul, a, b);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(m[i] == a[i] * b[i]);
  CHECK(d.shape() == a.shape());
  CHECK_THROWS_AS((void)elementwise(Elementwise::kAdd, a, Tensor<double>(Shape{1, 2, 3, 4})), ConfigError);
}

TEST_CASE("hard-swish values and derivative") {
  for (double x : {-5.0, -3.0, -1.0, 0.0, 0.5, 2.9, 3.0, 7.0}) CHECK(hard_swish(x) == doctest::Approx(hswish_ref(x)));
  // Away from the kinks the derivative matches central differences.
  for (double x : {-4.0, -2.0, -0.3, 1.0, 2.5, 4.0}) {
    const double h = 1e-6;
    CHECK(hard_swish_derivative(x) == doctest::Approx((hswish_ref(x + h) - hswish_ref(x - h)) / (2 * h)).epsilon(1e-8));
  }
  CHECK(hard_swish_derivative(-3.0) == doctest::Approx(-0.5));
  CHECK(hard_swish_derivative(3.0) == 1.0);
}

TEST_CASE("batch norm normalizes with batch moments and updates running stats once per invocation") {
  auto x = randn<double>(Shape{4, 3, 5, 5}, 3, 2.0);
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] += 1.0;
  auto s = NormState<double>::identity(3);
  const auto y = batch_norm(x, s, 7);
  const double m = 100.0;
  for (int c = 0; c < 3; ++c) {
    double mean = 0, var = 0, xm = 0, xv = 0;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 25; ++i) {
        mean += y[(static_cast<std::size_t>(n) * 3 + c) * 25 + i];
        xm += x[(static_cast<std::size_t>(n) * 3 + c) * 25 + i];
      }
    mean /= m;
    xm /= m;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 25; ++i) {
        const std::size_t k = (static_cast<std::size_t>(n) * 3 + c) * 25 + i;
        var += (y[k] - mean) * (y[k] - mean);
        xv += (x[k] - xm) * (x[k] - xm);
      }
    CHECK(std::abs(mean) < 1e-12);
    CHECK(var / m == doctest::Approx((xv / m) / (xv / m + 1e-3)).epsilon(1e-10));
    CHECK(s.running_mean[c] == doctest::Approx(0.1 * xm).epsilon(1e-12));
    CHECK(s.running_var[c] == doctest::Approx(0.9 + 0.1 * xv / (m - 1)).epsilon(1e-12));
  }
  const auto before = s.running_mean;
  (void)batch_norm(x, s, 7);
  CHECK(s.running_mean == before);
  (void)batch_norm(x, s, 8);
  CHECK(s.running_mean != before);
}

TEST_CASE("batch norm backward matches central differences") {
  const auto x = randn<double>(Shape{3, 2, 3, 3}, 5);
  auto s = NormState<double>::identity(2);
  s.gamma = {0.7, -1.3};
  s.beta = {0.1, 0.2};
  const auto gy = randn<double>(x.shape(), 6);
  auto loss = [&](const Tensor<double>& xx, NormState<double> st) {
    const auto y = batch_norm(xx, st, 1);
    double l = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) l += y[i] * gy[i];
    return l;
  };
  NormCache<double> cache;
  (void)batch_norm(x, s, 1, &cache);
  std::vector<double> gg(2, 0.0), gb(2, 0.0);
  const auto gx = batch_norm_backward(cache, s, gy, std::span<double>(gg), std::span<double>(gb));
  const double h = 1e-6;
  for (std::size_t i : {0ul, 9ul, 30ul, 53ul}) {
    auto xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    CHECK((loss(xp, s) - loss(xm, s)) / (2 * h) == doctest::Approx(gx[i]).epsilon(1e-6));
  }
  auto sp = s, sm = s;
  sp.gamma[1] += h;
  sm.gamma[1] -= h;
  CHECK((loss(x, sp) - loss(x, sm)) / (2 * h) == doctest::Approx(gg[1]).epsilon(1e-6));
}

TEST_CASE("squeeze-excite with a constant half gate scales by one half") {
  SqueezeExciteParams<double> p;
  p.reduce_w = Tensor<double>(Shape{1, 4, 1, 1});
  p.reduce_b = {0.0};
  p.expand_w = Tensor<double>(Shape{4, 1, 1, 1});
  p.expand_b = std::vector<double>(4, 0.0);  // sigmoid(0) = 0.5
  const auto x = randn<double>(Shape{2, 4, 3, 3}, 1);
  const auto y = squeeze_excite(x, p);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == 0.5 * x[i]);
  CHECK(squeeze_units(64, 0.25) == 16);
  CHECK(squeeze_units(2, 0.25) == 1);
  CHECK_THROWS_AS((void)squeeze_units(8, 0.0), ConfigError);
}

TEST_CASE("dense with one-hot input selects a weight column") {
  Tensor<double> w(Shape{3, 4, 1, 1});
  for (std::size_t i = 0; i < w.numel(); ++i) w[i] = static_cast<double>(i);
  const std::vector<double> b{0.5, -1.0, 2.0};
  Tensor<double> x(Shape{1, 4, 1, 1});
  x[2] = 1.0;
  const auto y = dense(x, w, std::span<const double>(b));
  for (int o = 0; o < 3; ++o) CHECK(y[static_cast<std::size_t>(o)] == w.at(o, 2, 0, 0) + b[static_cast<std::size_t>(o)]);
}

TEST_CASE("softmax cross-entropy of uniform logits is log(classes)") {
  const Tensor<double> logits(Shape{2, 5, 1, 1}, 0.3);
  const std::vector<int> labels{1, 4};
  Tensor<double> g;
  CHECK(softmax_cross_entropy(logits, labels, &g) == doctest::Approx(std::log(5.0)));
  CHECK(g.at(0, 1, 0, 0) == doctest::Approx((0.2 - 1.0) / 2));
  CHECK(g.at(0, 0, 0, 0) == doctest::Approx(0.2 / 2));
  const std::vector<int> bad{1, 5};
  CHECK_THROWS_AS((void)softmax_cross_entropy(logits, bad), ConfigError);
}

TEST_CASE("float and double paths agree within single-precision ulps") {
  const auto p = random_conv(4, 4, 3, 1, 1, 1, false, 2);
  const auto x = randn<double>(Shape{1, 4, 6, 6}, 3);
  ConvParams<float> pf;
  pf.weight = p.weight.cast<float>();
  pf.padding = 1;
  const auto yd = conv2d(x, p);
  const auto yf = conv2d(x.cast<float>(), pf);
  CHECK(max_abs_diff(yf.cast<double>(), yd) / max_abs(yd) < 64 * 1.2e-7);
}

TEST_CASE("serial and OpenMP kernels are bit-identical") {
  const auto p = random_conv(8, 8, 5, 2, 2, 8, true, 4);
  const auto p2 = random_conv(8, 16, 1, 1, 0, 1, true, 5);
  const auto x = randn<double>(Shape{3, 8, 17, 17}, 6);
  auto run = [&] {
    std::vector<Tensor<double>> out;
    out.push_back(conv2d(x, p));
    out.push_back(conv2d(x, p2));
    Tensor<double> gw(p.weight.shape());
    std::vector<double> gb(8, 0.0);
    out.push_back(conv2d_backward(x, p, out[0], gw, std::span<double>(gb)));
    out.push_back(gw);
    out.push_back(bilinear_upsample(x, 4));
    out.push_back(bilinear_upsample_backward(out.back(), 4));
    return out;
  };
  const auto previous = kernels::backend();
  kernels::set_backend(kernels::Backend::kSerial);
  const auto serial = run();
  kernels::set_backend(kernels::Backend::kOpenMP);
  const auto parallel = run();
  kernels::set_backend(previous);
  for (std::size_t i = 0; i < serial.size(); ++i) {
    REQUIRE(serial[i].shape() == parallel[i].shape());
    CHECK(std::equal(serial[i].data().begin(), serial[i].data().end(), parallel[i].data().begin()));
  }
}

TEST_CASE("layers are deterministic under a fixed seed") {
  MBConvSpec spec{4, 6, 2, 5, 2, 2, 1, 0.25, false};
  Rng r1(9), r2(9);
  MBConv<double> a(spec, r1), b(spec, r2);
  const auto x = randn<double>(Shape{2, 4, 8, 8}, 1);
  const ForwardContext ctx{1, Phase::kForward, nullptr};
  const auto ya = a.forward(x, ctx, nullptr);
  const auto yb = b.forward(x, ctx, nullptr);
  CHECK(max_abs_diff(ya, yb) == 0.0);
  CHECK(ya.shape() == (Shape{2, 6, 4, 4}));
}

TEST_CASE("MBConv backward matches central differences") {
  MBConvSpec spec{3, 4, 2, 3, 1, 1, 2, 0.5, false};
  Rng rng(5);
  MBConv<double> m(spec, rng);
  std::vector<ParamRef<double>> params;
  m.collect(params, "m");
  const auto x = randn<double>(Shape{2, 3, 4, 4}, 8);
  const ForwardContext ctx{1, Phase::kForward, nullptr};
  const auto gy = randn<double>(m.output_shape(x.shape()), 2);
  auto loss = [&](const Tensor<double>& xx) {
    const auto y = m.forward(xx, ctx, nullptr);
    double l = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) l += y[i] * gy[i];
    return l;
  };
  MBConvCache<double> cache;
  (void)m.forward(x, ctx, &cache);
  zero_grads<double>(params);
  const auto gx = m.backward(cache, gy);
  const double h = 1e-6;
  for (std::size_t i : {0ul, 13ul, 50ul, 95ul}) {
    auto xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    CHECK((loss(xp) - loss(xm)) / (2 * h) == doctest::Approx(gx[i]).epsilon(1e-5));
  }
  for (const auto& p : params) {
    const std::size_t j = p.value.size() / 2;
    const double saved = p.value[j];
    p.value[j] = saved + h;
    const double up = loss(x);
    p.value[j] = saved - h;
    const double down = loss(x);
    p.value[j] = saved;
    INFO(p.name);
    CHECK((up - down) / (2 * h) == doctest::Approx(p.grad[j]).epsilon(1e-5).scale(1e-3));
  }
}
