#include "revbifpn/coupling.hpp"

#include <algorithm>
#include <numeric>

namespace revbifpn {

namespace {

struct StageCache final : BlockCache {
  std::vector<RevBlockCache> levels;
  [[nodiscard]] std::size_t bytes() const override {
    std::size_t b = 0;
    for (const auto& c : levels) b += c.bytes();
    return b;
  }
};

struct SiloCache final : BlockCache {
  std::map<std::pair<int, int>, std::unique_ptr<TransformCache>> down;
  std::map<std::pair<int, int>, std::unique_ptr<TransformCache>> up;
  [[nodiscard]] std::size_t bytes() const override {
    std::size_t b = 0;
    for (const auto& [k, c] : down) b += c->bytes();
    for (const auto& [k, c] : up) b += c->bytes();
    return b;
  }
};

struct StemCache final : BlockCache {
  Shape input;
  [[nodiscard]] std::size_t bytes() const override { return 0; }
};

void check_permutation(std::span<const int> order, int n, const char* what) {
  std::vector<int> sorted(order.begin(), order.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<int> expect(static_cast<std::size_t>(n));
  std::iota(expect.begin(), expect.end(), 0);
  if (sorted != expect) {
    throw ConfigError(std::string("silo: ") + what + " evaluation order is not a permutation of 0.." +
                      std::to_string(n - 1));
  }
}

}  // namespace

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& x, int first) {
  const Shape& s = x.shape();
  if (first < 1 || first >= s.c) {
    throw ConfigError("split_channels: cannot split " + std::to_string(s.c) + " channels at " +
                      std::to_string(first));
  }
  Tensor<T> a(Shape{s.n, first, s.h, s.w});
  Tensor<T> b(Shape{s.n, s.c - first, s.h, s.w});
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n) {
    const T* src = x.raw() + x.index(n, 0, 0, 0);
    std::copy(src, src + first * plane, a.raw() + a.index(n, 0, 0, 0));
    std::copy(src + first * plane, src + s.c * plane, b.raw() + b.index(n, 0, 0, 0));
  }
  return {std::move(a), std::move(b)};
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw ConfigError("concat_channels: incompatible " + sa.str() + " and " + sb.str());
  }
  Tensor<T> y(Shape{sa.n, sa.c + sb.c, sa.h, sa.w});
  const std::size_t plane = sa.plane();
  for (int n = 0; n < sa.n; ++n) {
    T* dst = y.raw() + y.index(n, 0, 0, 0);
    const T* pa = a.raw() + a.index(n, 0, 0, 0);
    const T* pb = b.raw() + b.index(n, 0, 0, 0);
    std::copy(pa, pa + sa.c * plane, dst);
    std::copy(pb, pb + sb.c * plane, dst + sa.c * plane);
  }
  return y;
}

RevBlockSpec RevBlockSpec::equal_split(int channels, int level, const StreamProfile& profile) {
  if (channels % 2 != 0) {
    throw ConfigError("RevBlock: equal split requested for odd channel count " +
                      std::to_string(channels));
  }
  RevBlockSpec s{channels, channels / 2, level, profile};
  s.validate();
  return s;
}

void RevBlockSpec::validate() const {
  if (split < 1 || split >= channels) {
    throw ConfigError("RevBlock: split " + std::to_string(split) + " invalid for " +
                      std::to_string(channels) + " channels");
  }
}

template <typename T>
RevBlock<T>::RevBlock(const RevBlockSpec& spec, Rng& rng) : split_(spec.split) {
  spec.validate();
  const int ca = spec.split;
  const int cb = spec.channels - spec.split;
  f_ = std::make_unique<MBConvTransform<T>>(make_residual_transform(spec.level, cb, ca, spec.profile), rng);
  g_ = std::make_unique<MBConvTransform<T>>(make_residual_transform(spec.level, ca, cb, spec.profile), rng);
}

template <typename T>
RevBlock<T>::RevBlock(int split, std::unique_ptr<Transform<T>> f, std::unique_ptr<Transform<T>> g)
    : split_(split), f_(std::move(f)), g_(std::move(g)) {
  if (!f_ || !g_) throw ConfigError("RevBlock: null transform");
}

template <typename T>
Shape RevBlock<T>::output_shape(const Shape& in) const {
  if (split_ < 1 || split_ >= in.c) {
    throw ConfigError("RevBlock: split " + std::to_string(split_) + " invalid for input " + in.str());
  }
  const Shape a{in.n, split_, in.h, in.w};
  const Shape b{in.n, in.c - split_, in.h, in.w};
  if (f_->output_shape(b) != a || g_->output_shape(a) != b) {
    throw ConfigError("RevBlock: transforms do not preserve the split of " + in.str());
  }
  return in;
}

template <typename T>
std::uint64_t RevBlock<T>::macs(const Shape& in) const {
  const Shape a{in.n, split_, in.h, in.w};
  const Shape b{in.n, in.c - split_, in.h, in.w};
  return f_->macs(b) + g_->macs(a);
}

template <typename T>
Tensor<T> RevBlock<T>::forward(const Tensor<T>& x, const ForwardContext& ctx, RevBlockCache* cache) {
  (void)output_shape(x.shape());
  auto [xa, xb] = split_channels(x, split_);
  ctx.count("revblock.F");
  Tensor<T> ya = f_->forward(xb, ctx, cache ? &cache->f : nullptr);
  add_inplace(ya, xa);
  ctx.count("revblock.G");
  Tensor<T> yb = g_->forward(ya, ctx, cache ? &cache->g : nullptr);
  add_inplace(yb, xb);
  return concat_channels(ya, yb);
}

template <typename T>
Tensor<T> RevBlock<T>::inverse(const Tensor<T>& y, const ForwardContext& ctx, RevBlockCache* cache) {
  (void)output_shape(y.shape());
  auto [ya, yb] = split_channels(y, split_);
  ctx.count("revblock.G");
  Tensor<T> xb = yb;
  sub_inplace(xb, g_->forward(ya, ctx, cache ? &cache->g : nullptr));
  ctx.count("revblock.F");
  Tensor<T> xa = ya;
  sub_inplace(xa, f_->forward(xb, ctx, cache ? &cache->f : nullptr));
  return concat_channels(xa, xb);
}

template <typename T>
Tensor<T> RevBlock<T>::backward(const RevBlockCache& cache, const Tensor<T>& grad_out) {
  if (!cache.f || !cache.g) throw StateError("RevBlock::backward: incomplete cache");
  auto [gya, gyb] = split_channels(grad_out, split_);
  // y_a feeds y_b through G.
  add_inplace(gya, g_->backward(*cache.g, gyb));
  Tensor<T> gxb = gyb;
  add_inplace(gxb, f_->backward(*cache.f, gya));
  return concat_channels(gya, gxb);
}

template <typename T>
void RevBlock<T>::collect(std::vector<ParamRef<T>>& out, const std::string& prefix) {
  f_->collect(out, prefix + ".F");
  g_->collect(out, prefix + ".G");
}

template <typename T>
std::vector<BatchNorm<T>*> RevBlock<T>::norms() {
  auto a = f_->norms();
  auto b = g_->norms();
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

template <typename T>
ResidualStage<T>::ResidualStage(std::span<const int> channels, Rng& rng, const StreamProfile& profile) {
  if (channels.empty() || channels.size() > kMaxPyramidLevels) {
    throw ConfigError("ResidualStage: level count must be in [1, 4]");
  }
  for (std::size_t i = 0; i < channels.size(); ++i) {
    blocks_.emplace_back(RevBlockSpec::equal_split(channels[i], static_cast<int>(i), profile), rng);
  }
}

template <typename T>
std::vector<Shape> ResidualStage<T>::output_shapes(const std::vector<Shape>& in) const {
  if (in.size() != blocks_.size()) {
    throw ConfigError("ResidualStage: expected " + std::to_string(blocks_.size()) +
                      " levels, got " + std::to_string(in.size()));
  }
  for (std::size_t i = 0; i < in.size(); ++i) (void)blocks_[i].output_shape(in[i]);
  return in;
}

template <typename T>
std::uint64_t ResidualStage<T>::macs(const std::vector<Shape>& in) const {
  std::uint64_t m = 0;
  for (std::size_t i = 0; i < in.size(); ++i) m += blocks_[i].macs(in[i]);
  return m;
}

template <typename T>
std::size_t ResidualStage<T>::param_count() const {
  std::size_t p = 0;
  for (const auto& b : blocks_) p += b.param_count();
  return p;
}

template <typename T>
FeaturePyramid<T> ResidualStage<T>::forward(const FeaturePyramid<T>& x, const ForwardContext& ctx,
                                            std::unique_ptr<BlockCache>* cache) {
  (void)output_shapes(x.shapes());
  auto c = cache ? std::make_unique<StageCache>() : nullptr;
  if (c) c->levels.resize(blocks_.size());
  FeaturePyramid<T> y;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    y.levels.push_back(blocks_[i].forward(x.levels[i], ctx, c ? &c->levels[i] : nullptr));
  }
  if (cache) *cache = std::move(c);
  return y;
}

template <typename T>
FeaturePyramid<T> ResidualStage<T>::inverse(const FeaturePyramid<T>& y, const ForwardContext& ctx,
                                            std::unique_ptr<BlockCache>* cache) {
  (void)output_shapes(y.shapes());
  auto c = cache ? std::make_unique<StageCache>() : nullptr;
  if (c) c->levels.resize(blocks_.size());
  FeaturePyramid<T> x;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    x.levels.push_back(blocks_[i].inverse(y.levels[i], ctx, c ? &c->levels[i] : nullptr));
  }
  if (cache) *cache = std::move(c);
  return x;
}

template <typename T>
FeaturePyramid<T> ResidualStage<T>::backward(const BlockCache& cache, const FeaturePyramid<T>& grad_out) {
  const auto& c = dynamic_cast<const StageCache&>(cache);
  FeaturePyramid<T> gx;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    gx.levels.push_back(blocks_[i].backward(c.levels[i], grad_out.levels[i]));
  }
  return gx;
}

template <typename T>
void ResidualStage<T>::collect(std::vector<ParamRef<T>>& out, const std::string& prefix) {
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    blocks_[i].collect(out, prefix + ".level" + std::to_string(i));
  }
}

template <typename T>
std::vector<BatchNorm<T>*> ResidualStage<T>::norms() {
  std::vector<BatchNorm<T>*> out;
  for (auto& b : blocks_) {
    auto n = b.norms();
    out.insert(out.end(), n.begin(), n.end());
  }
  return out;
}

void SiloSpec::validate() const {
  const int n = levels();
  if (n < 1 || n > kMaxPyramidLevels) {
    throw ConfigError("SiloSpec: level count must be in [1, 4], got " + std::to_string(n));
  }
  if (expand && n < 2) throw ConfigError("SiloSpec: an expanding silo needs at least 2 levels");
  for (int c : channels) {
    if (c < 1) throw ConfigError("SiloSpec: channel counts must be positive");
  }
}

template <typename T>
Silo<T>::Silo(const SiloSpec& spec, Rng& rng)
    : levels_(spec.levels()), expand_(spec.expand), channels_(spec.channels) {
  spec.validate();
  for (int k = 1; k < levels_; ++k) {
    for (int i = 0; i < k; ++i) {
      down_[{i, k}] = std::make_unique<MBConvTransform<T>>(
          make_resample_transform(i, k, channels_[i], channels_[k], spec.profile), rng);
    }
  }
  for (int k = 0; k + 1 < levels_; ++k) {
    for (int j = k + 1; j < levels_; ++j) {
      up_[{j, k}] = std::make_unique<MBConvTransform<T>>(
          make_resample_transform(j, k, channels_[j], channels_[k], spec.profile), rng);
    }
  }
}

template <typename T>
Silo<T>::Silo(std::vector<int> channels, bool expand, TransformMap down, TransformMap up)
    : levels_(static_cast<int>(channels.size())),
      expand_(expand),
      channels_(std::move(channels)),
      down_(std::move(down)),
      up_(std::move(up)) {
  SiloSpec{channels_, expand_, {}}.validate();
  for (int k = 0; k < levels_; ++k) {
    for (int i = 0; i < levels_; ++i) {
      if (i < k && !down_.count({i, k})) {
        throw ConfigError("Silo: missing down transform " + std::to_string(i) + "->" + std::to_string(k));
      }
      if (i > k && !up_.count({i, k})) {
        throw ConfigError("Silo: missing up transform " + std::to_string(i) + "->" + std::to_string(k));
      }
    }
  }
  if (down_.size() + up_.size() != static_cast<std::size_t>(levels_ * (levels_ - 1))) {
    throw ConfigError("Silo: unexpected extra transforms");
  }
}

template <typename T>
std::vector<Shape> Silo<T>::full_input_shapes(const std::vector<Shape>& in) const {
  const int expected = expand_ ? levels_ - 1 : levels_;
  if (static_cast<int>(in.size()) != expected) {
    throw ConfigError("silo: expected " + std::to_string(expected) + " input levels, got " +
                      std::to_string(in.size()));
  }
  std::vector<Shape> full = in;
  if (expand_) {
    const Shape& prev = in.back();
    if (prev.h % 2 != 0 || prev.w % 2 != 0) {
      throw ConfigError("silo: cannot halve level " + std::to_string(levels_ - 2) + " shape " +
                        prev.str() + " to inject a new level");
    }
    full.push_back(Shape{prev.n, channels_.back(), prev.h / 2, prev.w / 2});
  }
  return full;
}

template <typename T>
std::vector<Shape> Silo<T>::output_shapes(const std::vector<Shape>& in) const {
  std::vector<Shape> full = full_input_shapes(in);
  for (int k = 0; k < levels_; ++k) {
    if (full[k].c != channels_[k]) {
      throw ConfigError("silo: level " + std::to_string(k) + " has " + std::to_string(full[k].c) +
                        " channels, expected " + std::to_string(channels_[k]));
    }
  }
  for (const auto& [key, f] : down_) {
    if (f->output_shape(full[key.first]) != full[key.second]) {
      throw ConfigError("silo: F " + std::to_string(key.first) + "->" + std::to_string(key.second) +
                        " maps " + full[key.first].str() + " to " +
                        f->output_shape(full[key.first]).str() + ", level shape is " +
                        full[key.second].str());
    }
  }
  for (const auto& [key, f] : up_) {
    if (f->output_shape(full[key.first]) != full[key.second]) {
      throw ConfigError("silo: F " + std::to_string(key.first) + "->" + std::to_string(key.second) +
                        " maps " + full[key.first].str() + " to " +
                        f->output_shape(full[key.first]).str() + ", level shape is " +
                        full[key.second].str());
    }
  }
  return full;
}

template <typename T>
std::uint64_t Silo<T>::macs(const std::vector<Shape>& in) const {
  const std::vector<Shape> full = output_shapes(in);
  std::uint64_t m = 0;
  for (const auto& [key, f] : down_) m += f->macs(full[key.first]);
  for (const auto& [key, f] : up_) m += f->macs(full[key.first]);
  return m;
}

template <typename T>
std::size_t Silo<T>::param_count() const {
  std::size_t p = 0;
  for (const auto& [key, f] : down_) p += f->param_count();
  for (const auto& [key, f] : up_) p += f->param_count();
  return p;
}

template <typename T>
FeaturePyramid<T> Silo<T>::full_input(const FeaturePyramid<T>& x) const {
  if (!expand_) return x;
  const std::vector<Shape> full = full_input_shapes(x.shapes());
  FeaturePyramid<T> out = x;
  out.levels.emplace_back(full.back());
  return out;
}

template <typename T>
FeaturePyramid<T> Silo<T>::run_forward(const FeaturePyramid<T>& x, const ForwardContext& ctx,
                                       std::unique_ptr<BlockCache>* cache,
                                       std::span<const int> first, std::span<const int> second) {
  (void)output_shapes(x.shapes());
  const FeaturePyramid<T> in = full_input(x);
  auto c = cache ? std::make_unique<SiloCache>() : nullptr;
  const int n = levels_;

  std::vector<Tensor<T>> mid(static_cast<std::size_t>(n));
  for (int k : first) {
    if (k == 0) {
      mid[0] = in[0];
      continue;
    }
    Tensor<T> sum;
    for (int i = 0; i < k; ++i) {
      ctx.count("silo.F");
      Tensor<T> r = down_.at({i, k})->forward(in[i], ctx, c ? &c->down[{i, k}] : nullptr);
      if (i == 0) {
        sum = std::move(r);
      } else {
        add_inplace(sum, r);
      }
    }
    mid[k] = elementwise(Elementwise::kAdd, in[k], sum);
  }

  FeaturePyramid<T> y;
  y.levels.resize(static_cast<std::size_t>(n));
  for (int k : second) {
    if (k == n - 1) {
      y[k] = mid[k];
      continue;
    }
    Tensor<T> sum;
    for (int j = k + 1; j < n; ++j) {
      ctx.count("silo.F");
      Tensor<T> r = up_.at({j, k})->forward(mid[j], ctx, c ? &c->up[{j, k}] : nullptr);
      if (j == k + 1) {
        sum = std::move(r);
      } else {
        add_inplace(sum, r);
      }
    }
    y[k] = elementwise(Elementwise::kAdd, mid[k], sum);
  }
  if (cache) *cache = std::move(c);
  return y;
}

template <typename T>
FeaturePyramid<T> Silo<T>::forward(const FeaturePyramid<T>& x, const ForwardContext& ctx,
                                   std::unique_ptr<BlockCache>* cache) {
  std::vector<int> order(static_cast<std::size_t>(levels_));
  std::iota(order.begin(), order.end(), 0);
  return run_forward(x, ctx, cache, order, order);
}

template <typename T>
FeaturePyramid<T> Silo<T>::forward_ordered(const FeaturePyramid<T>& x, const ForwardContext& ctx,
                                           std::span<const int> first_half,
                                           std::span<const int> second_half) {
  check_permutation(first_half, levels_, "first-half");
  check_permutation(second_half, levels_, "second-half");
  return run_forward(x, ctx, nullptr, first_half, second_half);
}

template <typename T>
typename Silo<T>::InverseTrace Silo<T>::run_inverse(const FeaturePyramid<T>& y,
                                                    const ForwardContext& ctx,
                                                    std::unique_ptr<BlockCache>* cache) {
  const int n = levels_;
  if (y.size() != n) {
    throw ConfigError("silo inverse: expected " + std::to_string(n) + " output levels, got " +
                      std::to_string(y.size()));
  }
  {
    std::vector<Shape> in = y.shapes();
    if (expand_) in.pop_back();
    if (output_shapes(in) != y.shapes()) throw ConfigError("silo inverse: output shape mismatch");
  }
  auto c = cache ? std::make_unique<SiloCache>() : nullptr;

  InverseTrace t;
  t.intermediate.levels.resize(static_cast<std::size_t>(n));
  t.input.levels.resize(static_cast<std::size_t>(n));
  auto& mid = t.intermediate;
  auto& x = t.input;

  // Second half, lowest resolution first: m_{N-1} = y_{N-1}, then
  // m_k = y_k - sum_{j>k} U_{j,k}(m_j).
  mid[n - 1] = y[n - 1];
  for (int k = n - 2; k >= 0; --k) {
    Tensor<T> sum;
    for (int j = k + 1; j < n; ++j) {
      ctx.count("silo.F");
      Tensor<T> r = up_.at({j, k})->forward(mid[j], ctx, c ? &c->up[{j, k}] : nullptr);
      if (j == k + 1) {
        sum = std::move(r);
      } else {
        add_inplace(sum, r);
      }
    }
    mid[k] = elementwise(Elementwise::kSub, y[k], sum);
  }

  // First half, highest resolution first: x_0 = m_0, then
  // x_k = m_k - sum_{i<k} D_{i,k}(x_i).
  x[0] = mid[0];
  for (int k = 1; k < n; ++k) {
    Tensor<T> sum;
    for (int i = 0; i < k; ++i) {
      ctx.count("silo.F");
      Tensor<T> r = down_.at({i, k})->forward(x[i], ctx, c ? &c->down[{i, k}] : nullptr);
      if (i == 0) {
        sum = std::move(r);
      } else {
        add_inplace(sum, r);
      }
    }
    x[k] = elementwise(Elementwise::kSub, mid[k], sum);
  }
  if (cache) *cache = std::move(c);
  return t;
}

template <typename T>
FeaturePyramid<T> Silo<T>::inverse(const FeaturePyramid<T>& y, const ForwardContext& ctx,
                                   std::unique_ptr<BlockCache>* cache) {
  InverseTrace t = run_inverse(y, ctx, cache);
  if (expand_) t.input.levels.pop_back();
  return std::move(t.input);
}

template <typename T>
typename Silo<T>::InverseTrace Silo<T>::inverse_full(const FeaturePyramid<T>& y,
                                                     const ForwardContext& ctx) {
  return run_inverse(y, ctx, nullptr);
}

template <typename T>
FeaturePyramid<T> Silo<T>::backward(const BlockCache& cache, const FeaturePyramid<T>& grad_out) {
  const auto& c = dynamic_cast<const SiloCache&>(cache);
  const int n = levels_;
  if (grad_out.size() != n) throw ConfigError("silo backward: gradient level count mismatch");

  // d/dm: identity path plus every up transform reading m_j.
  FeaturePyramid<T> gm = grad_out;
  for (int k = 0; k + 1 < n; ++k) {
    for (int j = k + 1; j < n; ++j) {
      add_inplace(gm[j], up_.at({j, k})->backward(*c.up.at({j, k}), grad_out[k]));
    }
  }
  // d/dx: identity path plus every down transform reading x_i.
  FeaturePyramid<T> gx = gm;
  for (int k = 1; k < n; ++k) {
    for (int i = 0; i < k; ++i) {
      add_inplace(gx[i], down_.at({i, k})->backward(*c.down.at({i, k}), gm[k]));
    }
  }
  if (expand_) gx.levels.pop_back();
  return gx;
}

template <typename T>
void Silo<T>::collect(std::vector<ParamRef<T>>& out, const std::string& prefix) {
  for (auto& [key, f] : down_) {
    f->collect(out, prefix + ".F" + std::to_string(key.first) + "_" + std::to_string(key.second));
  }
  for (auto& [key, f] : up_) {
    f->collect(out, prefix + ".F" + std::to_string(key.first) + "_" + std::to_string(key.second));
  }
}

template <typename T>
std::vector<BatchNorm<T>*> Silo<T>::norms() {
  std::vector<BatchNorm<T>*> out;
  for (auto* m : {&down_, &up_}) {
    for (auto& [key, f] : *m) {
      auto n = f->norms();
      out.insert(out.end(), n.begin(), n.end());
    }
  }
  return out;
}

template <typename T>
SpaceToDepthStem<T>::SpaceToDepthStem(int in_channels, int out_channels)
    : in_channels_(in_channels), out_channels_(out_channels) {
  constexpr int area = kBlock * kBlock;
  if (in_channels < 1 || out_channels % area != 0 || out_channels / area < in_channels) {
    throw ConfigError("stem: " + std::to_string(out_channels) +
                      " output channels cannot hold a lossless SpaceToDepth of " +
                      std::to_string(in_channels) + " input channels (need a multiple of 16 and >= " +
                      std::to_string(area * in_channels) + ")");
  }
}

template <typename T>
std::vector<Shape> SpaceToDepthStem<T>::output_shapes(const std::vector<Shape>& in) const {
  if (in.size() != 1) throw ConfigError("stem: expects a single input level");
  const Shape& s = in[0];
  if (s.c != in_channels_) {
    throw ConfigError("stem: input has " + std::to_string(s.c) + " channels, expected " +
                      std::to_string(in_channels_));
  }
  if (s.h % kBlock != 0 || s.w % kBlock != 0) {
    throw ConfigError("stem: input " + s.str() + " not divisible by 4");
  }
  return {Shape{s.n, out_channels_, s.h / kBlock, s.w / kBlock}};
}

template <typename T>
FeaturePyramid<T> SpaceToDepthStem<T>::forward(const FeaturePyramid<T>& x, const ForwardContext&,
                                               std::unique_ptr<BlockCache>* cache) {
  (void)output_shapes(x.shapes());
  const Tensor<T>& img = x[0];
  const Shape& s = img.shape();
  const int reps = out_channels_ / (kBlock * kBlock);
  Tensor<T> dup(Shape{s.n, reps, s.h, s.w});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < reps; ++c) {
      const T* src = img.raw() + img.index(n, c % in_channels_, 0, 0);
      std::copy(src, src + s.plane(), dup.raw() + dup.index(n, c, 0, 0));
    }
  if (cache) {
    auto c = std::make_unique<StemCache>();
    c->input = s;
    *cache = std::move(c);
  }
  return FeaturePyramid<T>({space_to_depth(dup, kBlock)});
}

template <typename T>
FeaturePyramid<T> SpaceToDepthStem<T>::inverse(const FeaturePyramid<T>& y, const ForwardContext&,
                                               std::unique_ptr<BlockCache>* cache) {
  if (y.size() != 1 || y[0].shape().c != out_channels_) {
    throw ConfigError("stem inverse: expects one level with " + std::to_string(out_channels_) +
                      " channels");
  }
  Tensor<T> dup = depth_to_space(y[0], kBlock);
  const Shape& s = dup.shape();
  Tensor<T> img(Shape{s.n, in_channels_, s.h, s.w});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < in_channels_; ++c) {
      const T* src = dup.raw() + dup.index(n, c, 0, 0);
      std::copy(src, src + s.plane(), img.raw() + img.index(n, c, 0, 0));
    }
  if (cache) {
    auto c = std::make_unique<StemCache>();
    c->input = img.shape();
    *cache = std::move(c);
  }
  return FeaturePyramid<T>({std::move(img)});
}

template <typename T>
FeaturePyramid<T> SpaceToDepthStem<T>::backward(const BlockCache& cache,
                                                const FeaturePyramid<T>& grad_out) {
  const Shape& in = dynamic_cast<const StemCache&>(cache).input;
  Tensor<T> gdup = depth_to_space(grad_out[0], kBlock);
  Tensor<T> gx(in);
  const int reps = gdup.shape().c;
  for (int n = 0; n < in.n; ++n)
    for (int c = 0; c < reps; ++c) {
      const T* src = gdup.raw() + gdup.index(n, c, 0, 0);
      T* dst = gx.raw() + gx.index(n, c % in_channels_, 0, 0);
      for (std::size_t i = 0; i < in.plane(); ++i) dst[i] += src[i];
    }
  return FeaturePyramid<T>({std::move(gx)});
}

#define REVBIFPN_INSTANTIATE(T)                                                   \
  template std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>&, int); \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);         \
  template class RevBlock<T>;                                                     \
  template class ResidualStage<T>;                                                \
  template class Silo<T>;                                                         \
  template class SpaceToDepthStem<T>;

REVBIFPN_INSTANTIATE(float)
REVBIFPN_INSTANTIATE(double)
#undef REVBIFPN_INSTANTIATE

}  // namespace revbifpn
