#include "revbifpn/backbone.hpp"

#include <cmath>

namespace revbifpn {

namespace {

constexpr std::array<double, 4> kNeckRatio{48.0 / 48.0, 64.0 / 64.0, 128.0 / 80.0, 320.0 / 160.0};

MBConvSpec head_spec(MBConvSpec s) {
  s.zero_init_last_norm = false;
  return s;
}

}  // namespace

int round_to_multiple_of_16(double channels) {
  return std::max(16, static_cast<int>(std::lround(channels / 16.0)) * 16);
}

std::array<int, 4> BackboneConfig::scaled_channels() const {
  std::array<int, 4> out{};
  for (std::size_t i = 0; i < 4; ++i) out[i] = round_to_multiple_of_16(channels[i] * width_multiplier);
  return out;
}

std::array<int, 4> BackboneConfig::scaled_neck_channels() const {
  std::array<int, 4> out{};
  const auto c = scaled_channels();
  for (std::size_t i = 0; i < 4; ++i) {
    out[i] = neck_channels[i] > 0 ? round_to_multiple_of_16(neck_channels[i] * width_multiplier)
                                  : round_to_multiple_of_16(c[i] * kNeckRatio[i]);
  }
  return out;
}

int BackboneConfig::scaled_head_channels() const {
  if (head_channels > 0) return round_to_multiple_of_16(head_channels * width_multiplier);
  return 2 * scaled_neck_channels()[3];
}

void BackboneConfig::validate() const {
  if (height < 32 || width < 32 || height % 32 != 0 || width % 32 != 0) {
    throw ConfigError("BackboneConfig: input " + std::to_string(height) + "x" +
                      std::to_string(width) + " must be divisible by 32");
  }
  if (!(width_multiplier > 0.0)) throw ConfigError("BackboneConfig: width multiplier must be positive");
  if (extra_depth < 0) throw ConfigError("BackboneConfig: extra depth must be >= 0");
  if (in_channels < 1 || num_classes < 2) {
    throw ConfigError("BackboneConfig: need >= 1 input channel and >= 2 classes");
  }
  for (int c : channels) {
    if (c < 1) throw ConfigError("BackboneConfig: channel counts must be positive");
  }
  const int c0 = scaled_channels()[0];
  if (c0 < 16 * in_channels) {
    throw ConfigError("BackboneConfig: c_0 = " + std::to_string(c0) +
                      " cannot hold the SpaceToDepth stem output of " + std::to_string(in_channels) +
                      " input channels");
  }
}

BackboneConfig BackboneConfig::s0() { return BackboneConfig{}; }

BackboneConfig BackboneConfig::toy() {
  BackboneConfig c;
  c.channels = {16, 16, 16, 16};
  c.extra_depth = 1;
  c.height = 64;
  c.width = 64;
  c.in_channels = 1;
  c.num_classes = 4;
  return c;
}

template <typename T>
std::unique_ptr<Tape<T>> build_backbone(const BackboneConfig& config, BackwardMode mode, Rng& rng) {
  config.validate();
  const auto c = config.scaled_channels();
  auto tape = std::make_unique<Tape<T>>(mode);
  tape->push(std::make_unique<SpaceToDepthStem<T>>(config.in_channels, c[0]));
  for (int levels = 1; levels < 4; ++levels) {
    std::vector<int> have(c.begin(), c.begin() + levels);
    tape->push(std::make_unique<ResidualStage<T>>(have, rng, config.profile));
    SiloSpec spec{std::vector<int>(c.begin(), c.begin() + levels + 1), true, config.profile};
    tape->push(std::make_unique<Silo<T>>(spec, rng));
  }
  const std::vector<int> all(c.begin(), c.end());
  for (int d = 0; d < config.extra_depth; ++d) {
    tape->push(std::make_unique<ResidualStage<T>>(all, rng, config.profile));
    tape->push(std::make_unique<Silo<T>>(SiloSpec{all, false, config.profile}, rng));
  }
  (void)tape->output_shapes({Shape{1, config.in_channels, config.height, config.width}});
  return tape;
}

template <typename T>
std::size_t HeadCache<T>::bytes() const {
  std::size_t b = final_in.bytes() + final_conv_out.bytes() + final_norm.normalized.bytes() +
                  final_pre_act.bytes() + pooled.bytes();
  for (const auto& m : neck) b += m.bytes();
  for (const auto& m : down) b += m.bytes();
  return b;
}

template <typename T>
ClassificationHead<T>::ClassificationHead(std::span<const int> pyramid_channels,
                                          std::span<const int> neck_channels, int head_channels,
                                          int num_classes, const StreamProfile& profile, Rng& rng)
    : num_classes_(num_classes) {
  if (pyramid_channels.size() != 4 || neck_channels.size() != 4) {
    throw ConfigError("ClassificationHead: expects a 4-level pyramid");
  }
  for (int i = 0; i < 4; ++i) {
    neck_.emplace_back(head_spec(make_residual_transform(i, pyramid_channels[i], neck_channels[i], profile)), rng);
  }
  for (int i = 0; i < 3; ++i) {
    down_.emplace_back(head_spec(make_resample_transform(i, i + 1, neck_channels[i], neck_channels[i + 1], profile)), rng);
  }
  final_conv_ = Conv2d<T>(neck_channels[3], head_channels, 1, 1, 0, 1, false, rng);
  final_norm_ = BatchNorm<T>(head_channels);
  dense_ = Dense<T>(head_channels, num_classes, rng);
}

template <typename T>
Tensor<T> ClassificationHead<T>::forward(const FeaturePyramid<T>& p, const ForwardContext& ctx,
                                         HeadCache<T>* cache) {
  if (p.size() != 4) throw ConfigError("ClassificationHead: expects 4 pyramid levels, got " + std::to_string(p.size()));
  if (cache) {
    cache->neck.assign(4, {});
    cache->down.assign(3, {});
    cache->input_shapes = p.shapes();
  }
  std::vector<Tensor<T>> a;
  for (int i = 0; i < 4; ++i) a.push_back(neck_[i].forward(p[i], ctx, cache ? &cache->neck[i] : nullptr));
  Tensor<T> acc = a[0];
  for (int i = 0; i < 3; ++i) {
    Tensor<T> d = down_[i].forward(acc, ctx, cache ? &cache->down[i] : nullptr);
    acc = elementwise(Elementwise::kAdd, a[i + 1], d);
  }
  NormCache<T> nc;
  Tensor<T> conv = final_conv_.forward(acc);
  Tensor<T> pre = final_norm_.forward(conv, ctx, &nc);
  Tensor<T> act = hard_swish(pre);
  Tensor<T> pooled = global_avg_pool(act);
  Tensor<T> logits = dense_.forward(pooled);
  if (cache) {
    cache->final_shape = act.shape();
    cache->final_in = std::move(acc);
    cache->final_conv_out = std::move(conv);
    cache->final_norm = std::move(nc);
    cache->final_pre_act = std::move(pre);
    cache->pooled = std::move(pooled);
  }
  return logits;
}

template <typename T>
FeaturePyramid<T> ClassificationHead<T>::backward(const HeadCache<T>& cache, const Tensor<T>& grad_logits) {
  Tensor<T> g = dense_.backward(cache.pooled, grad_logits);
  g = global_avg_pool_backward(cache.final_shape, g);
  g = hard_swish_backward(cache.final_pre_act, g);
  g = final_norm_.backward(cache.final_norm, g);
  Tensor<T> gacc = final_conv_.backward(cache.final_in, g);
  std::vector<Tensor<T>> ga(4);
  for (int i = 2; i >= 0; --i) {
    ga[i + 1] = gacc;
    gacc = down_[i].backward(cache.down[i], gacc);
  }
  ga[0] = std::move(gacc);
  FeaturePyramid<T> gp;
  for (int i = 0; i < 4; ++i) gp.levels.push_back(neck_[i].backward(cache.neck[i], ga[i]));
  return gp;
}

template <typename T>
std::uint64_t ClassificationHead<T>::macs(const std::vector<Shape>& in) const {
  std::uint64_t m = 0;
  std::vector<Shape> a;
  for (int i = 0; i < 4; ++i) {
    m += neck_[i].macs(in[i]);
    a.push_back(neck_[i].output_shape(in[i]));
  }
  Shape acc = a[0];
  for (int i = 0; i < 3; ++i) {
    m += down_[i].macs(acc);
    acc = a[i + 1];
  }
  m += final_conv_.macs(acc);
  m += dense_.macs(acc.n);
  return m;
}

template <typename T>
std::size_t ClassificationHead<T>::param_count() const {
  std::size_t p = final_conv_.param_count() + final_norm_.param_count() + dense_.param_count();
  for (const auto& m : neck_) p += m.param_count();
  for (const auto& m : down_) p += m.param_count();
  return p;
}

template <typename T>
void ClassificationHead<T>::collect(std::vector<ParamRef<T>>& out, const std::string& prefix) {
  for (int i = 0; i < 4; ++i) neck_[i].collect(out, prefix + ".neck" + std::to_string(i));
  for (int i = 0; i < 3; ++i) down_[i].collect(out, prefix + ".down" + std::to_string(i));
  final_conv_.collect(out, prefix + ".conv");
  final_norm_.collect(out, prefix + ".bn");
  dense_.collect(out, prefix + ".dense");
}

template <typename T>
Model<T>::Model(const BackboneConfig& config, BackwardMode mode, std::uint64_t seed) : config_(config) {
  Rng rng(seed);
  tape_ = build_backbone<T>(config, mode, rng);
  const auto c = config.scaled_channels();
  const auto neck = config.scaled_neck_channels();
  head_ = std::make_unique<ClassificationHead<T>>(c, neck, config.scaled_head_channels(),
                                                  config.num_classes, config.profile, rng);
}

template <typename T>
FeaturePyramid<T> Model<T>::features(const Tensor<T>& images, std::uint64_t invocation) {
  const ForwardContext ctx{invocation, Phase::kForward, nullptr};
  FeaturePyramid<T> p({images});
  (void)tape_->output_shapes(p.shapes());
  for (int i = 0; i < tape_->size(); ++i) p = tape_->block(i).forward(p, ctx, nullptr);
  return p;
}

template <typename T>
Tensor<T> Model<T>::logits(const Tensor<T>& images, std::uint64_t invocation) {
  const ForwardContext ctx{invocation, Phase::kForward, nullptr};
  return head_->forward(features(images, invocation), ctx, nullptr);
}

template <typename T>
T Model<T>::loss(const Tensor<T>& images, std::span<const int> labels, std::uint64_t invocation) {
  return softmax_cross_entropy(logits(images, invocation), labels);
}

template <typename T>
StepResult<T> Model<T>::loss_and_grad(const Tensor<T>& images, std::span<const int> labels,
                                      std::uint64_t invocation) {
  auto params = parameters();
  zero_grads<T>(params);
  tape_->reset_counters();
  MemoryTracker& tracker = tape_->tracker();
  tracker.reset();

  FeaturePyramid<T> pyramid = tape_->forward(FeaturePyramid<T>({images}), invocation);
  const ForwardContext ctx{invocation, Phase::kForward, nullptr};
  HeadCache<T> hc;
  Tensor<T> logits = head_->forward(pyramid, ctx, &hc);
  pyramid = FeaturePyramid<T>{};
  auto head_alloc = tracker.acquire("head.cache", hc.bytes());

  StepResult<T> r;
  Tensor<T> grad_logits;
  r.loss = softmax_cross_entropy(logits, labels, &grad_logits);
  FeaturePyramid<T> grad = head_->backward(hc, grad_logits);
  hc = HeadCache<T>{};
  head_alloc.release();
  tape_->backward(grad);
  tracker.check_balanced();

  double sq = 0.0;
  for (const auto& p : params)
    for (T g : p.grad) sq += static_cast<double>(g) * g;
  r.grad_norm = std::sqrt(sq);
  std::tie(r.fwd_evals_forward, r.fwd_evals_backward) = count_forward_ops(*tape_);
  r.peak_activation_bytes = tracker.peak_bytes();
  return r;
}

template <typename T>
std::vector<ParamRef<T>> Model<T>::parameters() {
  auto p = tape_->parameters();
  head_->collect(p, "head");
  return p;
}

template <typename T>
std::uint64_t Model<T>::backbone_macs(int batch) const {
  std::vector<Shape> shapes{Shape{batch, config_.in_channels, config_.height, config_.width}};
  std::uint64_t m = 0;
  for (int i = 0; i < tape_->size(); ++i) {
    m += tape_->block(i).macs(shapes);
    shapes = tape_->block(i).output_shapes(shapes);
  }
  return m;
}

template <typename T>
std::uint64_t Model<T>::head_macs(int batch) const {
  const auto shapes = tape_->output_shapes({Shape{batch, config_.in_channels, config_.height, config_.width}});
  return head_->macs(shapes);
}

template <typename T>
std::size_t Model<T>::backbone_params() const {
  std::size_t p = 0;
  for (int i = 0; i < tape_->size(); ++i) p += tape_->block(i).param_count();
  return p;
}

template <typename T>
std::size_t Model<T>::head_params() const {
  return head_->param_count();
}

template <typename T>
std::pair<Tensor<T>, std::vector<int>> SyntheticDataset<T>::batch(int index, int batch) const {
  const Shape& s = images.shape();
  Tensor<T> out(Shape{batch, s.c, s.h, s.w});
  std::vector<int> lab(static_cast<std::size_t>(batch));
  const std::size_t sample = static_cast<std::size_t>(s.c) * s.plane();
  for (int b = 0; b < batch; ++b) {
    const int src = static_cast<int>((static_cast<long long>(index) * batch + b) % s.n);
    std::copy(images.raw() + src * sample, images.raw() + (src + 1) * sample, out.raw() + b * sample);
    lab[static_cast<std::size_t>(b)] = labels[static_cast<std::size_t>(src)];
  }
  return {std::move(out), std::move(lab)};
}

template <typename T>
SyntheticDataset<T> make_synthetic_dataset(const DatasetSpec& spec, std::uint64_t seed) {
  if (spec.count < 1 || spec.classes < 2) throw ConfigError("dataset: need >= 1 sample and >= 2 classes");
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<int> pick(0, spec.classes - 1);
  const std::size_t sample = static_cast<std::size_t>(spec.channels) * spec.height * spec.width;
  std::vector<std::vector<double>> protos(static_cast<std::size_t>(spec.classes), std::vector<double>(sample));
  for (auto& p : protos)
    for (double& v : p) v = normal(rng);

  SyntheticDataset<T> ds;
  ds.images = Tensor<T>(Shape{spec.count, spec.channels, spec.height, spec.width});
  ds.labels.resize(static_cast<std::size_t>(spec.count));
  std::vector<double> x(sample);
  for (int i = 0; i < spec.count; ++i) {
    const auto& proto = protos[static_cast<std::size_t>(pick(rng))];
    for (std::size_t j = 0; j < sample; ++j) x[j] = proto[j] + spec.noise * normal(rng);
    int best = 0;
    double best_d = INFINITY;
    for (int k = 0; k < spec.classes; ++k) {
      double d = 0.0;
      for (std::size_t j = 0; j < sample; ++j) {
        const double e = x[j] - protos[static_cast<std::size_t>(k)][j];
        d += e * e;
      }
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    ds.labels[static_cast<std::size_t>(i)] = best;
    for (std::size_t j = 0; j < sample; ++j) ds.images[i * sample + j] = static_cast<T>(x[j]);
  }
  return ds;
}

template <typename T>
TrainRecord train_toy(const BackboneConfig& config, const SyntheticDataset<T>& data,
                      BackwardMode mode, const TrainOptions& options, std::uint64_t seed) {
  Model<T> model(config, mode, seed);
  auto params = model.parameters();
  std::vector<std::vector<T>> velocity;
  for (const auto& p : params) velocity.emplace_back(p.value.size(), T(0));
  const T lr = static_cast<T>(options.learning_rate);
  const T mu = static_cast<T>(options.momentum);

  TrainRecord record;
  record.mode = mode;
  for (int step = 0; step < options.steps; ++step) {
    auto [images, labels] = data.batch(step, options.batch);
    const StepResult<T> r = model.loss_and_grad(images, labels, static_cast<std::uint64_t>(step) + 1);
    if (!std::isfinite(static_cast<double>(r.loss))) {
      throw NumericError("training diverged: non-finite loss at step " + std::to_string(step));
    }
    record.steps.push_back({step, static_cast<double>(r.loss), r.grad_norm, r.fwd_evals_forward,
                            r.fwd_evals_backward, r.peak_activation_bytes});
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& v = velocity[i];
      for (std::size_t j = 0; j < v.size(); ++j) {
        v[j] = mu * v[j] + params[i].grad[j];
        params[i].value[j] -= lr * v[j];
      }
    }
  }
  return record;
}

#define REVBIFPN_INSTANTIATE(T)                                                                   \
  template std::unique_ptr<Tape<T>> build_backbone<T>(const BackboneConfig&, BackwardMode, Rng&); \
  template struct HeadCache<T>;                                                                   \
  template class ClassificationHead<T>;                                                           \
  template class Model<T>;                                                                        \
  template struct SyntheticDataset<T>;                                                            \
  template SyntheticDataset<T> make_synthetic_dataset<T>(const DatasetSpec&, std::uint64_t);      \
  template TrainRecord train_toy<T>(const BackboneConfig&, const SyntheticDataset<T>&,            \
                                    BackwardMode, const TrainOptions&, std::uint64_t);

REVBIFPN_INSTANTIATE(float)
REVBIFPN_INSTANTIATE(double)
#undef REVBIFPN_INSTANTIATE

}  // namespace revbifpn
