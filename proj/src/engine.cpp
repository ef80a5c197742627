#include "revbifpn/engine.hpp"

namespace revbifpn {

std::string to_string(BackwardMode m) { return m == BackwardMode::kStored ? "stored" : "recompute"; }

BackwardMode parse_backward_mode(const std::string& s) {
  if (s == "stored") return BackwardMode::kStored;
  if (s == "recompute") return BackwardMode::kRecompute;
  throw ConfigError("unknown backward mode '" + s + "' (expected stored|recompute)");
}

template <typename T>
Tape<T>::Tape(BackwardMode mode) : mode_(mode) {}

template <typename T>
void Tape<T>::push(std::unique_ptr<ReversibleBlock<T>> block) {
  if (!block) throw ConfigError("Tape: null block");
  if (forward_done_) throw StateError("Tape: cannot add blocks between forward and backward");
  blocks_.push_back(std::move(block));
}

template <typename T>
void Tape<T>::set_mode(BackwardMode m) {
  if (forward_done_) throw StateError("Tape: cannot change mode between forward and backward");
  mode_ = m;
}

template <typename T>
std::vector<Shape> Tape<T>::output_shapes(const std::vector<Shape>& in) const {
  std::vector<Shape> shapes = in;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    try {
      shapes = blocks_[i]->output_shapes(shapes);
    } catch (const ConfigError& e) {
      throw ConfigError("block " + std::to_string(i) + " (" + blocks_[i]->kind() + "): " + e.what());
    }
  }
  return shapes;
}

template <typename T>
void Tape<T>::clear_step_state() {
  cache_alloc_.clear();
  caches_.clear();
  saved_alloc_.clear();
  saved_.clear();
  forward_done_ = false;
}

template <typename T>
FeaturePyramid<T> Tape<T>::forward(const FeaturePyramid<T>& input, std::uint64_t invocation) {
  clear_step_state();
  output_shapes_ = output_shapes(input.shapes());
  invocation_ = invocation;
  const ForwardContext ctx{invocation, Phase::kForward, &counters_};

  FeaturePyramid<T> current = input;
  auto current_alloc = tracker_.acquire("input", current.bytes());
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string tag = "block" + std::to_string(i);
    std::unique_ptr<BlockCache> cache;
    FeaturePyramid<T> next = blocks_[i]->forward(current, ctx, &cache);
    auto cache_alloc = tracker_.acquire(tag + ".cache", cache->bytes());
    auto next_alloc = tracker_.acquire(tag + ".out", next.bytes());
    if (mode_ == BackwardMode::kStored) {
      saved_.push_back(std::move(current));
      saved_alloc_.push_back(std::move(current_alloc));
      caches_.push_back(std::move(cache));
      cache_alloc_.push_back(std::move(cache_alloc));
    }
    // Recompute mode drops the input and the cache here (RAII releases).
    current = std::move(next);
    current_alloc = std::move(next_alloc);
  }
  if (mode_ == BackwardMode::kRecompute) {
    saved_.push_back(current);
    saved_alloc_.push_back(std::move(current_alloc));
  }
  forward_done_ = true;
  return current;
}

template <typename T>
FeaturePyramid<T> Tape<T>::backward(const FeaturePyramid<T>& grad_out) {
  if (!forward_done_) throw StateError("Tape::backward called before forward");
  if (grad_out.shapes() != output_shapes_) {
    throw ConfigError("Tape::backward: gradient shapes do not match the forward output");
  }
  const ForwardContext ctx{invocation_, Phase::kBackward, &counters_};

  FeaturePyramid<T> grad = grad_out;
  auto grad_alloc = tracker_.acquire("grad", grad.bytes());

  if (mode_ == BackwardMode::kStored) {
    for (std::size_t i = blocks_.size(); i-- > 0;) {
      const std::string tag = "block" + std::to_string(i);
      FeaturePyramid<T> gx = blocks_[i]->backward(*caches_[i], grad);
      auto gx_alloc = tracker_.acquire(tag + ".grad_in", gx.bytes());
      grad = std::move(gx);
      grad_alloc = std::move(gx_alloc);
      cache_alloc_[i].release();
      caches_[i].reset();
      saved_alloc_[i].release();
      saved_[i] = FeaturePyramid<T>{};
    }
  } else {
    FeaturePyramid<T> y = std::move(saved_.front());
    auto y_alloc = std::move(saved_alloc_.front());
    saved_.clear();
    saved_alloc_.clear();
    for (std::size_t i = blocks_.size(); i-- > 0;) {
      const std::string tag = "block" + std::to_string(i);
      std::unique_ptr<BlockCache> cache;
      FeaturePyramid<T> x = blocks_[i]->inverse(y, ctx, &cache);
      auto x_alloc = tracker_.acquire(tag + ".recomputed_in", x.bytes());
      auto cache_alloc = tracker_.acquire(tag + ".recomputed_cache", cache->bytes());
      FeaturePyramid<T> gx = blocks_[i]->backward(*cache, grad);
      auto gx_alloc = tracker_.acquire(tag + ".grad_in", gx.bytes());
      grad = std::move(gx);
      grad_alloc = std::move(gx_alloc);
      y = std::move(x);
      y_alloc = std::move(x_alloc);
    }
  }
  clear_step_state();
  return grad;
}

template <typename T>
std::vector<FeaturePyramid<T>> Tape<T>::reconstruct_inputs(const FeaturePyramid<T>& output,
                                                           std::uint64_t invocation) {
  const ForwardContext ctx{invocation, Phase::kBackward, nullptr};
  std::vector<FeaturePyramid<T>> inputs(blocks_.size());
  FeaturePyramid<T> y = output;
  for (std::size_t i = blocks_.size(); i-- > 0;) {
    y = blocks_[i]->inverse(y, ctx, nullptr);
    inputs[i] = y;
  }
  return inputs;
}

template <typename T>
std::vector<ParamRef<T>> Tape<T>::parameters() {
  std::vector<ParamRef<T>> out;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    blocks_[i]->collect(out, "block" + std::to_string(i) + "." + blocks_[i]->kind());
  }
  return out;
}

template <typename T>
std::vector<NamedTensor<T>> Tape<T>::parameter_grads() {
  std::vector<NamedTensor<T>> out;
  for (const auto& p : parameters()) {
    out.push_back({p.name, Tensor<T>(p.shape, std::vector<T>(p.grad.begin(), p.grad.end()))});
  }
  return out;
}

template <typename T>
void Tape<T>::zero_grad() {
  const auto params = parameters();
  zero_grads<T>(params);
}

template <typename T>
std::vector<BatchNorm<T>*> Tape<T>::norms() {
  std::vector<BatchNorm<T>*> out;
  for (auto& b : blocks_) {
    auto n = b->norms();
    out.insert(out.end(), n.begin(), n.end());
  }
  return out;
}

template <typename T>
std::pair<std::uint64_t, std::uint64_t> count_forward_ops(const Tape<T>& tape) {
  return {tape.counters().forward_phase, tape.counters().backward_phase};
}

template class Tape<float>;
template class Tape<double>;
template std::pair<std::uint64_t, std::uint64_t> count_forward_ops(const Tape<float>&);
template std::pair<std::uint64_t, std::uint64_t> count_forward_ops(const Tape<double>&);

}  // namespace revbifpn
