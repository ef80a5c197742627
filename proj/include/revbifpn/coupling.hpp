#pragma once

// Additive couplings: the reversible residual block, the RevSilo, and the
// invertible SpaceToDepth stem.

#include <map>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "revbifpn/block.hpp"
#include "revbifpn/transform.hpp"

namespace revbifpn {

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& x, int first);
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

struct RevBlockSpec {
  int channels = 2;
  int split = 1;  // c_a; c_b = channels - split
  int level = 0;
  StreamProfile profile;

  // c_a == c_b == channels / 2; odd channel counts are rejected.
  static RevBlockSpec equal_split(int channels, int level, const StreamProfile& profile = {});
  void validate() const;
};

struct RevBlockCache {
  std::unique_ptr<TransformCache> f;
  std::unique_ptr<TransformCache> g;
  [[nodiscard]] std::size_t bytes() const {
    return (f ? f->bytes() : 0) + (g ? g->bytes() : 0);
  }
};

// y_a = x_a + F(x_b); y_b = x_b + G(y_a).
template <typename T>
class RevBlock {
 public:
  RevBlock(const RevBlockSpec& spec, Rng& rng);
  RevBlock(int split, std::unique_ptr<Transform<T>> f, std::unique_ptr<Transform<T>> g);

  Tensor<T> forward(const Tensor<T>& x, const ForwardContext& ctx, RevBlockCache* cache);
  Tensor<T> inverse(const Tensor<T>& y, const ForwardContext& ctx, RevBlockCache* cache);
  Tensor<T> backward(const RevBlockCache& cache, const Tensor<T>& grad_out);

  [[nodiscard]] Shape output_shape(const Shape& in) const;
  [[nodiscard]] std::uint64_t macs(const Shape& in) const;
  [[nodiscard]] std::size_t param_count() const { return f_->param_count() + g_->param_count(); }
  void collect(std::vector<ParamRef<T>>& out, const std::string& prefix);
  std::vector<BatchNorm<T>*> norms();

  Transform<T>& f() { return *f_; }
  Transform<T>& g() { return *g_; }

 private:
  int split_;
  std::unique_ptr<Transform<T>> f_;
  std::unique_ptr<Transform<T>> g_;
};

// One RevBlock per pyramid level.
template <typename T>
class ResidualStage final : public ReversibleBlock<T> {
 public:
  ResidualStage(std::span<const int> channels, Rng& rng, const StreamProfile& profile = {});

  [[nodiscard]] std::string kind() const override { return "revblocks"; }
  FeaturePyramid<T> forward(const FeaturePyramid<T>& x, const ForwardContext& ctx,
                            std::unique_ptr<BlockCache>* cache) override;
  FeaturePyramid<T> inverse(const FeaturePyramid<T>& y, const ForwardContext& ctx,
                            std::unique_ptr<BlockCache>* cache) override;
  FeaturePyramid<T> backward(const BlockCache& cache, const FeaturePyramid<T>& grad_out) override;
  [[nodiscard]] std::vector<Shape> output_shapes(const std::vector<Shape>& in) const override;
  [[nodiscard]] std::uint64_t macs(const std::vector<Shape>& in) const override;
  [[nodiscard]] std::size_t param_count() const override;
  [[nodiscard]] int transform_evals() const override { return 2 * static_cast<int>(blocks_.size()); }
  void collect(std::vector<ParamRef<T>>& out, const std::string& prefix) override;
  std::vector<BatchNorm<T>*> norms() override;

  RevBlock<T>& level(int i) { return blocks_[static_cast<std::size_t>(i)]; }

 private:
  std::vector<RevBlock<T>> blocks_;
};

struct SiloSpec {
  std::vector<int> channels;  // per output level; N = channels.size()
  bool expand = false;        // input has N-1 levels, level N-1 is injected as zeros
  StreamProfile profile;

  [[nodiscard]] int levels() const { return static_cast<int>(channels.size()); }
  void validate() const;
};

// RevSilo with additive coupling. With inputs x_k, intermediates m_k and
// outputs y_k over N levels:
//   m_0 = x_0,          m_k = x_k + sum_{i<k} D_{i,k}(x_i)     (high -> low)
//   y_{N-1} = m_{N-1},  y_k = m_k + sum_{j>k} U_{j,k}(m_j)     (low -> high)
// The inverse runs the two halves backwards and in strict level order.
template <typename T>
class Silo final : public ReversibleBlock<T> {
 public:
  using LevelPair = std::pair<int, int>;  // (source level, destination level)
  using TransformMap = std::map<LevelPair, std::unique_ptr<Transform<T>>>;

  Silo(const SiloSpec& spec, Rng& rng);
  // `down` must hold every (i, k) with i < k and `up` every (j, k) with j > k.
  Silo(std::vector<int> channels, bool expand, TransformMap down, TransformMap up);

  [[nodiscard]] std::string kind() const override { return expand_ ? "silo-expand" : "silo"; }
  FeaturePyramid<T> forward(const FeaturePyramid<T>& x, const ForwardContext& ctx,
                            std::unique_ptr<BlockCache>* cache) override;
  FeaturePyramid<T> inverse(const FeaturePyramid<T>& y, const ForwardContext& ctx,
                            std::unique_ptr<BlockCache>* cache) override;
  FeaturePyramid<T> backward(const BlockCache& cache, const FeaturePyramid<T>& grad_out) override;
  [[nodiscard]] std::vector<Shape> output_shapes(const std::vector<Shape>& in) const override;
  [[nodiscard]] std::uint64_t macs(const std::vector<Shape>& in) const override;
  [[nodiscard]] std::size_t param_count() const override;
  [[nodiscard]] int transform_evals() const override { return levels_ * (levels_ - 1); }
  void collect(std::vector<ParamRef<T>>& out, const std::string& prefix) override;
  std::vector<BatchNorm<T>*> norms() override;

  // Forward with explicit evaluation orders for the N intermediates and the N
  // outputs (each a permutation of 0..N-1).
  FeaturePyramid<T> forward_ordered(const FeaturePyramid<T>& x, const ForwardContext& ctx,
                                    std::span<const int> first_half,
                                    std::span<const int> second_half);

  struct InverseTrace {
    FeaturePyramid<T> intermediate;  // m_0..m_{N-1}
    FeaturePyramid<T> input;         // x_0..x_{N-1}, including an injected level
  };
  // Inverse that also reports the intermediates and, for expanding silos, the
  // reconstructed injected level.
  InverseTrace inverse_full(const FeaturePyramid<T>& y, const ForwardContext& ctx);

  [[nodiscard]] int levels() const { return levels_; }
  [[nodiscard]] bool expands() const { return expand_; }
  Transform<T>& down(int src, int dst) { return *down_.at({src, dst}); }
  Transform<T>& up(int src, int dst) { return *up_.at({src, dst}); }

 private:
  FeaturePyramid<T> full_input(const FeaturePyramid<T>& x) const;
  std::vector<Shape> full_input_shapes(const std::vector<Shape>& in) const;
  FeaturePyramid<T> run_forward(const FeaturePyramid<T>& x, const ForwardContext& ctx,
                                std::unique_ptr<BlockCache>* cache, std::span<const int> first,
                                std::span<const int> second);
  InverseTrace run_inverse(const FeaturePyramid<T>& y, const ForwardContext& ctx,
                           std::unique_ptr<BlockCache>* cache);

  int levels_;
  bool expand_;
  std::vector<int> channels_;
  TransformMap down_;
  TransformMap up_;
};

// SpaceToDepth with block 4. Input channels are repeated cyclically up to
// out_channels / 16 before the rearrangement; the inverse keeps the first copy.
template <typename T>
class SpaceToDepthStem final : public ReversibleBlock<T> {
 public:
  static constexpr int kBlock = 4;

  SpaceToDepthStem(int in_channels, int out_channels);

  [[nodiscard]] std::string kind() const override { return "stem"; }
  FeaturePyramid<T> forward(const FeaturePyramid<T>& x, const ForwardContext& ctx,
                            std::unique_ptr<BlockCache>* cache) override;
  FeaturePyramid<T> inverse(const FeaturePyramid<T>& y, const ForwardContext& ctx,
                            std::unique_ptr<BlockCache>* cache) override;
  FeaturePyramid<T> backward(const BlockCache& cache, const FeaturePyramid<T>& grad_out) override;
  [[nodiscard]] std::vector<Shape> output_shapes(const std::vector<Shape>& in) const override;
  [[nodiscard]] std::uint64_t macs(const std::vector<Shape>&) const override { return 0; }
  [[nodiscard]] std::size_t param_count() const override { return 0; }
  [[nodiscard]] int transform_evals() const override { return 0; }
  void collect(std::vector<ParamRef<T>>&, const std::string&) override {}

  [[nodiscard]] int in_channels() const { return in_channels_; }
  [[nodiscard]] int out_channels() const { return out_channels_; }

 private:
  int in_channels_;
  int out_channels_;
};

}  // namespace revbifpn
