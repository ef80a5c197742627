#pragma once

#include <memory>
#include <string>
#include <vector>

#include "revbifpn/layers.hpp"
#include "revbifpn/pyramid.hpp"

namespace revbifpn {

// Intermediate state a block needs for its backward pass.
struct BlockCache {
  virtual ~BlockCache() = default;
  [[nodiscard]] virtual std::size_t bytes() const = 0;
};

// A pyramid-to-pyramid map whose input can be reconstructed from its output.
template <typename T>
class ReversibleBlock {
 public:
  virtual ~ReversibleBlock() = default;

  [[nodiscard]] virtual std::string kind() const = 0;

  // Evaluates the block. When cache is non-null it receives the state backward()
  // needs, so no transform has to be evaluated again.
  virtual FeaturePyramid<T> forward(const FeaturePyramid<T>& x, const ForwardContext& ctx,
                                    std::unique_ptr<BlockCache>* cache) = 0;
  // Reconstructs the input from the output. Every transform is evaluated once,
  // at exactly the input it saw during forward(), so the cache filled here is
  // interchangeable with the one forward() produces.
  virtual FeaturePyramid<T> inverse(const FeaturePyramid<T>& y, const ForwardContext& ctx,
                                    std::unique_ptr<BlockCache>* cache) = 0;
  // Accumulates parameter gradients and returns the input gradient.
  virtual FeaturePyramid<T> backward(const BlockCache& cache, const FeaturePyramid<T>& grad_out) = 0;

  // Output shapes for the given input shapes; throws ConfigError on mismatch.
  [[nodiscard]] virtual std::vector<Shape> output_shapes(const std::vector<Shape>& in) const = 0;
  [[nodiscard]] virtual std::uint64_t macs(const std::vector<Shape>& in) const = 0;
  [[nodiscard]] virtual std::size_t param_count() const = 0;
  // F-transform evaluations in one forward() (and, equally, one inverse()).
  [[nodiscard]] virtual int transform_evals() const = 0;
  virtual void collect(std::vector<ParamRef<T>>& out, const std::string& prefix) = 0;
  virtual std::vector<BatchNorm<T>*> norms() { return {}; }
};

}  // namespace revbifpn
