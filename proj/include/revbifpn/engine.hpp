#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "revbifpn/block.hpp"
#include "revbifpn/memory.hpp"

namespace revbifpn {

enum class BackwardMode { kStored, kRecompute };

std::string to_string(BackwardMode m);
BackwardMode parse_backward_mode(const std::string& s);

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;
};

// Executes a sequence of reversible blocks. In stored mode every block input
// and every block cache is kept from forward to backward. In recompute mode only
// the final output is kept; backward walks the blocks in reverse, rebuilding
// each input with inverse() and reusing the transform evaluations of that
// inverse for the block's backward pass.
template <typename T>
class Tape {
 public:
  explicit Tape(BackwardMode mode = BackwardMode::kStored);
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void push(std::unique_ptr<ReversibleBlock<T>> block);
  [[nodiscard]] int size() const { return static_cast<int>(blocks_.size()); }
  ReversibleBlock<T>& block(int i) { return *blocks_[static_cast<std::size_t>(i)]; }

  [[nodiscard]] BackwardMode mode() const { return mode_; }
  void set_mode(BackwardMode m);

  // Checks that consecutive blocks compose; names the failing block index.
  [[nodiscard]] std::vector<Shape> output_shapes(const std::vector<Shape>& in) const;

  // `invocation` identifies the step for batch-norm running statistics; the
  // recomputed forwards in backward() reuse it.
  FeaturePyramid<T> forward(const FeaturePyramid<T>& input, std::uint64_t invocation = 0);
  // Accumulates parameter gradients and returns the gradient w.r.t. the input.
  FeaturePyramid<T> backward(const FeaturePyramid<T>& grad_out);

  // Inputs of every block reconstructed by chaining inverses from `output`
  // (element 0 is the tape input). Does not touch counters or the registry.
  std::vector<FeaturePyramid<T>> reconstruct_inputs(const FeaturePyramid<T>& output,
                                                    std::uint64_t invocation = 0);

  [[nodiscard]] std::size_t saved_activation_count() const { return saved_.size(); }
  // Stored mode: block inputs from the last forward (recompute: the output).
  [[nodiscard]] const std::vector<FeaturePyramid<T>>& saved_activations() const { return saved_; }

  std::vector<ParamRef<T>> parameters();
  std::vector<NamedTensor<T>> parameter_grads();
  void zero_grad();
  std::vector<BatchNorm<T>*> norms();

  OpCounters& counters() { return counters_; }
  [[nodiscard]] const OpCounters& counters() const { return counters_; }
  void reset_counters() { counters_.reset(); }
  MemoryTracker& tracker() { return tracker_; }

 private:
  void clear_step_state();

  BackwardMode mode_;
  std::vector<std::unique_ptr<ReversibleBlock<T>>> blocks_;
  MemoryTracker tracker_;
  OpCounters counters_;

  bool forward_done_ = false;
  std::uint64_t invocation_ = 0;
  std::vector<Shape> output_shapes_;
  std::vector<FeaturePyramid<T>> saved_;
  std::vector<MemoryTracker::Allocation> saved_alloc_;
  std::vector<std::unique_ptr<BlockCache>> caches_;
  std::vector<MemoryTracker::Allocation> cache_alloc_;
};

// (F evaluations in the forward pass, F evaluations during backward) of the
// last step, read from the tape counters.
template <typename T>
std::pair<std::uint64_t, std::uint64_t> count_forward_ops(const Tape<T>& tape);

}  // namespace revbifpn
