#pragma once

#include <vector>

#include "revbifpn/tensor.hpp"

namespace revbifpn {

inline constexpr int kMaxPyramidLevels = 4;

// Ordered feature maps h_0..h_{N-1}; level i is expected at 1/2^i of level 0's
// resolution. Coupling code only relies on per-level shapes matching their
// transforms, so geometry is checked separately by validate().
template <typename T>
struct FeaturePyramid {
  std::vector<Tensor<T>> levels;

  FeaturePyramid() = default;
  explicit FeaturePyramid(std::vector<Tensor<T>> l) : levels(std::move(l)) {}

  [[nodiscard]] int size() const { return static_cast<int>(levels.size()); }
  Tensor<T>& operator[](int i) { return levels[static_cast<std::size_t>(i)]; }
  const Tensor<T>& operator[](int i) const { return levels[static_cast<std::size_t>(i)]; }

  [[nodiscard]] std::size_t bytes() const {
    std::size_t b = 0;
    for (const auto& t : levels) b += t.bytes();
    return b;
  }
  [[nodiscard]] std::vector<Shape> shapes() const {
    std::vector<Shape> s;
    s.reserve(levels.size());
    for (const auto& t : levels) s.push_back(t.shape());
    return s;
  }

  // 1 <= N <= 4, shared batch size, exact spatial halving per level.
  void validate() const {
    if (levels.empty() || size() > kMaxPyramidLevels) {
      throw ConfigError("FeaturePyramid: level count must be in [1, 4], got " +
                        std::to_string(size()));
    }
    const Shape& base = levels.front().shape();
    for (int i = 1; i < size(); ++i) {
      const Shape& s = levels[static_cast<std::size_t>(i)].shape();
      if (s.n != base.n) throw ConfigError("FeaturePyramid: batch size differs at level " + std::to_string(i));
      if ((base.h >> i) != s.h || (base.w >> i) != s.w || (s.h << i) != base.h ||
          (s.w << i) != base.w) {
        throw ConfigError("FeaturePyramid: level " + std::to_string(i) + " shape " + s.str() +
                          " is not level 0 " + base.str() + " halved " + std::to_string(i) +
                          " times");
      }
    }
  }
};

// max_i |a_i - b_i| / max_i |b_i| over all levels (0 when both are zero).
template <typename T>
double max_rel_error(const FeaturePyramid<T>& a, const FeaturePyramid<T>& b) {
  if (a.size() != b.size()) throw ConfigError("max_rel_error: level count mismatch");
  double diff = 0.0;
  double ref = 0.0;
  for (int i = 0; i < a.size(); ++i) {
    diff = std::max(diff, max_abs_diff(a[i], b[i]));
    ref = std::max(ref, max_abs(b[i]));
  }
  if (ref == 0.0) return diff;
  return diff / ref;
}

}  // namespace revbifpn
