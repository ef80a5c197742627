#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "revbifpn/errors.hpp"

namespace revbifpn {

enum class Precision { kSingle, kDouble };

std::string to_string(Precision p);
Precision parse_precision(const std::string& s);

// (batch, channels, height, width)
struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  [[nodiscard]] std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  [[nodiscard]] std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  [[nodiscard]] std::string str() const;

  friend bool operator==(const Shape&, const Shape&) = default;
};

// Dense rank-4 array stored row-major in (n, c, h, w) order.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> data);

  static Tensor zeros(Shape shape) { return Tensor(shape); }
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

  [[nodiscard]] const Shape& shape() const { return shape_; }
  [[nodiscard]] std::size_t numel() const { return data_.size(); }
  [[nodiscard]] std::size_t bytes() const { return data_.size() * sizeof(T); }
  [[nodiscard]] bool empty() const { return data_.empty(); }

  [[nodiscard]] std::span<T> data() { return data_; }
  [[nodiscard]] std::span<const T> data() const { return data_; }
  T* raw() { return data_.data(); }
  [[nodiscard]] const T* raw() const { return data_.data(); }

  [[nodiscard]] std::size_t index(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  T& at(int n, int c, int h, int w) { return data_[index(n, c, h, w)]; }
  [[nodiscard]] const T& at(int n, int c, int h, int w) const {
    return data_[index(n, c, h, w)];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  void fill(T v);
  [[nodiscard]] bool all_finite() const;

  // Convert to another precision (used by oracles that check float against double).
  template <typename U>
  [[nodiscard]] Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

 private:
  Shape shape_{};
  std::vector<T> data_;
};

void check_shape(const Shape& s, const char* what);

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op);

// Largest |a-b| over all elements.
template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
double max_abs(const Tensor<T>& a);

#ifndef NDEBUG
#define REVBIFPN_DEBUG_CHECK_FINITE(t, where)                                   \
  do {                                                                          \
    if (!(t).all_finite()) throw ::revbifpn::NumericError(std::string("non-finite values after ") + (where)); \
  } while (0)
#else
#define REVBIFPN_DEBUG_CHECK_FINITE(t, where) \
  do {                                        \
  } while (0)
#endif

}  // namespace revbifpn
