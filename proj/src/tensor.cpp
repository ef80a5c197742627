#include "revbifpn/tensor.hpp"

#include <algorithm>
#include <utility>

namespace revbifpn {

std::string to_string(Precision p) { return p == Precision::kSingle ? "single" : "double"; }

Precision parse_precision(const std::string& s) {
  if (s == "single" || s == "float" || s == "f32") return Precision::kSingle;
  if (s == "double" || s == "f64") return Precision::kDouble;
  throw ConfigError("unknown precision '" + s + "' (expected single|double)");
}

std::string Shape::str() const {
  return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
         std::to_string(w) + ")";
}

void check_shape(const Shape& s, const char* what) {
  if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1) {
    throw ConfigError(std::string(what) + ": all dimensions must be >= 1, got " + s.str());
  }
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(shape) {
  check_shape(shape, "Tensor");
  data_.assign(shape.numel(), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
  check_shape(shape, "Tensor");
  if (data_.size() != shape.numel()) {
    throw ConfigError("Tensor: data length " + std::to_string(data_.size()) +
                      " does not match shape " + shape.str());
  }
}

template <typename T>
void Tensor<T>::fill(T v) {
  std::fill(data_.begin(), data_.end(), v);
}

template <typename T>
bool Tensor<T>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ConfigError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " +
                      b.shape().str());
  }
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

template <typename T>
double max_abs(const Tensor<T>& a) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i])));
  return m;
}

template class Tensor<float>;
template class Tensor<double>;
template void require_same_shape(const Tensor<float>&, const Tensor<float>&, const char*);
template void require_same_shape(const Tensor<double>&, const Tensor<double>&, const char*);
template double max_abs_diff(const Tensor<float>&, const Tensor<float>&);
template double max_abs_diff(const Tensor<double>&, const Tensor<double>&);
template double max_abs(const Tensor<float>&);
template double max_abs(const Tensor<double>&);

}  // namespace revbifpn
