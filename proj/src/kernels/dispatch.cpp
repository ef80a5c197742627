#include <atomic>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "revbifpn/kernels.hpp"

namespace revbifpn::kernels {

namespace {
std::atomic<Backend> g_backend{Backend::kOpenMP};
}

Shape ConvGeometry::out() const {
  return Shape{in.n, out_c, (in.h + 2 * padding - kh) / stride + 1,
               (in.w + 2 * padding - kw) / stride + 1};
}

void ConvGeometry::validate() const {
  check_shape(in, "conv2d input");
  auto fail = [&](const std::string& why) {
    throw ConfigError("conv2d: " + why + " (input " + in.str() + ", out_c " +
                      std::to_string(out_c) + ", kernel " + std::to_string(kh) + "x" +
                      std::to_string(kw) + ", stride " + std::to_string(stride) + ", padding " +
                      std::to_string(padding) + ", groups " + std::to_string(groups) + ")");
  };
  if (out_c < 1 || kh < 1 || kw < 1) fail("non-positive kernel dims");
  if (stride < 1) fail("stride must be positive");
  if (padding < 0) fail("padding must be non-negative");
  if (groups < 1) fail("groups must be positive");
  if (in.c % groups != 0) fail("input channels not divisible by groups");
  if (out_c % groups != 0) fail("output channels not divisible by groups");
  if (in.h + 2 * padding < kh || in.w + 2 * padding < kw) fail("output spatial size < 1");
}

void set_backend(Backend b) { g_backend.store(b); }
Backend backend() { return g_backend.load(); }

bool openmp_available() {
#ifdef _OPENMP
  return true;
#else
  return false;
#endif
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> y) {
  if (backend() == Backend::kOpenMP) {
    omp::conv2d_forward(g, x, weight, bias, y);
  } else {
    serial::conv2d_forward(g, x, weight, bias, y);
  }
}

template <typename T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> gy,
                           std::span<const T> weight, std::span<T> gx) {
  if (backend() == Backend::kOpenMP) {
    omp::conv2d_backward_input(g, gy, weight, gx);
  } else {
    serial::conv2d_backward_input(g, gy, weight, gx);
  }
}

template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, std::span<const T> x, std::span<const T> gy,
                            std::span<T> gw, std::span<T> gb) {
  if (backend() == Backend::kOpenMP) {
    omp::conv2d_backward_weight(g, x, gy, gw, gb);
  } else {
    serial::conv2d_backward_weight(g, x, gy, gw, gb);
  }
}

template <typename T>
void bilinear_upsample_forward(const Shape& in, int factor, std::span<const T> x, std::span<T> y) {
  if (backend() == Backend::kOpenMP) {
    omp::bilinear_upsample_forward(in, factor, x, y);
  } else {
    serial::bilinear_upsample_forward(in, factor, x, y);
  }
}

template <typename T>
void bilinear_upsample_backward(const Shape& in, int factor, std::span<const T> gy,
                                std::span<T> gx) {
  if (backend() == Backend::kOpenMP) {
    omp::bilinear_upsample_backward(in, factor, gy, gx);
  } else {
    serial::bilinear_upsample_backward(in, factor, gy, gx);
  }
}

#define REVBIFPN_INSTANTIATE(T)                                                                  \
  template void conv2d_forward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,   \
                                  std::span<const T>, std::span<T>);                             \
  template void conv2d_backward_input<T>(const ConvGeometry&, std::span<const T>,                \
                                         std::span<const T>, std::span<T>);                      \
  template void conv2d_backward_weight<T>(const ConvGeometry&, std::span<const T>,               \
                                          std::span<const T>, std::span<T>, std::span<T>);       \
  template void bilinear_upsample_forward<T>(const Shape&, int, std::span<const T>, std::span<T>); \
  template void bilinear_upsample_backward<T>(const Shape&, int, std::span<const T>, std::span<T>);

REVBIFPN_INSTANTIATE(float)
REVBIFPN_INSTANTIATE(double)
#undef REVBIFPN_INSTANTIATE

}  // namespace revbifpn::kernels
