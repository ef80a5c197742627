#pragma once

// Raw compute kernels. Every kernel has a serial reference in `serial::` and an
// OpenMP variant in `omp::`. The OpenMP variants split work only across output
// slices that the serial loop nest already treats independently and run the same
// per-slice body, so both produce bit-identical results.

#include <cstdint>
#include <span>

#include "revbifpn/tensor.hpp"

namespace revbifpn::kernels {

struct ConvGeometry {
  Shape in;
  int out_c = 1;
  int kh = 1;
  int kw = 1;
  int stride = 1;
  int padding = 0;
  int groups = 1;

  [[nodiscard]] int in_per_group() const { return in.c / groups; }
  [[nodiscard]] int out_per_group() const { return out_c / groups; }
  [[nodiscard]] Shape out() const;
  [[nodiscard]] std::size_t weight_numel() const {
    return static_cast<std::size_t>(out_c) * in_per_group() * kh * kw;
  }
  // Throws ConfigError naming the offending dims.
  void validate() const;
};

enum class Backend { kSerial, kOpenMP };

void set_backend(Backend b);
Backend backend();
bool openmp_available();
int max_threads();

namespace serial {

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> y);
// Overwrites gx.
template <typename T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> gy,
                           std::span<const T> weight, std::span<T> gx);
// Accumulates into gw (and gb when non-empty).
template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, std::span<const T> x, std::span<const T> gy,
                            std::span<T> gw, std::span<T> gb);

template <typename T>
void bilinear_upsample_forward(const Shape& in, int factor, std::span<const T> x, std::span<T> y);
// Overwrites gx.
template <typename T>
void bilinear_upsample_backward(const Shape& in, int factor, std::span<const T> gy,
                                std::span<T> gx);

}  // namespace serial

namespace omp {

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> y);
template <typename T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> gy,
                           std::span<const T> weight, std::span<T> gx);
template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, std::span<const T> x, std::span<const T> gy,
                            std::span<T> gw, std::span<T> gb);
template <typename T>
void bilinear_upsample_forward(const Shape& in, int factor, std::span<const T> x, std::span<T> y);
template <typename T>
void bilinear_upsample_backward(const Shape& in, int factor, std::span<const T> gy,
                                std::span<T> gx);

}  // namespace omp

// Dispatch on backend().
template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> y);
template <typename T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> gy,
                           std::span<const T> weight, std::span<T> gx);
template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, std::span<const T> x, std::span<const T> gy,
                            std::span<T> gw, std::span<T> gb);
template <typename T>
void bilinear_upsample_forward(const Shape& in, int factor, std::span<const T> x, std::span<T> y);
template <typename T>
void bilinear_upsample_backward(const Shape& in, int factor, std::span<const T> gy,
                                std::span<T> gx);

}  // namespace revbifpn::kernels
