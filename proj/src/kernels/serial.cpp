#include "slices.hpp"

namespace revbifpn::kernels::serial {

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> y) {
  const Shape out = g.out();
  const T* b = bias.empty() ? nullptr : bias.data();
  for (int n = 0; n < out.n; ++n) {
    for (int oc = 0; oc < out.c; ++oc) {
      detail::conv_forward_plane(g, out, n, oc, x.data(), weight.data(), b, y.data());
    }
  }
}

template <typename T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> gy,
                           std::span<const T> weight, std::span<T> gx) {
  const Shape out = g.out();
  for (int n = 0; n < out.n; ++n) {
    for (int grp = 0; grp < g.groups; ++grp) {
      detail::conv_backward_input_group(g, out, n, grp, gy.data(), weight.data(), gx.data());
    }
  }
}

template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, std::span<const T> x, std::span<const T> gy,
                            std::span<T> gw, std::span<T> gb) {
  const Shape out = g.out();
  T* b = gb.empty() ? nullptr : gb.data();
  for (int oc = 0; oc < out.c; ++oc) {
    detail::conv_backward_weight_channel(g, out, oc, x.data(), gy.data(), gw.data(), b);
  }
}

template <typename T>
void bilinear_upsample_forward(const Shape& in, int factor, std::span<const T> x, std::span<T> y) {
  const auto ty = detail::bilinear_taps<T>(in.h, factor);
  const auto tx = detail::bilinear_taps<T>(in.w, factor);
  const std::size_t out_plane = in.plane() * factor * factor;
  for (int p = 0; p < in.n * in.c; ++p) {
    detail::bilinear_forward_plane(in, factor, ty, tx, x.data() + p * in.plane(),
                                   y.data() + p * out_plane);
  }
}

template <typename T>
void bilinear_upsample_backward(const Shape& in, int factor, std::span<const T> gy,
                                std::span<T> gx) {
  const auto ty = detail::bilinear_taps<T>(in.h, factor);
  const auto tx = detail::bilinear_taps<T>(in.w, factor);
  const std::size_t out_plane = in.plane() * factor * factor;
  for (int p = 0; p < in.n * in.c; ++p) {
    detail::bilinear_backward_plane(in, factor, ty, tx, gy.data() + p * out_plane,
                                    gx.data() + p * in.plane());
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

}  // namespace revbifpn::kernels::serial
