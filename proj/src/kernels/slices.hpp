#pragma once

// Per-slice kernel bodies shared by the serial and OpenMP drivers. A slice is
// the unit the OpenMP driver hands to one thread; keeping the body in one place
// is what makes the two drivers bit-identical.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "revbifpn/kernels.hpp"

namespace revbifpn::kernels::detail {

// One output plane y[n, oc, :, :].
template <typename T>
inline void conv_forward_plane(const ConvGeometry& g, const Shape& out, int n, int oc,
                               const T* x, const T* weight, const T* bias, T* y) {
  const int icpg = g.in_per_group();
  const int grp = oc / g.out_per_group();
  const Shape& in = g.in;
  T* yp = y + (static_cast<std::size_t>(n) * out.c + oc) * out.plane();
  for (int oh = 0; oh < out.h; ++oh) {
    for (int ow = 0; ow < out.w; ++ow) {
      T acc = bias != nullptr ? bias[oc] : T(0);
      for (int icg = 0; icg < icpg; ++icg) {
        const int ic = grp * icpg + icg;
        const T* xp = x + (static_cast<std::size_t>(n) * in.c + ic) * in.plane();
        const T* wp = weight + (static_cast<std::size_t>(oc) * icpg + icg) * g.kh * g.kw;
        for (int kh = 0; kh < g.kh; ++kh) {
          const int ih = oh * g.stride - g.padding + kh;
          if (ih < 0 || ih >= in.h) continue;
          for (int kw = 0; kw < g.kw; ++kw) {
            const int iw = ow * g.stride - g.padding + kw;
            if (iw < 0 || iw >= in.w) continue;
            acc += xp[static_cast<std::size_t>(ih) * in.w + iw] * wp[kh * g.kw + kw];
          }
        }
      }
      yp[static_cast<std::size_t>(oh) * out.w + ow] = acc;
    }
  }
}

// Input gradient for batch n, group grp: every gx channel of the group is
// written only from this slice.
template <typename T>
inline void conv_backward_input_group(const ConvGeometry& g, const Shape& out, int n, int grp,
                                      const T* gy, const T* weight, T* gx) {
  const int icpg = g.in_per_group();
  const int ocpg = g.out_per_group();
  const Shape& in = g.in;
  for (int icg = 0; icg < icpg; ++icg) {
    T* gxp = gx + (static_cast<std::size_t>(n) * in.c + grp * icpg + icg) * in.plane();
    std::fill(gxp, gxp + in.plane(), T(0));
  }
  for (int ocg = 0; ocg < ocpg; ++ocg) {
    const int oc = grp * ocpg + ocg;
    const T* gyp = gy + (static_cast<std::size_t>(n) * out.c + oc) * out.plane();
    for (int oh = 0; oh < out.h; ++oh) {
      for (int ow = 0; ow < out.w; ++ow) {
        const T gv = gyp[static_cast<std::size_t>(oh) * out.w + ow];
        for (int icg = 0; icg < icpg; ++icg) {
          T* gxp = gx + (static_cast<std::size_t>(n) * in.c + grp * icpg + icg) * in.plane();
          const T* wp = weight + (static_cast<std::size_t>(oc) * icpg + icg) * g.kh * g.kw;
          for (int kh = 0; kh < g.kh; ++kh) {
            const int ih = oh * g.stride - g.padding + kh;
            if (ih < 0 || ih >= in.h) continue;
            for (int kw = 0; kw < g.kw; ++kw) {
              const int iw = ow * g.stride - g.padding + kw;
              if (iw < 0 || iw >= in.w) continue;
              gxp[static_cast<std::size_t>(ih) * in.w + iw] += wp[kh * g.kw + kw] * gv;
            }
          }
        }
      }
    }
  }
}

// Weight (and bias) gradient of one output channel, accumulated over the batch.
template <typename T>
inline void conv_backward_weight_channel(const ConvGeometry& g, const Shape& out, int oc,
                                         const T* x, const T* gy, T* gw, T* gb) {
  const int icpg = g.in_per_group();
  const int grp = oc / g.out_per_group();
  const Shape& in = g.in;
  for (int n = 0; n < in.n; ++n) {
    const T* gyp = gy + (static_cast<std::size_t>(n) * out.c + oc) * out.plane();
    for (int oh = 0; oh < out.h; ++oh) {
      for (int ow = 0; ow < out.w; ++ow) {
        const T gv = gyp[static_cast<std::size_t>(oh) * out.w + ow];
        if (gb != nullptr) gb[oc] += gv;
        for (int icg = 0; icg < icpg; ++icg) {
          const int ic = grp * icpg + icg;
          const T* xp = x + (static_cast<std::size_t>(n) * in.c + ic) * in.plane();
          T* wp = gw + (static_cast<std::size_t>(oc) * icpg + icg) * g.kh * g.kw;
          for (int kh = 0; kh < g.kh; ++kh) {
            const int ih = oh * g.stride - g.padding + kh;
            if (ih < 0 || ih >= in.h) continue;
            for (int kw = 0; kw < g.kw; ++kw) {
              const int iw = ow * g.stride - g.padding + kw;
              if (iw < 0 || iw >= in.w) continue;
              wp[kh * g.kw + kw] += xp[static_cast<std::size_t>(ih) * in.w + iw] * gv;
            }
          }
        }
      }
    }
  }
}

// Half-pixel-center source taps along one axis, clamped to the border.
template <typename T>
struct Tap {
  int i0;
  int i1;
  T w0;
  T w1;
};

template <typename T>
inline std::vector<Tap<T>> bilinear_taps(int in_size, int factor) {
  std::vector<Tap<T>> taps(static_cast<std::size_t>(in_size) * factor);
  for (int o = 0; o < in_size * factor; ++o) {
    double src = (o + 0.5) / factor - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in_size - 1));
    const int i0 = static_cast<int>(std::floor(src));
    const int i1 = std::min(i0 + 1, in_size - 1);
    const double frac = src - i0;
    taps[o] = {i0, i1, static_cast<T>(1.0 - frac), static_cast<T>(frac)};
  }
  return taps;
}

template <typename T>
inline void bilinear_forward_plane(const Shape& in, int factor, const std::vector<Tap<T>>& ty,
                                   const std::vector<Tap<T>>& tx, const T* xp, T* yp) {
  const int ow_n = in.w * factor;
  for (int oh = 0; oh < in.h * factor; ++oh) {
    const Tap<T>& a = ty[oh];
    const T* r0 = xp + static_cast<std::size_t>(a.i0) * in.w;
    const T* r1 = xp + static_cast<std::size_t>(a.i1) * in.w;
    for (int ow = 0; ow < ow_n; ++ow) {
      const Tap<T>& b = tx[ow];
      const T top = b.w0 * r0[b.i0] + b.w1 * r0[b.i1];
      const T bot = b.w0 * r1[b.i0] + b.w1 * r1[b.i1];
      yp[static_cast<std::size_t>(oh) * ow_n + ow] = a.w0 * top + a.w1 * bot;
    }
  }
}

template <typename T>
inline void bilinear_backward_plane(const Shape& in, int factor, const std::vector<Tap<T>>& ty,
                                    const std::vector<Tap<T>>& tx, const T* gyp, T* gxp) {
  std::fill(gxp, gxp + in.plane(), T(0));
  const int ow_n = in.w * factor;
  for (int oh = 0; oh < in.h * factor; ++oh) {
    const Tap<T>& a = ty[oh];
    T* r0 = gxp + static_cast<std::size_t>(a.i0) * in.w;
    T* r1 = gxp + static_cast<std::size_t>(a.i1) * in.w;
    for (int ow = 0; ow < ow_n; ++ow) {
      const Tap<T>& b = tx[ow];
      const T gv = gyp[static_cast<std::size_t>(oh) * ow_n + ow];
      const T top = a.w0 * gv;
      const T bot = a.w1 * gv;
      r0[b.i0] += b.w0 * top;
      r0[b.i1] += b.w1 * top;
      r1[b.i0] += b.w0 * bot;
      r1[b.i1] += b.w1 * bot;
    }
  }
}

}  // namespace revbifpn::kernels::detail
