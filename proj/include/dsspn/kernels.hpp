#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "dsspn/tensor.hpp"

// Raw convolution loops. Every output element is accumulated in a fixed
// (in_channel, ky, kx) order that does not depend on the batch extent, so a
// sample produces identical bits whether it runs alone or inside a batch.
// Gradients with respect to weights sum over the batch and are only equal
// to per-sample sums up to rounding.
namespace dsspn::kernels {

struct ConvGeometry {
  std::size_t pad{0};
  std::size_t dilation{1};
  std::size_t stride{1};

  // Padding that keeps the spatial extent for a stride-1 kernel of size k.
  static ConvGeometry same(std::size_t k, std::size_t dilation = 1) {
    return {dilation * (k - 1) / 2, dilation, 1};
  }
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, const ConvGeometry& g) {
  const std::ptrdiff_t span = static_cast<std::ptrdiff_t>(g.dilation * (k - 1) + 1);
  const std::ptrdiff_t padded = static_cast<std::ptrdiff_t>(in + 2 * g.pad);
  if (padded < span) return 0;
  return static_cast<std::size_t>((padded - span) / static_cast<std::ptrdiff_t>(g.stride)) + 1;
}

namespace detail {

// Output columns [lo, hi) whose input column ox*stride - pad + off lies in [0, in_w).
inline void valid_range(std::ptrdiff_t off, std::size_t in_w, std::size_t out_w, std::size_t stride,
                        std::size_t& lo, std::size_t& hi) {
  const auto s = static_cast<std::ptrdiff_t>(stride);
  std::ptrdiff_t first = off >= 0 ? 0 : (-off + s - 1) / s;
  std::ptrdiff_t last = static_cast<std::ptrdiff_t>(in_w) - 1 - off;  // need ox*s <= last
  std::ptrdiff_t end = last < 0 ? 0 : last / s + 1;
  first = std::clamp<std::ptrdiff_t>(first, 0, static_cast<std::ptrdiff_t>(out_w));
  end = std::clamp<std::ptrdiff_t>(end, first, static_cast<std::ptrdiff_t>(out_w));
  lo = static_cast<std::size_t>(first);
  hi = static_cast<std::size_t>(end);
}

inline bool is_pointwise(Shape w_shape, const ConvGeometry& g) {
  return w_shape.h == 1 && w_shape.w == 1 && g.pad == 0 && g.stride == 1;
}

// Unfolds one sample into col[(ic, ky, kx)][(oy, ox)], zero where the
// window hangs over the padding.
template <typename T>
void im2col(const T* in, Shape in_shape, Shape w_shape, Shape out_shape, const ConvGeometry& g, T* col) {
  const std::size_t kh = w_shape.h, kw = w_shape.w, out_h = out_shape.h, out_w = out_shape.w;
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t ic = 0; ic < in_shape.c; ++ic) {
    const T* plane = in + ic * in_shape.plane();
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        T* row = col + ((ic * kh + ky) * kw + kx) * out_h * out_w;
        std::fill(row, row + out_h * out_w, T{0});
        const std::ptrdiff_t off_x = static_cast<std::ptrdiff_t>(kx * g.dilation) - pad;
        std::size_t x_lo, x_hi;
        detail::valid_range(off_x, in_shape.w, out_w, g.stride, x_lo, x_hi);
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky * g.dilation) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in_shape.h)) continue;
          const T* src = plane + static_cast<std::size_t>(iy) * in_shape.w;
          for (std::size_t ox = x_lo; ox < x_hi; ++ox) {
            row[oy * out_w + ox] = src[static_cast<std::ptrdiff_t>(ox * g.stride) + off_x];
          }
        }
      }
    }
  }
}

// Adds col-layout gradients back onto the input planes.
template <typename T>
void col2im_add(const T* col, Shape in_shape, Shape w_shape, Shape out_shape, const ConvGeometry& g, T* in) {
  const std::size_t kh = w_shape.h, kw = w_shape.w, out_h = out_shape.h, out_w = out_shape.w;
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t ic = 0; ic < in_shape.c; ++ic) {
    T* plane = in + ic * in_shape.plane();
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const T* row = col + ((ic * kh + ky) * kw + kx) * out_h * out_w;
        const std::ptrdiff_t off_x = static_cast<std::ptrdiff_t>(kx * g.dilation) - pad;
        std::size_t x_lo, x_hi;
        detail::valid_range(off_x, in_shape.w, out_w, g.stride, x_lo, x_hi);
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky * g.dilation) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in_shape.h)) continue;
          T* dst = plane + static_cast<std::size_t>(iy) * in_shape.w;
          for (std::size_t ox = x_lo; ox < x_hi; ++ox) {
            dst[static_cast<std::ptrdiff_t>(ox * g.stride) + off_x] += row[oy * out_w + ox];
          }
        }
      }
    }
  }
}

// Dot product with eight interleaved partial sums combined in a fixed order,
// so the result depends only on the operands.
template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T part[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t l = 0; l < 8; ++l) part[l] += a[i + l] * b[i + l];
  }
  for (std::size_t l = 0; i < n; ++i, ++l) part[l] += a[i] * b[i];
  return ((part[0] + part[1]) + (part[2] + part[3])) + ((part[4] + part[5]) + (part[6] + part[7]));
}

}  // namespace detail

// out[n, oc] = bias[oc] + sum_k w[oc, k] * col_n[k], k = (ic, ky, kx)
// ascending. Each sample is unfolded and reduced on its own.
template <typename T>
void conv2d_forward(const T* in, Shape in_shape, const T* w, Shape w_shape, const T* bias, T* out,
                    Shape out_shape, const ConvGeometry& g) {
  const std::size_t out_c = w_shape.n, k_len = w_shape.c * w_shape.h * w_shape.w, p_len = out_shape.plane();
  const bool pointwise = detail::is_pointwise(w_shape, g);
  std::vector<T> scratch(pointwise ? 0 : k_len * p_len);
  for (std::size_t n = 0; n < in_shape.n; ++n) {
    const T* col = in + n * in_shape.sample();
    if (!pointwise) {
      detail::im2col(col, in_shape, w_shape, out_shape, g, scratch.data());
      col = scratch.data();
    }
    T* out_n = out + n * out_c * p_len;
    for (std::size_t oc = 0; oc < out_c; ++oc) {
      T* o = out_n + oc * p_len;
      std::fill(o, o + p_len, bias ? bias[oc] : T{0});
      const T* w_row = w + oc * k_len;
      for (std::size_t k = 0; k < k_len; ++k) {
        const T wv = w_row[k];
        const T* c = col + k * p_len;
        for (std::size_t p = 0; p < p_len; ++p) o[p] += wv * c[p];
      }
    }
  }
}

// Accumulates gradients into grad_in / grad_w / grad_b (any may be null).
template <typename T>
void conv2d_backward(const T* in, Shape in_shape, const T* w, Shape w_shape, const T* grad_out,
                     Shape out_shape, const ConvGeometry& g, T* grad_in, T* grad_w, T* grad_b) {
  const std::size_t out_c = w_shape.n, k_len = w_shape.c * w_shape.h * w_shape.w, p_len = out_shape.plane();
  const bool pointwise = detail::is_pointwise(w_shape, g);
  std::vector<T> scratch(pointwise || !grad_w ? 0 : k_len * p_len);
  std::vector<T> gcol(pointwise || !grad_in ? 0 : k_len * p_len);
  for (std::size_t n = 0; n < in_shape.n; ++n) {
    const T* go = grad_out + n * out_c * p_len;
    if (grad_b) {
      for (std::size_t oc = 0; oc < out_c; ++oc) {
        T acc{0};
        for (std::size_t p = 0; p < p_len; ++p) acc += go[oc * p_len + p];
        grad_b[oc] += acc;
      }
    }
    if (grad_w) {
      const T* col = in + n * in_shape.sample();
      if (!pointwise) {
        detail::im2col(col, in_shape, w_shape, out_shape, g, scratch.data());
        col = scratch.data();
      }
      for (std::size_t oc = 0; oc < out_c; ++oc) {
        for (std::size_t k = 0; k < k_len; ++k) grad_w[oc * k_len + k] += detail::dot(go + oc * p_len, col + k * p_len, p_len);
      }
    }
    if (grad_in) {
      T* gc = pointwise ? grad_in + n * in_shape.sample() : gcol.data();
      if (!pointwise) std::fill(gcol.begin(), gcol.end(), T{0});
      for (std::size_t oc = 0; oc < out_c; ++oc) {
        const T* g_row = go + oc * p_len;
        const T* w_row = w + oc * k_len;
        for (std::size_t k = 0; k < k_len; ++k) {
          const T wv = w_row[k];
          T* dst = gc + k * p_len;
          for (std::size_t p = 0; p < p_len; ++p) dst[p] += wv * g_row[p];
        }
      }
      if (!pointwise) detail::col2im_add(gcol.data(), in_shape, w_shape, out_shape, g, grad_in + n * in_shape.sample());
    }
  }
}

}  // namespace dsspn::kernels
