#pragma once

#include <string>
#include <vector>

#include "usamnet/ops.hpp"

namespace usam {

struct ConvSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  // Transposed convolution only; must stay below the stride.
  std::size_t output_padding_h = 0;
  std::size_t output_padding_w = 0;
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

inline std::size_t conv_transpose_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                                             std::size_t padding, std::size_t output_padding) {
  return (in - 1) * stride + kernel + output_padding - 2 * padding;
}

namespace detail {

inline void check_conv_spec(const ConvSpec& spec, const Shape& input, const Shape& weight, const Shape& bias,
                            bool transposed) {
  const char* op = transposed ? "conv_transpose2d" : "conv2d";
  auto fail = [op](const std::string& what) { throw ConfigError(std::string(op) + ": " + what); };
  if (spec.in_channels == 0 || spec.out_channels == 0 || spec.kernel_h == 0 || spec.kernel_w == 0 ||
      spec.stride == 0)
    fail("channels, kernel and stride must be positive");
  if (input.size() != 4) fail("input must be rank 4 (B,C,H,W), got " + shape_str(input));
  if (input[1] != spec.in_channels)
    fail("input channels " + std::to_string(input[1]) + " != spec in_channels " +
         std::to_string(spec.in_channels));
  const Shape expected_w = transposed ? Shape{spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w}
                                      : Shape{spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w};
  if (weight != expected_w) fail("weight shape " + shape_str(weight) + " != expected " + shape_str(expected_w));
  if (bias != Shape{spec.out_channels})
    fail("bias shape " + shape_str(bias) + " != expected (" + std::to_string(spec.out_channels) + ")");
  if (transposed) {
    if (spec.output_padding_h >= spec.stride) fail("output_padding_h must be < stride");
    if (spec.output_padding_w >= spec.stride) fail("output_padding_w must be < stride");
    if ((input[2] - 1) * spec.stride + spec.kernel_h + spec.output_padding_h < 2 * spec.padding + 1)
      fail("height too small for padding");
    if ((input[3] - 1) * spec.stride + spec.kernel_w + spec.output_padding_w < 2 * spec.padding + 1)
      fail("width too small for padding");
  } else {
    if (input[2] + 2 * spec.padding < spec.kernel_h)
      fail("height " + std::to_string(input[2]) + " + 2*padding < kernel_h " + std::to_string(spec.kernel_h));
    if (input[3] + 2 * spec.padding < spec.kernel_w)
      fail("width " + std::to_string(input[3]) + " + 2*padding < kernel_w " + std::to_string(spec.kernel_w));
  }
}

// Geometry of a strided, padded window over a (channels, height, width) plane.
struct Window {
  std::size_t channels, height, width;
  std::size_t kernel_h, kernel_w, stride, padding;
  std::size_t out_h, out_w;
};

// cols[(c*kh*kw), (oh*ow)] gathered from image[c, h, w]
template <typename T>
void im2col(const Window& g, const T* image, T* cols) {
  const std::size_t spatial = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky)
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
        T* row = cols + ((c * g.kernel_h + ky) * g.kernel_w + kx) * spatial;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.height) &&
                                ix < static_cast<long>(g.width);
            row[oy * g.out_w + ox] = inside ? image[(c * g.height + iy) * g.width + ix] : T(0);
          }
        }
      }
}

// Scatter-add of im2col's layout back onto the image.
template <typename T>
void col2im(const Window& g, const T* cols, T* image) {
  const std::size_t spatial = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky)
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
        const T* row = cols + ((c * g.kernel_h + ky) * g.kernel_w + kx) * spatial;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
            if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
            image[(c * g.height + iy) * g.width + ix] += row[oy * g.out_w + ox];
          }
        }
      }
}

}  // namespace detail

/// 2-D cross-correlation (no kernel flip).
/// input (B,Cin,H,W), weight (Cout,Cin,Kh,Kw), bias (Cout) -> (B,Cout,H',W')
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const ConvSpec& spec, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::check_conv_spec(spec, input.shape(), weight.shape(), bias.shape(), false);
  const std::size_t batch = input.size(0), h = input.size(2), w = input.size(3);
  const detail::Window g{spec.in_channels,
                         h,
                         w,
                         spec.kernel_h,
                         spec.kernel_w,
                         spec.stride,
                         spec.padding,
                         conv_out_extent(h, spec.kernel_h, spec.stride, spec.padding),
                         conv_out_extent(w, spec.kernel_w, spec.stride, spec.padding)};
  const std::size_t cout = spec.out_channels;
  const std::size_t patch = spec.in_channels * spec.kernel_h * spec.kernel_w;
  const std::size_t spatial = g.out_h * g.out_w;
  const std::size_t in_plane = spec.in_channels * h * w;
  const bool pointwise = spec.kernel_h == 1 && spec.kernel_w == 1 && spec.stride == 1 && spec.padding == 0;

  std::vector<T> out(batch * cout * spatial);
  std::vector<T> cols(pointwise ? 0 : patch * spatial);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* src = input.data().data() + b * in_plane;
    if (!pointwise) detail::im2col(g, src, cols.data());
    T* dst = out.data() + b * cout * spatial;
    detail::gemm(false, false, cout, spatial, patch, weight.data().data(), pointwise ? src : cols.data(), dst,
                 false);
    for (std::size_t c = 0; c < cout; ++c)
      for (std::size_t s = 0; s < spatial; ++s) dst[c * spatial + s] += bias[c];
  }

  auto in_n = input.node(), w_n = weight.node(), b_n = bias.node();
  return detail::make_result<T>(
      {batch, cout, g.out_h, g.out_w}, std::move(out), {&input, &weight, &bias},
      [in_n, w_n, b_n, g, batch, cout, patch, spatial, in_plane, pointwise](detail::Node<T>& self) {
        std::vector<T> cols(patch * spatial);
        for (std::size_t b = 0; b < batch; ++b) {
          const T* go = self.grad.data() + b * cout * spatial;
          const T* src = in_n->data.data() + b * in_plane;
          if (b_n->requires_grad) {
            auto& gb = b_n->ensure_grad();
            for (std::size_t c = 0; c < cout; ++c)
              for (std::size_t s = 0; s < spatial; ++s) gb[c] += go[c * spatial + s];
          }
          if (w_n->requires_grad) {
            const T* x = src;
            if (!pointwise) {
              detail::im2col(g, src, cols.data());
              x = cols.data();
            }
            detail::gemm(false, true, cout, patch, spatial, go, x, w_n->ensure_grad().data(), true);
          }
          if (in_n->requires_grad) {
            T* gi = in_n->ensure_grad().data() + b * in_plane;
            if (pointwise) {
              detail::gemm(true, false, patch, spatial, cout, w_n->data.data(), go, gi, true);
            } else {
              detail::gemm(true, false, patch, spatial, cout, w_n->data.data(), go, cols.data(), false);
              detail::col2im(g, cols.data(), gi);
            }
          }
        }
      });
}

/// Transposed convolution, the adjoint of conv2d under the same geometry.
/// input (B,Cin,H,W), weight (Cin,Cout,Kh,Kw), bias (Cout) -> (B,Cout,H',W')
/// with H' = (H-1)*stride - 2*padding + Kh + output_padding_h.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& input, const ConvSpec& spec, const Tensor<T>& weight,
                           const Tensor<T>& bias) {
  detail::check_conv_spec(spec, input.shape(), weight.shape(), bias.shape(), true);
  const std::size_t batch = input.size(0), h = input.size(2), w = input.size(3);
  const std::size_t cin = spec.in_channels, cout = spec.out_channels;
  const std::size_t out_h = conv_transpose_out_extent(h, spec.kernel_h, spec.stride, spec.padding,
                                                      spec.output_padding_h);
  const std::size_t out_w = conv_transpose_out_extent(w, spec.kernel_w, spec.stride, spec.padding,
                                                      spec.output_padding_w);
  // The window maps the (large) output plane onto the (small) input grid.
  const detail::Window g{cout, out_h, out_w, spec.kernel_h, spec.kernel_w, spec.stride, spec.padding, h, w};
  const std::size_t patch = cout * spec.kernel_h * spec.kernel_w;
  const std::size_t spatial = h * w;
  const std::size_t out_plane = cout * out_h * out_w;

  std::vector<T> out(batch * out_plane, T(0));
  std::vector<T> cols(patch * spatial);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* src = input.data().data() + b * cin * spatial;
    detail::gemm(true, false, patch, spatial, cin, weight.data().data(), src, cols.data(), false);
    T* dst = out.data() + b * out_plane;
    detail::col2im(g, cols.data(), dst);
    for (std::size_t c = 0; c < cout; ++c)
      for (std::size_t s = 0; s < out_h * out_w; ++s) dst[c * out_h * out_w + s] += bias[c];
  }

  auto in_n = input.node(), w_n = weight.node(), b_n = bias.node();
  return detail::make_result<T>(
      {batch, cout, out_h, out_w}, std::move(out), {&input, &weight, &bias},
      [in_n, w_n, b_n, g, batch, cin, cout, patch, spatial, out_plane](detail::Node<T>& self) {
        std::vector<T> cols(patch * spatial);
        const std::size_t out_spatial = g.height * g.width;
        for (std::size_t b = 0; b < batch; ++b) {
          const T* go = self.grad.data() + b * out_plane;
          if (b_n->requires_grad) {
            auto& gb = b_n->ensure_grad();
            for (std::size_t c = 0; c < cout; ++c)
              for (std::size_t s = 0; s < out_spatial; ++s) gb[c] += go[c * out_spatial + s];
          }
          if (!w_n->requires_grad && !in_n->requires_grad) continue;
          detail::im2col(g, go, cols.data());
          if (w_n->requires_grad)
            detail::gemm(false, true, cin, patch, spatial, in_n->data.data() + b * cin * spatial, cols.data(),
                         w_n->ensure_grad().data(), true);
          if (in_n->requires_grad)
            detail::gemm(false, false, cin, spatial, patch, w_n->data.data(), cols.data(),
                         in_n->ensure_grad().data() + b * cin * spatial, true);
        }
      });
}

}  // namespace usam
