#include "csks/kernels.hpp"

namespace csks::kernels::reference {

namespace {

// Input value under zero padding, or 0 outside the image.
double padded_at(const Conv2dGeometry& g, std::span<const double> x, std::size_t b,
                 std::size_t c, std::size_t ih_pad, std::size_t iw_pad) {
  if (ih_pad < g.pad_h || iw_pad < g.pad_w) return 0.0;
  const std::size_t ih = ih_pad - g.pad_h;
  const std::size_t iw = iw_pad - g.pad_w;
  if (ih >= g.in_h || iw >= g.in_w) return 0.0;
  return x[((b * g.in_channels + c) * g.in_h + ih) * g.in_w + iw];
}

}  // namespace

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
  }
}

void matmul_at_b_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                     std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < m; ++i) s += a[i * k + p] * b[i * n + j];
      c[p * n + j] += s;
    }
  }
}

void matmul_a_bt_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                     std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += a[i * n + j] * b[p * n + j];
      c[i * k + p] += s;
    }
  }
}

void conv2d_forward(const Conv2dGeometry& g, std::span<const double> x, std::span<const double> w,
                    std::span<const double> bias, std::span<double> y) {
  const std::size_t oh_count = g.out_h();
  const std::size_t ow_count = g.out_w();
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t o = 0; o < g.out_channels; ++o)
      for (std::size_t oh = 0; oh < oh_count; ++oh)
        for (std::size_t ow = 0; ow < ow_count; ++ow) {
          double s = bias.empty() ? 0.0 : bias[o];
          for (std::size_t c = 0; c < g.in_channels; ++c)
            for (std::size_t kh = 0; kh < g.kernel_h; ++kh)
              for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
                const double wv = w[((o * g.in_channels + c) * g.kernel_h + kh) * g.kernel_w + kw];
                s += wv * padded_at(g, x, b, c, oh * g.stride_h + kh, ow * g.stride_w + kw);
              }
          y[((b * g.out_channels + o) * oh_count + oh) * ow_count + ow] = s;
        }
}

void conv2d_backward_input(const Conv2dGeometry& g, std::span<const double> dy,
                           std::span<const double> w, std::span<double> dx) {
  const std::size_t oh_count = g.out_h();
  const std::size_t ow_count = g.out_w();
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t o = 0; o < g.out_channels; ++o)
      for (std::size_t oh = 0; oh < oh_count; ++oh)
        for (std::size_t ow = 0; ow < ow_count; ++ow) {
          const double gv = dy[((b * g.out_channels + o) * oh_count + oh) * ow_count + ow];
          for (std::size_t c = 0; c < g.in_channels; ++c)
            for (std::size_t kh = 0; kh < g.kernel_h; ++kh)
              for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
                const std::size_t ih_pad = oh * g.stride_h + kh;
                const std::size_t iw_pad = ow * g.stride_w + kw;
                if (ih_pad < g.pad_h || iw_pad < g.pad_w) continue;
                const std::size_t ih = ih_pad - g.pad_h;
                const std::size_t iw = iw_pad - g.pad_w;
                if (ih >= g.in_h || iw >= g.in_w) continue;
                const double wv = w[((o * g.in_channels + c) * g.kernel_h + kh) * g.kernel_w + kw];
                dx[((b * g.in_channels + c) * g.in_h + ih) * g.in_w + iw] += wv * gv;
              }
        }
}

void conv2d_backward_weight(const Conv2dGeometry& g, std::span<const double> dy,
                            std::span<const double> x, std::span<double> dw,
                            std::span<double> dbias) {
  const std::size_t oh_count = g.out_h();
  const std::size_t ow_count = g.out_w();
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t o = 0; o < g.out_channels; ++o)
      for (std::size_t oh = 0; oh < oh_count; ++oh)
        for (std::size_t ow = 0; ow < ow_count; ++ow) {
          const double gv = dy[((b * g.out_channels + o) * oh_count + oh) * ow_count + ow];
          if (!dbias.empty()) dbias[o] += gv;
          for (std::size_t c = 0; c < g.in_channels; ++c)
            for (std::size_t kh = 0; kh < g.kernel_h; ++kh)
              for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
                dw[((o * g.in_channels + c) * g.kernel_h + kh) * g.kernel_w + kw] +=
                    gv * padded_at(g, x, b, c, oh * g.stride_h + kh, ow * g.stride_w + kw);
              }
        }
}

}  // namespace csks::kernels::reference
