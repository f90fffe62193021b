#include "csks/kernels.hpp"

#include <algorithm>
#include <cstdint>

#include <omp.h>

namespace csks {

bool Conv2dGeometry::valid() const {
  return batch > 0 && in_channels > 0 && out_channels > 0 && kernel_h > 0 && kernel_w > 0 &&
         stride_h > 0 && stride_w > 0 && in_h + 2 * pad_h >= kernel_h &&
         in_w + 2 * pad_w >= kernel_w;
}

namespace kernels {
namespace {

int g_workers = 0;

int team_size() { return g_workers > 0 ? g_workers : omp_get_max_threads(); }

// Output columns [lo, hi) whose input column ow*stride + kw - pad lies inside [0, in_w).
struct ColumnRange {
  std::size_t lo;
  std::size_t hi;
};

ColumnRange valid_columns(const Conv2dGeometry& g, std::size_t kw) {
  const std::size_t ow_count = g.out_w();
  std::size_t lo = 0;
  if (g.pad_w > kw) lo = (g.pad_w - kw + g.stride_w - 1) / g.stride_w;
  // iw < in_w  <=>  ow*stride < in_w + pad - kw
  if (g.in_w + g.pad_w <= kw) return {0, 0};
  const std::size_t limit = g.in_w + g.pad_w - kw;
  std::size_t hi = (limit + g.stride_w - 1) / g.stride_w;
  hi = std::min(hi, ow_count);
  if (lo > hi) lo = hi;
  return {lo, hi};
}

}  // namespace

void set_worker_count(int workers) { g_workers = std::max(workers, 0); }
int worker_count() { return team_size(); }

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t m, std::size_t k, std::size_t n) {
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();
#pragma omp parallel for schedule(static) num_threads(team_size()) if (m * k * n > 32768)
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(m); ++i) {
    double* row = pc + i * n;
    std::fill(row, row + n, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
}

void matmul_at_b_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                     std::size_t m, std::size_t k, std::size_t n) {
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();
#pragma omp parallel for schedule(static) num_threads(team_size()) if (m * k * n > 32768)
  for (std::int64_t p = 0; p < static_cast<std::int64_t>(k); ++p) {
    double* row = pc + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = pa[i * k + p];
      if (av == 0.0) continue;
      const double* brow = pb + i * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
}

void matmul_a_bt_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                     std::size_t m, std::size_t n, std::size_t k) {
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();
#pragma omp parallel for schedule(static) num_threads(team_size()) if (m * k * n > 32768)
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(m); ++i) {
    const double* arow = pa + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = pb + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += arow[j] * brow[j];
      pc[i * k + p] += s;
    }
  }
}

void conv2d_forward(const Conv2dGeometry& g, std::span<const double> x, std::span<const double> w,
                    std::span<const double> bias, std::span<double> y) {
  const std::size_t oh_count = g.out_h();
  const std::size_t ow_count = g.out_w();
  const std::size_t planes = g.batch * g.out_channels;
#pragma omp parallel for schedule(static) num_threads(team_size())
  for (std::int64_t plane = 0; plane < static_cast<std::int64_t>(planes); ++plane) {
    const std::size_t b = plane / g.out_channels;
    const std::size_t o = plane % g.out_channels;
    double* out = y.data() + plane * oh_count * ow_count;
    std::fill(out, out + oh_count * ow_count, bias.empty() ? 0.0 : bias[o]);
    for (std::size_t c = 0; c < g.in_channels; ++c) {
      const double* in = x.data() + (b * g.in_channels + c) * g.in_h * g.in_w;
      const double* wk = w.data() + (o * g.in_channels + c) * g.kernel_h * g.kernel_w;
      for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
        for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
          const double wv = wk[kh * g.kernel_w + kw];
          const ColumnRange cols = valid_columns(g, kw);
          for (std::size_t oh = 0; oh < oh_count; ++oh) {
            const std::size_t ih_pad = oh * g.stride_h + kh;
            if (ih_pad < g.pad_h || ih_pad - g.pad_h >= g.in_h) continue;
            const double* in_row = in + (ih_pad - g.pad_h) * g.in_w;
            double* out_row = out + oh * ow_count;
            for (std::size_t ow = cols.lo; ow < cols.hi; ++ow) {
              out_row[ow] += wv * in_row[ow * g.stride_w + kw - g.pad_w];
            }
          }
        }
      }
    }
  }
}

void conv2d_backward_input(const Conv2dGeometry& g, std::span<const double> dy,
                           std::span<const double> w, std::span<double> dx) {
  const std::size_t oh_count = g.out_h();
  const std::size_t ow_count = g.out_w();
  const std::size_t planes = g.batch * g.in_channels;
#pragma omp parallel for schedule(static) num_threads(team_size())
  for (std::int64_t plane = 0; plane < static_cast<std::int64_t>(planes); ++plane) {
    const std::size_t b = plane / g.in_channels;
    const std::size_t c = plane % g.in_channels;
    double* din = dx.data() + plane * g.in_h * g.in_w;
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      const double* dout = dy.data() + (b * g.out_channels + o) * oh_count * ow_count;
      const double* wk = w.data() + (o * g.in_channels + c) * g.kernel_h * g.kernel_w;
      for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
        for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
          const double wv = wk[kh * g.kernel_w + kw];
          const ColumnRange cols = valid_columns(g, kw);
          for (std::size_t oh = 0; oh < oh_count; ++oh) {
            const std::size_t ih_pad = oh * g.stride_h + kh;
            if (ih_pad < g.pad_h || ih_pad - g.pad_h >= g.in_h) continue;
            double* din_row = din + (ih_pad - g.pad_h) * g.in_w;
            const double* dout_row = dout + oh * ow_count;
            for (std::size_t ow = cols.lo; ow < cols.hi; ++ow) {
              din_row[ow * g.stride_w + kw - g.pad_w] += wv * dout_row[ow];
            }
          }
        }
      }
    }
  }
}

void conv2d_backward_weight(const Conv2dGeometry& g, std::span<const double> dy,
                            std::span<const double> x, std::span<double> dw,
                            std::span<double> dbias) {
  const std::size_t oh_count = g.out_h();
  const std::size_t ow_count = g.out_w();
#pragma omp parallel for schedule(static) num_threads(team_size())
  for (std::int64_t o = 0; o < static_cast<std::int64_t>(g.out_channels); ++o) {
    if (!dbias.empty()) {
      double s = 0.0;
      for (std::size_t b = 0; b < g.batch; ++b) {
        const double* dout = dy.data() + (b * g.out_channels + o) * oh_count * ow_count;
        for (std::size_t i = 0; i < oh_count * ow_count; ++i) s += dout[i];
      }
      dbias[o] += s;
    }
    for (std::size_t c = 0; c < g.in_channels; ++c) {
      double* wk = dw.data() + (o * g.in_channels + c) * g.kernel_h * g.kernel_w;
      for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
        for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
          const ColumnRange cols = valid_columns(g, kw);
          double s = 0.0;
          for (std::size_t b = 0; b < g.batch; ++b) {
            const double* dout = dy.data() + (b * g.out_channels + o) * oh_count * ow_count;
            const double* in = x.data() + (b * g.in_channels + c) * g.in_h * g.in_w;
            for (std::size_t oh = 0; oh < oh_count; ++oh) {
              const std::size_t ih_pad = oh * g.stride_h + kh;
              if (ih_pad < g.pad_h || ih_pad - g.pad_h >= g.in_h) continue;
              const double* in_row = in + (ih_pad - g.pad_h) * g.in_w;
              const double* dout_row = dout + oh * ow_count;
              for (std::size_t ow = cols.lo; ow < cols.hi; ++ow) {
                s += dout_row[ow] * in_row[ow * g.stride_w + kw - g.pad_w];
              }
            }
          }
          wk[kh * g.kernel_w + kw] += s;
        }
      }
    }
  }
}

}  // namespace kernels
}  // namespace csks
