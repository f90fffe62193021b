#pragma once

// Dense numeric kernels used by the gradient engine.
//
// `csks::kernels` holds the OpenMP versions. Each parallel loop runs over
// independent output elements with a fixed inner summation order, so results
// do not depend on the thread count. `csks::kernels::reference` holds plain
// serial loops kept as the test oracle and benchmark baseline.

#include <cstddef>
#include <span>

namespace csks {

struct Conv2dGeometry {
  std::size_t batch = 1;
  std::size_t in_channels = 1;
  std::size_t in_h = 1;
  std::size_t in_w = 1;
  std::size_t out_channels = 1;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride_h = 1;
  std::size_t stride_w = 1;
  std::size_t pad_h = 0;
  std::size_t pad_w = 0;

  std::size_t out_h() const { return (in_h + 2 * pad_h - kernel_h) / stride_h + 1; }
  std::size_t out_w() const { return (in_w + 2 * pad_w - kernel_w) / stride_w + 1; }
  std::size_t input_size() const { return batch * in_channels * in_h * in_w; }
  std::size_t weight_size() const { return out_channels * in_channels * kernel_h * kernel_w; }
  std::size_t output_size() const { return batch * out_channels * out_h() * out_w(); }
  bool valid() const;
};

namespace kernels {

// c[m,n] = a[m,k] * b[k,n]
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t m, std::size_t k, std::size_t n);
// c[k,n] += a[m,k]^T * b[m,n]
void matmul_at_b_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                     std::size_t m, std::size_t k, std::size_t n);
// c[m,k] += a[m,n] * b[k,n]^T
void matmul_a_bt_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                     std::size_t m, std::size_t n, std::size_t k);

// Layouts: x[B,C,H,W], w[O,C,KH,KW], bias[O], y[B,O,OH,OW]. Bias may be empty.
void conv2d_forward(const Conv2dGeometry& g, std::span<const double> x, std::span<const double> w,
                    std::span<const double> bias, std::span<double> y);
// dx += conv2d^T(dy)
void conv2d_backward_input(const Conv2dGeometry& g, std::span<const double> dy,
                           std::span<const double> w, std::span<double> dx);
// dw += dy (*) x; dbias += sum(dy). dbias may be empty.
void conv2d_backward_weight(const Conv2dGeometry& g, std::span<const double> dy,
                            std::span<const double> x, std::span<double> dw,
                            std::span<double> dbias);

namespace reference {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t m, std::size_t k, std::size_t n);
void matmul_at_b_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                     std::size_t m, std::size_t k, std::size_t n);
void matmul_a_bt_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                     std::size_t m, std::size_t n, std::size_t k);
void conv2d_forward(const Conv2dGeometry& g, std::span<const double> x, std::span<const double> w,
                    std::span<const double> bias, std::span<double> y);
void conv2d_backward_input(const Conv2dGeometry& g, std::span<const double> dy,
                           std::span<const double> w, std::span<double> dx);
void conv2d_backward_weight(const Conv2dGeometry& g, std::span<const double> dy,
                            std::span<const double> x, std::span<double> dw,
                            std::span<double> dbias);

}  // namespace reference

// Caps the OpenMP team size for subsequent kernels; 0 restores the default.
void set_worker_count(int workers);
int worker_count();

}  // namespace kernels
}  // namespace csks
