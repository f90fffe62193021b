// Times the OpenMP kernels against their serial references.
// Usage: csks_bench [repeats]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <algorithm>
#include <functional>
#include <random>
#include <vector>

#include "csks/dsp.hpp"
#include "csks/kernels.hpp"

using namespace csks;

namespace {

double seconds(const std::function<void()>& fn, int repeats) {
  fn();  // warm-up
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < repeats; ++i) fn();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / repeats;
}

std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

void report(const char* name, double t_ref, double t_par, double diff) {
  std::printf("%-24s reference %9.3f ms  parallel %9.3f ms  speedup %5.2fx  max|diff| %.2e\n", name, t_ref * 1e3,
              t_par * 1e3, t_ref / t_par, diff);
}

}  // namespace

int main(int argc, char** argv) {
  const int repeats = argc > 1 ? std::max(1, std::atoi(argv[1])) : 5;
  std::mt19937_64 rng(42);
  std::printf("threads: %d\n", kernels::worker_count());

  {
    const std::size_t m = 256, k = 256, n = 256;
    const auto a = random_vector(m * k, rng), b = random_vector(k * n, rng);
    std::vector<double> c1(m * n), c2(m * n);
    const double tr = seconds([&] { kernels::reference::matmul(a, b, c1, m, k, n); }, repeats);
    const double tp = seconds([&] { kernels::matmul(a, b, c2, m, k, n); }, repeats);
    report("matmul 256^3", tr, tp, max_abs_diff(c1, c2));
  }

  // First convolution of the default model on a batch of 32 spectrograms.
  Conv2dGeometry g{32, 1, 199, 241, 4, 3, 5, 2, 4, 0, 0};
  {
    const auto x = random_vector(g.input_size(), rng), w = random_vector(g.weight_size(), rng);
    const auto bias = random_vector(g.out_channels, rng);
    std::vector<double> y1(g.output_size()), y2(g.output_size());
    const double tr = seconds([&] { kernels::reference::conv2d_forward(g, x, w, bias, y1); }, repeats);
    const double tp = seconds([&] { kernels::conv2d_forward(g, x, w, bias, y2); }, repeats);
    report("conv2d forward", tr, tp, max_abs_diff(y1, y2));

    const auto dy = random_vector(g.output_size(), rng);
    std::vector<double> dx1(g.input_size()), dx2(g.input_size());
    const double tbr = seconds([&] { kernels::reference::conv2d_backward_input(g, dy, w, dx1); }, repeats);
    const double tbp = seconds([&] { kernels::conv2d_backward_input(g, dy, w, dx2); }, repeats);
    std::fill(dx1.begin(), dx1.end(), 0.0);
    std::fill(dx2.begin(), dx2.end(), 0.0);
    kernels::reference::conv2d_backward_input(g, dy, w, dx1);
    kernels::conv2d_backward_input(g, dy, w, dx2);
    report("conv2d backward input", tbr, tbp, max_abs_diff(dx1, dx2));

    std::vector<double> dw1(g.weight_size()), dw2(g.weight_size()), db1(g.out_channels), db2(g.out_channels);
    const double twr = seconds([&] { kernels::reference::conv2d_backward_weight(g, dy, x, dw1, db1); }, repeats);
    const double twp = seconds([&] { kernels::conv2d_backward_weight(g, dy, x, dw2, db2); }, repeats);
    std::fill(dw1.begin(), dw1.end(), 0.0);
    std::fill(dw2.begin(), dw2.end(), 0.0);
    kernels::reference::conv2d_backward_weight(g, dy, x, dw1, db1);
    kernels::conv2d_backward_weight(g, dy, x, dw2, db2);
    report("conv2d backward weight", twr, twp, max_abs_diff(dw1, dw2));
  }

  {
    AudioClip clip;
    clip.samples = random_vector(32000, rng);
    for (auto& s : clip.samples) s *= 0.1;
    FeatureMatrix f1, f2;
    const double tr = seconds([&] { f1 = dsp::reference::spectrogram(clip); }, repeats);
    const double tp = seconds([&] { f2 = dsp::spectrogram(clip); }, repeats);
    report("spectrogram 2 s", tr, tp, max_abs_diff(f1.values, f2.values));
  }
  return 0;
}
