#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "csks/autograd.hpp"
#include "csks/dsp.hpp"

namespace testing {

inline std::vector<double> randn(std::size_t n, std::mt19937_64& rng, double mean = 0.0, double sd = 1.0) {
  std::normal_distribution<double> g(mean, sd);
  std::vector<double> v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

inline csks::Tensor random_tensor(csks::Shape shape, std::mt19937_64& rng, double sd = 1.0) {
  const std::size_t n = csks::element_count(shape);
  return csks::Tensor(std::move(shape), randn(n, rng, 0.0, sd));
}

inline csks::FeatureMatrix random_features(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  csks::FeatureMatrix f;
  f.rows = rows;
  f.cols = cols;
  f.frame_hop_seconds = 0.01;
  f.values = randn(rows * cols, rng, -6.0, 3.0);
  return f;
}

struct GradCheck {
  double max_rel = 0.0;
  std::size_t coords = 0;
};

// Central differences (step 1e-5) on up to `min_coords` or more coordinates
// spread over all leaves; relative error |a - n| / max(1e-6, |a| + |n|).
inline GradCheck grad_check(const std::vector<csks::ag::Var>& leaves, const std::function<csks::ag::Var()>& f,
                            std::size_t min_coords, std::mt19937_64& rng) {
  for (auto& l : leaves) l->clear_grad();
  csks::ag::backward(f());
  std::vector<csks::Tensor> analytic;
  for (auto& l : leaves) analytic.push_back(l->has_grad() ? l->grad() : csks::Tensor(l->shape()));
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    for (std::size_t i = 0; i < leaves[li]->value.size(); ++i) coords.emplace_back(li, i);
  }
  std::shuffle(coords.begin(), coords.end(), rng);
  if (coords.size() > min_coords) coords.resize(min_coords);
  GradCheck r;
  const double h = 1e-5;
  for (auto [li, i] : coords) {
    double& x = leaves[li]->value[i];
    const double x0 = x;
    x = x0 + h;
    const double fp = csks::ag::scalar(f());
    x = x0 - h;
    const double fm = csks::ag::scalar(f());
    x = x0;
    const double num = (fp - fm) / (2 * h);
    const double an = analytic[li][i];
    r.max_rel = std::max(r.max_rel, std::abs(num - an) / std::max(1e-6, std::abs(num) + std::abs(an)));
    ++r.coords;
  }
  return r;
}

}  // namespace testing
