#pragma once

// Tape-free reverse-mode differentiation over dense tensors.
//
// Every op returns a shared node holding its value and, when any input
// requires a gradient, a closure that pushes the node's gradient into its
// parents. `backward(root)` orders the graph topologically and runs the
// closures once each. Leaves created with `parameter()` collect gradients;
// `constant()` leaves do not.

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "csks/tensor.hpp"

namespace csks::ag {

class Node;
using Var = std::shared_ptr<Node>;

class Node {
 public:
  Tensor value;
  bool requires_grad = false;

  const Shape& shape() const { return value.shape(); }
  bool has_grad() const { return !grad_.empty(); }
  // Zero-initialized on first access.
  Tensor& grad();
  const Tensor& grad_or_empty() const { return grad_; }
  void clear_grad() { grad_ = Tensor(); }

 private:
  friend Var make_node(Tensor, std::vector<Var>, std::function<void(Node&)>);
  friend void backward(const Var&);

  Tensor grad_;
  std::vector<Var> parents_;
  std::function<void(Node&)> backward_fn_;
};

// While alive, new nodes record no backward closures (inference mode).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

Var constant(Tensor value);
Var parameter(Tensor value);
// Builds an interior node. The closure is dropped when no parent needs a gradient.
Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);

// Accumulates d(root)/d(leaf) into every reachable node requiring a gradient.
// The root must hold exactly one element.
void backward(const Var& root);

double scalar(const Var& v);

// Elementwise, equal shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double offset);
Var one_minus(const Var& a);
Var relu(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
// Gradient at exactly zero is taken as zero.
Var sqrt(const Var& a);
Var clamp_max(const Var& a, double ceiling);

Var sum(const Var& a);
Var mean(const Var& a);
Var reshape(const Var& a, Shape shape);

// a[m,k] * b[k,n]
Var matmul(const Var& a, const Var& b);
// a[m,n] + bias[n] broadcast over rows
Var add_row_bias(const Var& a, const Var& bias);

struct Conv2dOptions {
  std::size_t stride_h = 1;
  std::size_t stride_w = 1;
  std::size_t pad_h = 0;
  std::size_t pad_w = 0;
};
// x[B,C,H,W], w[O,C,KH,KW], bias[O] -> [B,O,OH,OW]
Var conv2d(const Var& x, const Var& w, const Var& bias, const Conv2dOptions& options);
// Non-overlapping average pooling; trailing rows/columns that do not fill a window are dropped.
Var avg_pool2d(const Var& x, std::size_t pool_h, std::size_t pool_w);
// [B,C,H,W] -> [B,C]
Var global_avg_pool(const Var& x);
// [B,C,T,F] -> [B,T,C*F]
Var conv_to_sequence(const Var& x);
// [B,T,D] -> [B,D]
Var time_step(const Var& x, std::size_t t);
// T x [B,D] -> [B,T,D]
Var stack_steps(const std::vector<Var>& steps);
// [B,T,D] -> [B,D]
Var mean_time(const Var& x);

// Row selection and concatenation on [N,D] matrices.
Var select_rows(const Var& a, std::span<const std::size_t> rows);
Var concat_rows(const std::vector<Var>& parts);

// D[i,j] = ||a_i - b_j|| (or its square) for a[n,d], b[m,d].
Var pairwise_distance(const Var& a, const Var& b, bool squared);
// out[i] = sum_j mask[i,j] * d[i,j] / sum_j mask[i,j]; rows with an empty mask give 0.
Var masked_row_mean(const Var& d, const Tensor& mask);
// sum_i w[i] * v[i] as a scalar.
Var weighted_sum(const Var& v, const Tensor& weights);
// Mean over rows of -log softmax(logits[i])[targets[i]].
Var cross_entropy_rows(const Var& logits, std::span<const std::size_t> targets);

}  // namespace csks::ag
