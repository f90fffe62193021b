#include "csks/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "csks/error.hpp"
#include "csks/kernels.hpp"

namespace csks::ag {

namespace {
thread_local bool t_grad_enabled = true;
}  // namespace

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

Tensor& Node::grad() {
  if (grad_.empty() && value.size() > 0) grad_ = Tensor(value.shape());
  return grad_;
}

Var constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return node;
}

Var parameter(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return node;
}

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = t_grad_enabled && std::any_of(parents.begin(), parents.end(),
                                                      [](const Var& p) { return p->requires_grad; });
  if (node->requires_grad) {
    node->parents_ = std::move(parents);
    node->backward_fn_ = std::move(backward_fn);
  }
  return node;
}

void backward(const Var& root) {
  if (root->value.size() != 1) {
    throw UsageError("backward() needs a scalar root, got shape " + shape_string(root->shape()));
  }
  if (!root->requires_grad) throw UsageError("backward() on a detached graph");

  // Iterative post-order DFS; recurrent graphs are too deep for recursion.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents_.size()) {
      Node* parent = node->parents_[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn_ && node->has_grad()) node->backward_fn_(*node);
  }
  // Interior gradients are no longer needed; leaves keep theirs.
  for (Node* node : order) {
    if (node->backward_fn_) node->clear_grad();
  }
}

double scalar(const Var& v) {
  if (v->value.size() != 1) throw UsageError("scalar() on shape " + shape_string(v->shape()));
  return v->value[0];
}

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a->shape() != b->shape()) {
    throw UsageError(std::string(op) + ": shape mismatch " + shape_string(a->shape()) + " vs " +
                     shape_string(b->shape()));
  }
}

void require_rank(const Var& a, std::size_t rank, const char* op) {
  if (a->value.rank() != rank) {
    throw UsageError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(a->shape()));
  }
}

// Elementwise unary op given f(x) and f'(x, f(x)).
template <typename F, typename DF>
Var unary(const Var& a, F f, DF df) {
  Tensor out(a->shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a->value[i]);
  return make_node(std::move(out), {a}, [a, df](Node& self) {
    Tensor& ga = a->grad();
    const Tensor& g = self.grad();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(a->value[i], self.value[i]);
  });
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out(a->shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] + b->value[i];
  return make_node(std::move(out), {a, b}, [a, b](Node& self) {
    const Tensor& g = self.grad();
    if (a->requires_grad) {
      Tensor& ga = a->grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b->requires_grad) {
      Tensor& gb = b->grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a->shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] - b->value[i];
  return make_node(std::move(out), {a, b}, [a, b](Node& self) {
    const Tensor& g = self.grad();
    if (a->requires_grad) {
      Tensor& ga = a->grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b->requires_grad) {
      Tensor& gb = b->grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a->shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * b->value[i];
  return make_node(std::move(out), {a, b}, [a, b](Node& self) {
    const Tensor& g = self.grad();
    if (a->requires_grad) {
      Tensor& ga = a->grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b->value[i];
    }
    if (b->requires_grad) {
      Tensor& gb = b->grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a->value[i];
    }
  });
}

Var scale(const Var& a, double factor) {
  return unary(a, [factor](double x) { return factor * x; },
               [factor](double, double) { return factor; });
}

Var add_scalar(const Var& a, double offset) {
  return unary(a, [offset](double x) { return x + offset; }, [](double, double) { return 1.0; });
}

Var one_minus(const Var& a) {
  return unary(a, [](double x) { return 1.0 - x; }, [](double, double) { return -1.0; });
}

Var relu(const Var& a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var tanh(const Var& a) {
  return unary(a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(const Var& a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var exp(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var sqrt(const Var& a) {
  return unary(a, [](double x) { return std::sqrt(x); },
               [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Var clamp_max(const Var& a, double ceiling) {
  return unary(a, [ceiling](double x) { return std::min(x, ceiling); },
               [ceiling](double x, double) { return x < ceiling ? 1.0 : 0.0; });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a->value.values()) s += v;
  return make_node(Tensor({1}, s), {a}, [a](Node& self) {
    const double g = self.grad()[0];
    Tensor& ga = a->grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
}

Var mean(const Var& a) {
  if (a->value.size() == 0) throw UsageError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a->value.size()));
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a->value;
  out.reshape(std::move(shape));
  return make_node(std::move(out), {a}, [a](Node& self) {
    const Tensor& g = self.grad();
    Tensor& ga = a->grad();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var matmul(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(1);
  if (b->value.dim(0) != k) {
    throw UsageError("matmul: inner dimensions differ " + shape_string(a->shape()) + " x " +
                     shape_string(b->shape()));
  }
  Tensor out({m, n});
  kernels::matmul(a->value.values(), b->value.values(), out.values(), m, k, n);
  return make_node(std::move(out), {a, b}, [a, b, m, k, n](Node& self) {
    const Tensor& g = self.grad();
    if (a->requires_grad) kernels::matmul_a_bt_acc(g.values(), b->value.values(), a->grad().values(), m, n, k);
    if (b->requires_grad) kernels::matmul_at_b_acc(a->value.values(), g.values(), b->grad().values(), m, k, n);
  });
}

Var add_row_bias(const Var& a, const Var& bias) {
  require_rank(a, 2, "add_row_bias");
  const std::size_t m = a->value.dim(0), n = a->value.dim(1);
  if (bias->value.size() != n) throw UsageError("add_row_bias: bias length mismatch");
  Tensor out = a->value;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bias->value[j];
  return make_node(std::move(out), {a, bias}, [a, bias, m, n](Node& self) {
    const Tensor& g = self.grad();
    if (a->requires_grad) {
      Tensor& ga = a->grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (bias->requires_grad) {
      Tensor& gb = bias->grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
  });
}

Var conv2d(const Var& x, const Var& w, const Var& bias, const Conv2dOptions& options) {
  require_rank(x, 4, "conv2d input");
  require_rank(w, 4, "conv2d weight");
  Conv2dGeometry geo;
  geo.batch = x->value.dim(0);
  geo.in_channels = x->value.dim(1);
  geo.in_h = x->value.dim(2);
  geo.in_w = x->value.dim(3);
  geo.out_channels = w->value.dim(0);
  geo.kernel_h = w->value.dim(2);
  geo.kernel_w = w->value.dim(3);
  geo.stride_h = options.stride_h;
  geo.stride_w = options.stride_w;
  geo.pad_h = options.pad_h;
  geo.pad_w = options.pad_w;
  if (w->value.dim(1) != geo.in_channels || !geo.valid()) {
    throw UsageError("conv2d: incompatible input " + shape_string(x->shape()) + " and weight " +
                     shape_string(w->shape()));
  }
  if (bias && bias->value.size() != geo.out_channels) {
    throw UsageError("conv2d: bias length mismatch");
  }
  Tensor out({geo.batch, geo.out_channels, geo.out_h(), geo.out_w()});
  std::span<const double> bias_values;
  if (bias) bias_values = bias->value.values();
  kernels::conv2d_forward(geo, x->value.values(), w->value.values(), bias_values, out.values());

  std::vector<Var> parents{x, w};
  if (bias) parents.push_back(bias);
  return make_node(std::move(out), std::move(parents), [x, w, bias, geo](Node& self) {
    const Tensor& g = self.grad();
    if (x->requires_grad) kernels::conv2d_backward_input(geo, g.values(), w->value.values(), x->grad().values());
    const bool need_w = w->requires_grad;
    const bool need_b = bias && bias->requires_grad;
    if (need_w || need_b) {
      // The weight kernel produces both; discard what is not wanted.
      Tensor scratch_w;
      Tensor scratch_b;
      std::span<double> dw;
      std::span<double> db;
      if (need_w) {
        dw = w->grad().values();
      } else {
        scratch_w = Tensor(w->shape());
        dw = scratch_w.values();
      }
      if (need_b) {
        db = bias->grad().values();
      } else if (bias) {
        scratch_b = Tensor(bias->shape());
        db = scratch_b.values();
      }
      kernels::conv2d_backward_weight(geo, g.values(), x->value.values(), dw, db);
    }
  });
}

Var avg_pool2d(const Var& x, std::size_t pool_h, std::size_t pool_w) {
  require_rank(x, 4, "avg_pool2d");
  const std::size_t planes = x->value.dim(0) * x->value.dim(1);
  const std::size_t h = x->value.dim(2), w = x->value.dim(3);
  if (pool_h == 0 || pool_w == 0 || h < pool_h || w < pool_w) {
    throw UsageError("avg_pool2d: window larger than input " + shape_string(x->shape()));
  }
  const std::size_t oh = h / pool_h, ow = w / pool_w;
  const double inv = 1.0 / static_cast<double>(pool_h * pool_w);
  Tensor out({x->value.dim(0), x->value.dim(1), oh, ow});
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double s = 0.0;
        for (std::size_t a = 0; a < pool_h; ++a)
          for (std::size_t b = 0; b < pool_w; ++b)
            s += x->value[(p * h + i * pool_h + a) * w + j * pool_w + b];
        out[(p * oh + i) * ow + j] = s * inv;
      }
  return make_node(std::move(out), {x}, [x, planes, h, w, oh, ow, pool_h, pool_w, inv](Node& self) {
    const Tensor& g = self.grad();
    Tensor& gx = x->grad();
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          const double gv = g[(p * oh + i) * ow + j] * inv;
          for (std::size_t a = 0; a < pool_h; ++a)
            for (std::size_t b = 0; b < pool_w; ++b)
              gx[(p * h + i * pool_h + a) * w + j * pool_w + b] += gv;
        }
  });
}

Var global_avg_pool(const Var& x) {
  require_rank(x, 4, "global_avg_pool");
  const std::size_t batch = x->value.dim(0), channels = x->value.dim(1);
  const std::size_t area = x->value.dim(2) * x->value.dim(3);
  Tensor out({batch, channels});
  for (std::size_t p = 0; p < batch * channels; ++p) {
    double s = 0.0;
    for (std::size_t i = 0; i < area; ++i) s += x->value[p * area + i];
    out[p] = s / static_cast<double>(area);
  }
  return make_node(std::move(out), {x}, [x, batch, channels, area](Node& self) {
    const Tensor& g = self.grad();
    Tensor& gx = x->grad();
    for (std::size_t p = 0; p < batch * channels; ++p) {
      const double gv = g[p] / static_cast<double>(area);
      for (std::size_t i = 0; i < area; ++i) gx[p * area + i] += gv;
    }
  });
}

Var conv_to_sequence(const Var& x) {
  require_rank(x, 4, "conv_to_sequence");
  const std::size_t batch = x->value.dim(0), channels = x->value.dim(1);
  const std::size_t steps = x->value.dim(2), freq = x->value.dim(3);
  Tensor out({batch, steps, channels * freq});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t t = 0; t < steps; ++t)
        for (std::size_t f = 0; f < freq; ++f)
          out[(b * steps + t) * channels * freq + c * freq + f] =
              x->value[((b * channels + c) * steps + t) * freq + f];
  return make_node(std::move(out), {x}, [x, batch, channels, steps, freq](Node& self) {
    const Tensor& g = self.grad();
    Tensor& gx = x->grad();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t t = 0; t < steps; ++t)
          for (std::size_t f = 0; f < freq; ++f)
            gx[((b * channels + c) * steps + t) * freq + f] +=
                g[(b * steps + t) * channels * freq + c * freq + f];
  });
}

Var time_step(const Var& x, std::size_t t) {
  require_rank(x, 3, "time_step");
  const std::size_t batch = x->value.dim(0), steps = x->value.dim(1), width = x->value.dim(2);
  if (t >= steps) throw UsageError("time_step: index out of range");
  Tensor out({batch, width});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t d = 0; d < width; ++d) out[b * width + d] = x->value[(b * steps + t) * width + d];
  return make_node(std::move(out), {x}, [x, t, batch, steps, width](Node& self) {
    const Tensor& g = self.grad();
    Tensor& gx = x->grad();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t d = 0; d < width; ++d) gx[(b * steps + t) * width + d] += g[b * width + d];
  });
}

Var stack_steps(const std::vector<Var>& steps) {
  if (steps.empty()) throw UsageError("stack_steps: no steps");
  for (const Var& s : steps) {
    require_rank(s, 2, "stack_steps");
    require_same_shape(s, steps.front(), "stack_steps");
  }
  const std::size_t batch = steps.front()->value.dim(0), width = steps.front()->value.dim(1);
  const std::size_t count = steps.size();
  Tensor out({batch, count, width});
  for (std::size_t t = 0; t < count; ++t)
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t d = 0; d < width; ++d)
        out[(b * count + t) * width + d] = steps[t]->value[b * width + d];
  return make_node(std::move(out), steps, [steps, batch, count, width](Node& self) {
    const Tensor& g = self.grad();
    for (std::size_t t = 0; t < count; ++t) {
      if (!steps[t]->requires_grad) continue;
      Tensor& gs = steps[t]->grad();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t d = 0; d < width; ++d) gs[b * width + d] += g[(b * count + t) * width + d];
    }
  });
}

Var mean_time(const Var& x) {
  require_rank(x, 3, "mean_time");
  const std::size_t batch = x->value.dim(0), steps = x->value.dim(1), width = x->value.dim(2);
  Tensor out({batch, width});
  const double inv = 1.0 / static_cast<double>(steps);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t d = 0; d < width; ++d) {
      double s = 0.0;
      for (std::size_t t = 0; t < steps; ++t) s += x->value[(b * steps + t) * width + d];
      out[b * width + d] = s * inv;
    }
  return make_node(std::move(out), {x}, [x, batch, steps, width, inv](Node& self) {
    const Tensor& g = self.grad();
    Tensor& gx = x->grad();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < steps; ++t)
        for (std::size_t d = 0; d < width; ++d) gx[(b * steps + t) * width + d] += g[b * width + d] * inv;
  });
}

Var select_rows(const Var& a, std::span<const std::size_t> rows) {
  require_rank(a, 2, "select_rows");
  const std::size_t n = a->value.dim(0), width = a->value.dim(1);
  std::vector<std::size_t> picked(rows.begin(), rows.end());
  Tensor out({picked.size(), width});
  for (std::size_t r = 0; r < picked.size(); ++r) {
    if (picked[r] >= n) throw UsageError("select_rows: row index out of range");
    std::copy_n(a->value.data() + picked[r] * width, width, out.data() + r * width);
  }
  return make_node(std::move(out), {a}, [a, picked, width](Node& self) {
    const Tensor& g = self.grad();
    Tensor& ga = a->grad();
    for (std::size_t r = 0; r < picked.size(); ++r)
      for (std::size_t d = 0; d < width; ++d) ga[picked[r] * width + d] += g[r * width + d];
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw UsageError("concat_rows: no parts");
  const std::size_t width = parts.front()->value.dim(1);
  std::size_t total = 0;
  for (const Var& p : parts) {
    require_rank(p, 2, "concat_rows");
    if (p->value.dim(1) != width) throw UsageError("concat_rows: column count mismatch");
    total += p->value.dim(0);
  }
  Tensor out({total, width});
  std::size_t offset = 0;
  for (const Var& p : parts) {
    std::copy(p->value.values().begin(), p->value.values().end(), out.data() + offset);
    offset += p->value.size();
  }
  return make_node(std::move(out), parts, [parts](Node& self) {
    const Tensor& g = self.grad();
    std::size_t offset = 0;
    for (const Var& p : parts) {
      if (p->requires_grad) {
        Tensor& gp = p->grad();
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offset + i];
      }
      offset += p->value.size();
    }
  });
}

Var pairwise_distance(const Var& a, const Var& b, bool squared) {
  require_rank(a, 2, "pairwise_distance");
  require_rank(b, 2, "pairwise_distance");
  const std::size_t n = a->value.dim(0), m = b->value.dim(0), width = a->value.dim(1);
  if (b->value.dim(1) != width) throw UsageError("pairwise_distance: dimension mismatch");
  Tensor out({n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t d = 0; d < width; ++d) {
        const double diff = a->value[i * width + d] - b->value[j * width + d];
        s += diff * diff;
      }
      out[i * m + j] = squared ? s : std::sqrt(s);
    }
  return make_node(std::move(out), {a, b}, [a, b, n, m, width, squared](Node& self) {
    const Tensor& g = self.grad();
    Tensor* ga = a->requires_grad ? &a->grad() : nullptr;
    Tensor* gb = b->requires_grad ? &b->grad() : nullptr;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const double dist = self.value[i * m + j];
        double coeff;
        if (squared) {
          coeff = 2.0 * g[i * m + j];
        } else {
          if (dist == 0.0) continue;
          coeff = g[i * m + j] / dist;
        }
        for (std::size_t d = 0; d < width; ++d) {
          const double diff = a->value[i * width + d] - b->value[j * width + d];
          if (ga) (*ga)[i * width + d] += coeff * diff;
          if (gb) (*gb)[j * width + d] -= coeff * diff;
        }
      }
  });
}

Var masked_row_mean(const Var& d, const Tensor& mask) {
  require_rank(d, 2, "masked_row_mean");
  if (mask.shape() != d->shape()) throw UsageError("masked_row_mean: mask shape mismatch");
  const std::size_t n = d->value.dim(0), m = d->value.dim(1);
  Tensor out({n});
  std::vector<double> weight(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0, count = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      s += mask[i * m + j] * d->value[i * m + j];
      count += mask[i * m + j];
    }
    weight[i] = count > 0.0 ? 1.0 / count : 0.0;
    out[i] = s * weight[i];
  }
  return make_node(std::move(out), {d}, [d, mask, weight, n, m](Node& self) {
    const Tensor& g = self.grad();
    Tensor& gd = d->grad();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) gd[i * m + j] += g[i] * mask[i * m + j] * weight[i];
  });
}

Var weighted_sum(const Var& v, const Tensor& weights) {
  if (weights.size() != v->value.size()) throw UsageError("weighted_sum: weight count mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += weights[i] * v->value[i];
  return make_node(Tensor({1}, s), {v}, [v, weights](Node& self) {
    const double g = self.grad()[0];
    Tensor& gv = v->grad();
    for (std::size_t i = 0; i < weights.size(); ++i) gv[i] += g * weights[i];
  });
}

Var cross_entropy_rows(const Var& logits, std::span<const std::size_t> targets) {
  require_rank(logits, 2, "cross_entropy_rows");
  const std::size_t n = logits->value.dim(0), c = logits->value.dim(1);
  if (targets.size() != n) throw UsageError("cross_entropy_rows: target count mismatch");
  if (n == 0) throw UsageError("cross_entropy_rows: empty batch");
  std::vector<std::size_t> labels(targets.begin(), targets.end());
  Tensor probs({n, c});
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= c) throw UsageError("cross_entropy_rows: target class out of range");
    const double* row = logits->value.data() + i * c;
    const double peak = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - peak);
    const double lse = peak + std::log(z);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(row[j] - lse);
    total += lse - row[labels[i]];
  }
  const double inv = 1.0 / static_cast<double>(n);
  return make_node(Tensor({1}, total * inv), {logits}, [logits, probs, labels, n, c, inv](Node& self) {
    const double g = self.grad()[0] * inv;
    Tensor& gl = logits->grad();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j)
        gl[i * c + j] += g * (probs[i * c + j] - (j == labels[i] ? 1.0 : 0.0));
  });
}

}  // namespace csks::ag
