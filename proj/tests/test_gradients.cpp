#include <doctest.h>

#include "csks/error.hpp"
#include "csks/losses.hpp"
#include "csks/model.hpp"
#include "helpers.hpp"

using namespace csks;
namespace A = csks::ag;

namespace {

constexpr double kTol = 1e-4;
constexpr std::size_t kCoords = 120;

void expect_grads(const std::vector<A::Var>& leaves, const std::function<A::Var()>& f, std::uint64_t seed = 9) {
  std::mt19937_64 rng(seed);
  const auto r = testing::grad_check(leaves, f, kCoords, rng);
  CHECK(r.coords > 0);
  CHECK(r.max_rel <= kTol);
}

A::Var leaf(Shape s, std::mt19937_64& rng, double sd = 1.0) { return A::parameter(testing::random_tensor(s, rng, sd)); }

// Keeps values away from the kinks of relu/clamp/sqrt.
A::Var positive_leaf(Shape s, std::mt19937_64& rng) {
  auto v = leaf(s, rng);
  for (auto& x : v->value.values()) x = 0.5 + std::abs(x);
  return v;
}

// Fixed random projection to a scalar so every output coordinate matters.
A::Var project(const A::Var& v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto w = A::constant(testing::random_tensor(v->shape(), rng));
  return A::sum(A::mul(v, w));
}

}  // namespace

TEST_CASE("elementwise ops pass finite-difference checks") {
  std::mt19937_64 rng(11);
  auto a = leaf({4, 6}, rng), b = leaf({4, 6}, rng), p = positive_leaf({4, 6}, rng);
  expect_grads({a, b}, [&] { return project(A::add(a, b), 1); });
  expect_grads({a, b}, [&] { return project(A::sub(a, b), 2); });
  expect_grads({a, b}, [&] { return project(A::mul(a, b), 3); });
  expect_grads({a}, [&] { return project(A::scale(a, -2.5), 4); });
  expect_grads({a}, [&] { return project(A::add_scalar(a, 0.7), 5); });
  expect_grads({a}, [&] { return project(A::one_minus(a), 6); });
  expect_grads({p}, [&] { return project(A::relu(p), 7); });
  expect_grads({a}, [&] { return project(A::tanh(a), 8); });
  expect_grads({a}, [&] { return project(A::sigmoid(a), 9); });
  expect_grads({a}, [&] { return project(A::exp(a), 10); });
  expect_grads({p}, [&] { return project(A::log(p), 11); });
  expect_grads({p}, [&] { return project(A::sqrt(p), 12); });
  expect_grads({p}, [&] { return project(A::clamp_max(p, 100.0), 13); });
  expect_grads({a}, [&] { return A::mean(A::mul(a, a)); });
  expect_grads({a}, [&] { return project(A::reshape(a, {6, 4}), 14); });
}

TEST_CASE("matrix ops pass finite-difference checks") {
  std::mt19937_64 rng(12);
  auto a = leaf({5, 4}, rng), b = leaf({4, 3}, rng), bias = leaf({3}, rng);
  expect_grads({a, b}, [&] { return project(A::matmul(a, b), 1); });
  expect_grads({a, b, bias}, [&] { return project(A::add_row_bias(A::matmul(a, b), bias), 2); });
  const std::vector<std::size_t> rows{4, 0, 0, 2};
  expect_grads({a}, [&] { return project(A::select_rows(a, rows), 3); });
  auto c = leaf({2, 4}, rng);
  expect_grads({a, c}, [&] { return project(A::concat_rows({a, c}), 4); });
  expect_grads({a, c}, [&] { return project(A::pairwise_distance(a, c, false), 5); });
  expect_grads({a, c}, [&] { return project(A::pairwise_distance(a, c, true), 6); });
  auto d = positive_leaf({3, 4}, rng);
  Tensor mask({3, 4}, {1, 0, 1, 1, 0, 0, 0, 0, 1, 1, 1, 0});
  expect_grads({d}, [&] { return project(A::masked_row_mean(d, mask), 7); });
  auto v = leaf({5}, rng);
  expect_grads({v}, [&] { return A::weighted_sum(v, Tensor({5}, {0.2, -1, 0, 3, 0.5})); });
  const std::vector<std::size_t> targets{0, 2, 1, 1, 0};
  expect_grads({a, b}, [&] { return A::cross_entropy_rows(A::matmul(a, b), targets); });
}

TEST_CASE("convolution and sequence ops pass finite-difference checks") {
  std::mt19937_64 rng(13);
  auto x = leaf({2, 2, 7, 9}, rng), w = leaf({3, 2, 3, 3}, rng), b = leaf({3}, rng);
  expect_grads({x, w, b}, [&] { return project(A::conv2d(x, w, b, {2, 2, 0, 0}), 1); });
  expect_grads({x, w, b}, [&] { return project(A::conv2d(x, w, b, {1, 1, 1, 1}), 2); });
  expect_grads({x}, [&] { return project(A::avg_pool2d(x, 2, 3), 3); });
  expect_grads({x}, [&] { return project(A::global_avg_pool(x), 4); });
  expect_grads({x}, [&] { return project(A::conv_to_sequence(x), 5); });
  auto s = leaf({2, 5, 3}, rng);
  expect_grads({s}, [&] { return project(A::time_step(s, 3), 6); });
  expect_grads({s}, [&] { return project(A::mean_time(s), 7); });
  auto t0 = leaf({2, 3}, rng), t1 = leaf({2, 3}, rng);
  expect_grads({t0, t1}, [&] { return project(A::stack_steps({t0, t1}), 8); });
}

namespace {

ModelConfig small_config(Architecture arch, RecurrentCell cell) {
  ModelConfig c;
  c.precision = Precision::f64;
  c.feature_dim = 23;
  c.embedding_dim = 5;
  c.n_classes = 4;
  c.conv_layers = {{2, 3, 3, 2, 2}, {3, 3, 3, 1, 2}};
  c.recurrent_width = 4;
  c.cell = cell;
  c.architecture = arch;
  c.residual_channels = 3;
  c.residual_blocks = 2;
  c.pool_h = 2;
  c.pool_w = 2;
  return c;
}

void check_model(const ModelConfig& cfg) {
  Model m = Model::build(cfg, 3);
  std::mt19937_64 rng(1);
  std::vector<FeatureMatrix> fs;
  for (int i = 0; i < 3; ++i) fs.push_back(testing::random_features(12, cfg.feature_dim, rng));
  std::vector<const FeatureMatrix*> batch;
  for (auto& f : fs) batch.push_back(&f);
  const std::vector<std::size_t> targets{0, 2, 3};
  std::vector<A::Var> leaves;
  for (auto& p : m.parameters()) leaves.push_back(p.var);
  expect_grads(leaves, [&] { return losses::cross_entropy(m.logits(m.embed(batch)), targets); });
}

}  // namespace

TEST_CASE("GRU conv-recurrent network passes finite-difference checks") {
  check_model(small_config(Architecture::conv_recurrent, RecurrentCell::gru));
}

TEST_CASE("LSTM conv-recurrent network passes finite-difference checks") {
  check_model(small_config(Architecture::conv_recurrent, RecurrentCell::lstm));
}

TEST_CASE("residual network passes finite-difference checks") {
  check_model(small_config(Architecture::residual_conv, RecurrentCell::gru));
}

TEST_CASE("two-layer recurrent stack passes finite-difference checks") {
  auto c = small_config(Architecture::conv_recurrent, RecurrentCell::gru);
  c.recurrent_layers = 2;
  check_model(c);
}

TEST_CASE("losses pass finite-difference checks") {
  std::mt19937_64 rng(14);
  for (auto kind : {losses::DistanceKind::euclidean, losses::DistanceKind::squared}) {
    auto s0 = leaf({2, 4}, rng), s1 = leaf({3, 4}, rng), q0 = leaf({2, 4}, rng), q1 = leaf({1, 4}, rng);
    losses::Episode ep{{0, 1}, {s0, s1}, {q0, q1}};
    expect_grads({s0, s1, q0, q1}, [&] { return losses::prototypical_loss(ep, kind); });

    auto anchor = leaf({1, 4}, rng), pos = leaf({3, 4}, rng), neg = leaf({2, 4}, rng);
    expect_grads({anchor, pos, neg}, [&] { return losses::metric_loss(anchor, pos, neg, kind); });

    auto emb = leaf({10, 4}, rng);
    const std::vector<int> labels{0, 0, 0, 1, 1, 1, 2, 2, 2, 2};
    const std::vector<std::uint8_t> support{1, 0, 1, 1, 0, 0, 1, 0, 1, 0};
    losses::CombinedOptions opt{0.7, 2, kind};
    expect_grads({emb}, [&] { return losses::combined_loss(emb, labels, support, opt); });
    expect_grads({emb}, [&] { return losses::batch_metric_loss(emb, labels, 2, kind); });
    const std::vector<std::size_t> idx{0, 0, 0, 1, 1, 1, 2, 2, 2, 2};
    expect_grads({emb}, [&] { return losses::prototypical_loss_rows(emb, idx, support, 3, kind); });
  }
  auto logits = leaf({6, 5}, rng, 2.0);
  const std::vector<std::size_t> t{0, 4, 1, 1, 3, 2};
  expect_grads({logits}, [&] { return losses::cross_entropy(logits, t); });
}

TEST_CASE("no-grad mode records no graph") {
  std::mt19937_64 rng(15);
  auto a = leaf({3}, rng);
  A::Var y;
  {
    A::NoGradGuard guard;
    CHECK_FALSE(A::grad_enabled());
    y = A::sum(A::mul(a, a));
  }
  CHECK(A::grad_enabled());
  CHECK_THROWS_AS(A::backward(y), UsageError);
  CHECK_FALSE(a->has_grad());
}
