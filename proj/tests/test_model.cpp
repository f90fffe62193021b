#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "csks/error.hpp"
#include "csks/losses.hpp"
#include "csks/model.hpp"
#include "csks/optim.hpp"
#include "helpers.hpp"

using namespace csks;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny(std::size_t n_classes = 4) {
  ModelConfig c;
  c.feature_dim = 23;
  c.embedding_dim = 6;
  c.n_classes = n_classes;
  c.conv_layers = {{2, 3, 3, 2, 2}, {3, 3, 3, 1, 2}};
  c.recurrent_width = 5;
  return c;
}

std::vector<FeatureMatrix> inputs(std::size_t n, std::size_t cols, std::uint64_t seed, std::size_t rows = 16) {
  std::mt19937_64 rng(seed);
  std::vector<FeatureMatrix> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(testing::random_features(rows, cols, rng));
  return out;
}

std::vector<const FeatureMatrix*> ptrs(const std::vector<FeatureMatrix>& v) {
  std::vector<const FeatureMatrix*> p;
  for (const auto& f : v) p.push_back(&f);
  return p;
}

fs::path tmp(const std::string& name) {
  const auto d = fs::temp_directory_path() / "csks_test_model";
  fs::create_directories(d);
  return d / name;
}

}  // namespace

TEST_CASE("parameter counts match hand arithmetic") {
  ModelConfig r;
  r.architecture = Architecture::residual_conv;
  r.residual_channels = 16;
  r.residual_blocks = 3;
  r.embedding_dim = 32;
  r.n_classes = 21;
  // stem 16*9+16, 3 blocks * 2 convs * (16*16*9+16), embed 16*32+32, head 32*21+21
  const std::size_t want = (16 * 9 + 16) + 3 * 2 * (16 * 16 * 9 + 16) + (16 * 32 + 32) + (32 * 21 + 21);
  CHECK(Model::build(r, 1).parameter_count() == want);
  CHECK(expected_parameter_count(r) == want);

  ModelConfig d;  // default conv-recurrent network
  // conv0 4*1*3*5+4; conv1 8*4*3*3+8; frequency 241 -> (241-5)/4+1=60 -> (60-3)/2+1=29;
  // GRU input 8*29=232, 3 gates*(232*64+64*64+64); embed 64*32+32; head 32*21+21
  const std::size_t gru = 3 * (232 * 64 + 64 * 64 + 64);
  CHECK(Model::build(d, 1).parameter_count() == 64 + 296 + gru + 2080 + 693);
}

TEST_CASE("initialization is deterministic per seed") {
  const auto a = Model::build(tiny(), 5).parameter_values();
  const auto b = Model::build(tiny(), 5).parameter_values();
  const auto c = Model::build(tiny(), 6).parameter_values();
  CHECK(a == b);
  CHECK_FALSE(a == c);
}

TEST_CASE("forward shapes, determinism, finiteness") {
  auto cfg = tiny(21);
  cfg.embedding_dim = 8;
  const Model m = Model::build(cfg, 2);
  const auto x = inputs(2, 23, 1);
  const auto e = m.forward_embedding(x[0]);
  CHECK(e.size() == 8);
  CHECK(e == m.forward_embedding(x[0]));
  for (double v : e) CHECK(std::isfinite(v));
  const auto l = m.forward_logits(x[0]);
  CHECK(l.size() == 21);
  double mx = *std::max_element(l.begin(), l.end()), s = 0;
  for (double v : l) s += std::exp(v - mx);
  double total = 0;
  for (double v : l) total += std::exp(v - mx) / s;
  CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
  // Batched inference agrees with single inference.
  const auto all = m.embed_all(ptrs(x));
  for (std::size_t j = 0; j < 8; ++j) CHECK(all[8 + j] == doctest::Approx(m.forward_embedding(x[1])[j]).epsilon(1e-12));
  // Wrong feature width.
  const auto bad = inputs(1, 30, 2);
  CHECK_THROWS_AS(m.forward_embedding(bad[0]), UsageError);
  const Model no_head = Model::build(tiny(0), 2);
  CHECK_THROWS_AS(no_head.forward_logits(x[0]), UsageError);
}

TEST_CASE("the head does not influence the embedding; zero head weights give bias logits") {
  Model with = Model::build(tiny(4), 3);
  Model without = Model::build(tiny(0), 3);
  transfer_parameters(with, without);
  const auto x = inputs(1, 23, 4);
  CHECK(with.forward_embedding(x[0]) == without.forward_embedding(x[0]));
  for (auto& p : with.parameters()) {
    if (p.name == "head.weight") p.var->value.fill(0.0);
    if (p.name == "head.bias") p.var->value = Tensor({4}, {0.25, -1.0, 2.0, 0.0});
  }
  const auto l = with.forward_logits(x[0]);
  CHECK(l == std::vector<double>{0.25, -1.0, 2.0, 0.0});
}

TEST_CASE("temporal order matters to the embedding") {
  const Model m = Model::build(tiny(), 7);
  auto x = inputs(1, 23, 8, 30)[0];
  auto y = x;
  // Swap two far-apart rows.
  for (std::size_t c = 0; c < y.cols; ++c) std::swap(y.values[2 * y.cols + c], y.values[27 * y.cols + c]);
  CHECK(m.forward_embedding(x) != m.forward_embedding(y));
}

TEST_CASE("linear layer gradient equals its input") {
  std::mt19937_64 rng(9);
  auto x = ag::constant(testing::random_tensor({1, 4}, rng));
  auto w = ag::parameter(testing::random_tensor({4, 3}, rng));
  ag::backward(ag::sum(ag::matmul(x, w)));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) CHECK(w->grad()[i * 3 + j] == x->value[i]);
}

TEST_CASE("frozen layers get zero gradients and stay bit-identical through optimizer steps") {
  auto cfg = tiny();
  Model m = Model::build(cfg, 4);
  m.set_frozen_prefix(2);
  const auto before = m.parameter_values();
  const auto x = inputs(3, 23, 5);
  const std::vector<std::size_t> t{0, 1, 2};
  OptimizerState st;
  OptimizerConfig oc;
  oc.learning_rate = 0.1;
  for (int i = 0; i < 3; ++i) {
    const auto g = m.backward(losses::cross_entropy(m.logits(m.embed(ptrs(x))), t));
    for (const auto& p : m.parameters()) {
      if (m.is_frozen(p)) {
        for (double v : g.at(p.name).values()) CHECK(v == 0.0);
      }
    }
    optimizer_step(m, st, oc);
  }
  const auto after = m.parameter_values();
  bool moved = false;
  for (const auto& p : m.parameters()) {
    if (m.is_frozen(p)) {
      CHECK(after.at(p.name) == before.at(p.name));
    } else {
      moved = moved || !(after.at(p.name) == before.at(p.name));
    }
  }
  CHECK(moved);
  // A fully frozen model builds no graph, so there is nothing to differentiate.
  m.set_frozen_prefix(m.layer_names().size());
  CHECK_THROWS_AS(m.backward(losses::cross_entropy(m.logits(m.embed(ptrs(x))), t)), UsageError);
}

TEST_CASE("checkpoints round trip, load partially, and reject corruption") {
  const Model m = Model::build(tiny(), 11);
  const auto path = tmp("m.ckpt");
  save_checkpoint(m, path, R"({"seed":11})");
  const Model r = load_checkpoint(path);
  const auto x = inputs(1, 23, 3);
  CHECK(r.forward_embedding(x[0]) == m.forward_embedding(x[0]));
  CHECK(r.config() == m.config());
  CHECK(checkpoint_metadata(path) == R"({"seed":11})");

  Model other = Model::build(tiny(), 12);
  const auto before = other.parameter_values();
  const auto loaded =
      load_parameters(other, path, LoadMode::partial, [](const std::string& n) { return n.rfind("conv", 0) == 0; });
  CHECK(loaded.size() == 4);
  const auto after = other.parameter_values();
  const auto src = m.parameter_values();
  for (const auto& [name, t] : after) {
    if (name.rfind("conv", 0) == 0) {
      CHECK(t == src.at(name));
    } else {
      CHECK(t == before.at(name));
    }
  }
  auto wide = tiny();
  wide.recurrent_width = 7;
  Model mismatch = Model::build(wide, 1);
  CHECK_THROWS_AS(load_parameters(mismatch, path, LoadMode::strict), FormatError);
  CHECK_FALSE(load_parameters(mismatch, path, LoadMode::partial).empty());

  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXX", 4);
  }
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  std::ofstream(tmp("short.ckpt")) << "CSKS";
  CHECK_THROWS_AS(load_checkpoint(tmp("short.ckpt")), FormatError);
  CHECK_THROWS_AS(load_checkpoint(tmp("missing.ckpt")), DataError);
}

TEST_CASE("f32 precision rounds parameters to float") {
  const Model m = Model::build(tiny(), 1);
  for (const auto& p : m.parameters())
    for (double v : p.var->value.values()) CHECK(static_cast<double>(static_cast<float>(v)) == v);
}

TEST_CASE("configuration validation and JSON round trip") {
  auto c = tiny();
  c.embedding_dim = 1;
  CHECK_THROWS_AS(c.validate(), UsageError);
  c = tiny();
  c.conv_layers[0].kernel_w = 100;
  CHECK_THROWS_AS(Model::build(c, 1), UsageError);
  c = tiny();
  c.cell = RecurrentCell::lstm;
  CHECK(config_from_json(config_to_json(c)) == c);
  CHECK(config_digest(c) == config_digest(config_from_json(config_to_json(c))));
  CHECK_THROWS_AS(architecture_from_string("transformer"), UsageError);
}

TEST_CASE("auxiliary pretraining: identity at zero epochs, learns a separable task, deterministic") {
  auto cfg = tiny(2);
  cfg.precision = Precision::f64;
  std::mt19937_64 rng(3);
  std::vector<LabeledFeatures> data;
  for (int i = 0; i < 24; ++i) {
    auto f = testing::random_features(16, 23, rng);
    const int label = i % 2;
    for (std::size_t r = 0; r < f.rows; ++r)
      for (std::size_t c = 0; c < f.cols; ++c) f.values[r * f.cols + c] = (label ? 3.0 : -9.0) + 0.3 * f.values[r * f.cols + c] / 3.0;
    data.push_back({f, label});
  }
  Model m = Model::build(cfg, 1);
  const auto init = m.parameter_values();
  PretrainOptions none;
  pretrain_auxiliary(m, data, none);
  CHECK(m.parameter_values() == init);
  PretrainOptions po;
  po.epochs = 15;
  po.batch_size = 8;
  po.learning_rate = 0.05;
  const auto rep = pretrain_auxiliary(m, data, po);
  CHECK(rep.epoch_accuracy.back() >= 0.95);
  CHECK(rep.epoch_loss.back() < rep.epoch_loss.front());
  Model m2 = Model::build(cfg, 1);
  pretrain_auxiliary(m2, data, po);
  CHECK(m2.parameter_values() == m.parameter_values());
}

TEST_CASE("optimizers: SGD momentum and Adam single-step arithmetic, schedule, clipping") {
  std::map<std::string, Tensor> p{{"a", Tensor({2}, {1.0, -1.0})}};
  const std::map<std::string, Tensor> g{{"a", Tensor({2}, {0.5, -2.0})}};
  OptimizerState st;
  OptimizerConfig sgd;
  sgd.learning_rate = 0.1;
  optimizer_step(p, g, st, sgd);
  CHECK(p["a"][0] == doctest::Approx(0.95));
  optimizer_step(p, g, st, sgd);  // v = 0.9*0.5 + 0.5 = 0.95
  CHECK(p["a"][0] == doctest::Approx(0.95 - 0.095));

  std::map<std::string, Tensor> q{{"a", Tensor({2}, {1.0, -1.0})}};
  OptimizerState sa;
  OptimizerConfig adam;
  adam.kind = OptimizerKind::adam;
  adam.learning_rate = 0.01;
  optimizer_step(q, g, sa, adam);
  // First bias-corrected Adam step moves each coordinate by lr * sign(g).
  CHECK(q["a"][0] == doctest::Approx(0.99).epsilon(1e-6));
  CHECK(q["a"][1] == doctest::Approx(-0.99).epsilon(1e-6));

  std::map<std::string, Tensor> f{{"a", Tensor({2}, {1.0, 1.0})}};
  OptimizerState sf;
  optimizer_step(f, g, sf, sgd, {"a"});
  CHECK(f["a"][0] == 1.0);

  OptimizerConfig cos;
  cos.learning_rate = 1.0;
  cos.total_steps = 10;
  CHECK(scheduled_learning_rate(cos, 0) == doctest::Approx(1.0));
  CHECK(scheduled_learning_rate(cos, 5) == doctest::Approx(0.5));
  CHECK(scheduled_learning_rate(cos, 10) == doctest::Approx(0.0));

  std::map<std::string, Tensor> c{{"a", Tensor({2}, {0.0, 0.0})}};
  OptimizerState sc;
  OptimizerConfig clip;
  clip.learning_rate = 1.0;
  clip.clip_norm = 1.0;
  optimizer_step(c, {{"a", Tensor({2}, {3.0, 4.0})}}, sc, clip);
  CHECK(c["a"][0] == doctest::Approx(-0.6));
  CHECK(c["a"][1] == doctest::Approx(-0.8));
}
