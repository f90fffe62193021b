#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "csks/error.hpp"
#include "csks/trainer.hpp"
#include "helpers.hpp"

using namespace csks;
using namespace csks::trainer;

namespace {

// Class k lights up its own band of columns; background is flat.
class ToySource : public ExampleSource {
 public:
  explicit ToySource(int k) : k_(k) {}
  int n_keywords() const override { return k_; }
  LabeledFeatures generate(int label, datasim::Rng& rng) const override {
    std::normal_distribution<double> noise(0.0, 0.5);
    FeatureMatrix f;
    f.rows = 16;
    f.cols = 23;
    f.frame_hop_seconds = 0.01;
    f.values.resize(f.rows * f.cols);
    for (std::size_t r = 0; r < f.rows; ++r) {
      for (std::size_t c = 0; c < f.cols; ++c) {
        const bool lit = label < k_ && c / 5 == static_cast<std::size_t>(label);
        f.values[r * f.cols + c] = (lit ? 2.0 : -2.0) + noise(rng);
      }
    }
    return {std::move(f), label};
  }

 private:
  int k_;
};

ModelConfig toy_model(std::size_t n_classes) {
  ModelConfig c;
  c.feature_dim = 23;
  c.embedding_dim = 6;
  c.n_classes = n_classes;
  c.conv_layers = {{3, 3, 3, 2, 2}, {4, 3, 3, 1, 2}};
  c.recurrent_width = 8;
  return c;
}

std::vector<LabeledFeatures> toy_validation(const ToySource& src, std::size_t per_class, std::uint64_t seed) {
  datasim::Rng rng(seed);
  std::vector<LabeledFeatures> out;
  for (int label = 0; label <= src.n_keywords(); ++label) {
    for (std::size_t i = 0; i < per_class; ++i) out.push_back(src.generate(label, rng));
  }
  return out;
}

TrainConfig toy_config(Variant v) {
  TrainConfig t;
  t.variant = v;
  t.optimizer.kind = OptimizerKind::adam;
  t.optimizer.learning_rate = 0.01;
  t.n_support = 2;
  t.n_query = 2;
  t.n_background = 4;
  t.steps_per_epoch = 15;
  t.max_epochs = 6;
  t.patience = 10;
  t.seed = 5;
  return t;
}

}  // namespace

TEST_CASE("episodes: disjoint support and query drawn from the right class") {
  std::vector<int> labels;
  for (int k = 0; k < 4; ++k)
    for (int i = 0; i < 5 + k; ++i) labels.push_back(k);
  datasim::Rng rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto ep = sample_episode(labels, 2, 3, rng);
    REQUIRE(ep.class_ids.size() == 4);
    for (std::size_t c = 0; c < ep.class_ids.size(); ++c) {
      REQUIRE(ep.support[c].size() == 2);
      REQUIRE(ep.query[c].size() == 3);
      std::set<std::size_t> seen;
      for (auto i : ep.support[c]) {
        CHECK(labels[i] == ep.class_ids[c]);
        seen.insert(i);
      }
      for (auto i : ep.query[c]) {
        CHECK(labels[i] == ep.class_ids[c]);
        seen.insert(i);
      }
      CHECK(seen.size() == 5);
    }
  }
  const std::vector<int> few{0, 0, 1};
  CHECK_THROWS_AS(sample_episode(few, 1, 1, rng), DataError);
}

TEST_CASE("zero epochs leaves the model untouched and writes the initial checkpoint") {
  const ToySource src(3);
  Model m = Model::build(toy_model(0), 2);
  const auto init = m.parameter_values();
  auto t = toy_config(Variant::finetune_proto_metric);
  t.max_epochs = 0;
  t.output_dir = std::filesystem::temp_directory_path() / "csks_test_fit0";
  std::filesystem::remove_all(t.output_dir);
  std::filesystem::create_directories(t.output_dir);
  const auto rep = fit(m, src, {}, t);
  CHECK(rep.epochs.empty());
  CHECK(rep.best_epoch == -1);
  CHECK(m.parameter_values() == init);
  const Model back = load_checkpoint(t.output_dir / "best.ckpt");
  CHECK(back.parameter_values() == init);
}

TEST_CASE("head variants reject a model without a matching head") {
  const ToySource src(3);
  Model m = Model::build(toy_model(0), 2);
  const auto val = toy_validation(src, 4, 1);
  CHECK_THROWS_AS(fit(m, src, val, toy_config(Variant::finetune_ce)), UsageError);
  Model wrong = Model::build(toy_model(3), 2);
  CHECK_THROWS_AS(fit(wrong, src, val, toy_config(Variant::finetune_ce)), UsageError);
}

TEST_CASE("toy separable task converges for every variant and the best epoch is selected") {
  const ToySource src(3);
  const auto val = toy_validation(src, 8, 77);
  for (Variant v : {Variant::finetune_ce, Variant::finetune_proto, Variant::finetune_proto_metric}) {
    CAPTURE(to_string(v));
    Model m = Model::build(toy_model(uses_head(v) ? 4 : 0), 3);
    auto t = toy_config(v);
    const auto rep = fit(m, src, val, t);
    REQUIRE(rep.best_epoch >= 0);
    double min_loss = rep.epochs.front().val_loss;
    for (const auto& e : rep.epochs) min_loss = std::min(min_loss, e.val_loss);
    CHECK(rep.epochs[static_cast<std::size_t>(rep.best_epoch)].val_loss == min_loss);
    CHECK(rep.epochs[static_cast<std::size_t>(rep.best_epoch)].val_accuracy >= 0.95);
    // The model holds the selected epoch's parameters.
    const auto ev = evaluate(m, val, t, 3);
    CHECK(ev.loss == doctest::Approx(min_loss).epsilon(1e-9));
    CHECK(rep.steps == rep.epochs.size() * t.steps_per_epoch);
  }
}

TEST_CASE("training is deterministic for a fixed seed and writes report files") {
  const ToySource src(2);
  const auto val = toy_validation(src, 4, 8);
  auto t = toy_config(Variant::finetune_proto_metric);
  t.max_epochs = 2;
  t.steps_per_epoch = 4;
  t.output_dir = std::filesystem::temp_directory_path() / "csks_test_fit_det";
  std::filesystem::remove_all(t.output_dir);
  std::filesystem::create_directories(t.output_dir);
  Model a = Model::build(toy_model(0), 4), b = Model::build(toy_model(0), 4);
  const auto ra = fit(a, src, val, t);
  auto t2 = t;
  t2.output_dir.clear();
  const auto rb = fit(b, src, val, t2);
  CHECK(a.parameter_values() == b.parameter_values());
  REQUIRE(ra.epochs.size() == rb.epochs.size());
  for (std::size_t i = 0; i < ra.epochs.size(); ++i) CHECK(ra.epochs[i].train_loss == rb.epochs[i].train_loss);

  std::ifstream js(t.output_dir / "report.json");
  const auto j = nlohmann::json::parse(js);
  CHECK(j.at("epochs").size() == ra.epochs.size());
  CHECK(j.at("best_epoch").get<int>() == ra.best_epoch);
  std::ifstream csv(t.output_dir / "metrics.csv");
  std::string line;
  std::size_t rows = 0;
  while (std::getline(csv, line)) {
    if (!line.empty() && line[0] != '#') ++rows;
  }
  CHECK(rows == ra.epochs.size() + 1);

  auto t3 = t2;
  t3.seed = 6;
  Model c = Model::build(toy_model(0), 4);
  fit(c, src, val, t3);
  CHECK(c.parameter_values() != a.parameter_values());
}

TEST_CASE("early stopping triggers after patience epochs without improvement") {
  const ToySource src(2);
  const auto val = toy_validation(src, 4, 9);
  auto t = toy_config(Variant::finetune_proto);
  // Updates vanish under f32 parameter rounding, so validation loss stays flat.
  t.optimizer.learning_rate = 1e-20;
  t.optimizer.kind = OptimizerKind::sgd_momentum;
  t.max_epochs = 10;
  t.steps_per_epoch = 2;
  t.patience = 2;
  Model m = Model::build(toy_model(0), 4);
  const auto rep = fit(m, src, val, t);
  CHECK(rep.stop_reason == "early_stopping");
  CHECK(rep.epochs.size() == 3);
  CHECK(rep.best_epoch == 0);
}

TEST_CASE("loss on a frozen batch strictly decreases over 10 small steps") {
  const ToySource src(3);
  const auto batch = toy_validation(src, 4, 31);
  std::vector<const FeatureMatrix*> inputs;
  std::vector<int> labels;
  std::vector<std::uint8_t> support;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    inputs.push_back(&batch[i].features);
    labels.push_back(batch[i].label);
    support.push_back(i % 2 == 0 ? 1 : 0);
  }
  for (Variant v : {Variant::finetune_ce, Variant::finetune_proto, Variant::finetune_proto_metric}) {
    CAPTURE(to_string(v));
    ModelConfig mc = toy_model(4);
    mc.precision = Precision::f64;
    Model m = Model::build(mc, 17);
    OptimizerConfig oc;
    oc.kind = OptimizerKind::sgd_momentum;
    oc.momentum = 0.0;
    oc.learning_rate = 1e-3;
    OptimizerState st;
    double prev = 0.0;
    for (int step = 0; step <= 10; ++step) {
      const ag::Var loss =
          variant_loss(m, v, m.embed(inputs), labels, support, 3, 1.0, losses::DistanceKind::euclidean);
      const double value = ag::scalar(loss);
      if (step > 0) CHECK(value < prev);
      prev = value;
      if (step == 10) break;
      m.backward(loss);
      optimizer_step(m, st, oc);
    }
  }
}
