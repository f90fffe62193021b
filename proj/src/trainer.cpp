#include "csks/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <map>
#include <numeric>

#include <json.hpp>

#include "csks/csv.hpp"
#include "csks/error.hpp"
#include "csks/spotting.hpp"

namespace csks::trainer {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::honk_ce: return "honk_ce";
    case Variant::finetune_ce: return "finetune_ce";
    case Variant::finetune_proto: return "finetune_proto";
    case Variant::finetune_proto_metric: return "finetune_proto_metric";
  }
  return "finetune_proto_metric";
}

Variant variant_from_string(const std::string& name) {
  for (Variant v : {Variant::honk_ce, Variant::finetune_ce, Variant::finetune_proto, Variant::finetune_proto_metric}) {
    if (name == to_string(v)) return v;
  }
  throw UsageError("unknown variant '" + name + "' (expected honk_ce, finetune_ce, finetune_proto, finetune_proto_metric)");
}

std::string to_string(Selection s) { return s == Selection::val_f1 ? "val_f1" : "val_loss"; }

Selection selection_from_string(const std::string& name) {
  if (name == "val_loss") return Selection::val_loss;
  if (name == "val_f1") return Selection::val_f1;
  throw UsageError("unknown selection metric '" + name + "'");
}

bool uses_head(Variant v) { return v == Variant::honk_ce || v == Variant::finetune_ce; }
bool background_prototype(Variant v) { return v == Variant::finetune_proto; }

void TrainConfig::validate() const {
  optimizer.validate();
  if (patience < 1) throw UsageError("patience must be at least 1");
  if (n_support == 0 || n_query == 0) throw UsageError("episodes need at least one support and one query per class");
  if (steps_per_epoch == 0) throw UsageError("steps_per_epoch must be positive");
  if (variant == Variant::finetune_proto && n_background < 2) {
    throw UsageError("the prototypical variant needs at least two background items per step");
  }
  if (cache_factor == 0) throw UsageError("cache_factor must be positive");
}

// ---------------------------------------------------------------------------

SimulatedSource::SimulatedSource(std::vector<datasim::KeywordUtterance> utterances,
                                 std::vector<AudioClip> background_pool, int n_keywords, Options options)
    : utterances_(std::move(utterances)),
      pool_(std::move(background_pool)),
      by_class_(static_cast<std::size_t>(std::max(n_keywords, 0))),
      n_keywords_(n_keywords),
      options_(options) {
  if (n_keywords <= 0) throw UsageError("need at least one keyword");
  if (pool_.empty()) throw UsageError("background pool is empty");
  options_.augment.validate();
  for (std::size_t i = 0; i < utterances_.size(); ++i) {
    const int k = utterances_[i].keyword_id;
    if (k < 0 || k >= n_keywords) throw DataError("utterance keyword id out of range");
    by_class_[static_cast<std::size_t>(k)].push_back(i);
  }
  for (int k = 0; k < n_keywords; ++k) {
    if (by_class_[static_cast<std::size_t>(k)].empty()) {
      throw DataError("no training utterances for keyword " + std::to_string(k));
    }
  }
}

datasim::LabeledSegment SimulatedSource::generate_segment(int label, datasim::Rng& rng) const {
  datasim::LabeledSegment seg;
  if (label == n_keywords_) {
    seg = datasim::simulate_background(pool_, n_keywords_, rng);
  } else {
    const auto& members = by_class_.at(static_cast<std::size_t>(label));
    std::uniform_int_distribution<std::size_t> pick(0, members.size() - 1);
    std::uniform_int_distribution<int> where(0, 2);
    const auto& utt = utterances_[members[pick(rng)]];
    seg = datasim::simulate_positive(utt, pool_, static_cast<datasim::Position>(where(rng)), options_.mix, rng);
  }
  if (options_.augment_enabled) seg = datasim::augment(seg, options_.augment, rng);
  return seg;
}

LabeledFeatures SimulatedSource::generate(int label, datasim::Rng& rng) const {
  const datasim::LabeledSegment seg = generate_segment(label, rng);
  return {dsp::extract_features(seg.clip, options_.features), seg.label};
}

// ---------------------------------------------------------------------------

EpisodeIndices sample_episode(std::span<const int> labels, std::size_t n_support, std::size_t n_query,
                              datasim::Rng& rng) {
  if (n_support == 0 || n_query == 0) throw UsageError("sample_episode: sizes must be positive");
  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(i);
  EpisodeIndices ep;
  for (auto& [label, idx] : members) {
    if (idx.size() < n_support + n_query) {
      throw DataError("class " + std::to_string(label) + " has " + std::to_string(idx.size()) + " items; episode needs " +
                      std::to_string(n_support + n_query));
    }
    // Partial Fisher-Yates over the class members.
    for (std::size_t i = 0; i < n_support + n_query; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
      std::swap(idx[i], idx[pick(rng)]);
    }
    ep.class_ids.push_back(label);
    ep.support.emplace_back(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_support));
    ep.query.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(n_support),
                          idx.begin() + static_cast<std::ptrdiff_t>(n_support + n_query));
  }
  return ep;
}

// ---------------------------------------------------------------------------

ag::Var variant_loss(const Model& model, Variant variant, const ag::Var& embeddings, std::span<const int> labels,
                     std::span<const std::uint8_t> is_support, int background_label, double lambda,
                     losses::DistanceKind distance) {
  switch (variant) {
    case Variant::honk_ce:
    case Variant::finetune_ce: {
      std::vector<std::size_t> targets;
      for (int l : labels) {
        if (l < 0) throw UsageError("negative label");
        targets.push_back(static_cast<std::size_t>(l));
      }
      return losses::cross_entropy(model.logits(embeddings), targets);
    }
    case Variant::finetune_proto: {
      std::map<int, std::size_t> classes;
      for (int l : labels) classes.emplace(l, 0);
      std::size_t next = 0;
      for (auto& [l, i] : classes) i = next++;
      std::vector<std::size_t> index;
      for (int l : labels) index.push_back(classes.at(l));
      return losses::prototypical_loss_rows(embeddings, index, is_support, classes.size(), distance);
    }
    case Variant::finetune_proto_metric: {
      losses::CombinedOptions opt;
      opt.lambda = lambda;
      opt.background_label = background_label;
      opt.distance = distance;
      return losses::combined_loss(embeddings, labels, is_support, opt);
    }
  }
  throw UsageError("unhandled variant");
}

namespace {

// Alternating support/query roles inside each class, in dataset order.
std::vector<std::uint8_t> fixed_roles(std::span<const int> labels) {
  std::map<int, std::size_t> seen;
  std::vector<std::uint8_t> roles;
  for (int l : labels) roles.push_back(seen[l]++ % 2 == 0 ? 1 : 0);
  return roles;
}

losses::PrototypeBank bank_from_rows(const Tensor& emb, std::span<const int> labels,
                                     std::span<const std::uint8_t> is_support, int skip_label,
                                     losses::DistanceKind distance) {
  const std::size_t e = emb.dim(1);
  std::map<int, std::vector<std::vector<double>>> groups;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!is_support[i] || labels[i] == skip_label) continue;
    groups[labels[i]].emplace_back(emb.data() + i * e, emb.data() + (i + 1) * e);
  }
  std::vector<int> ids;
  std::vector<std::vector<std::vector<double>>> supports;
  for (auto& [l, g] : groups) {
    ids.push_back(l);
    supports.push_back(std::move(g));
  }
  return losses::compute_prototypes(ids, supports, distance);
}

}  // namespace

Evaluation evaluate(const Model& model, std::span<const LabeledFeatures> validation, const TrainConfig& config,
                    int n_keywords) {
  if (validation.empty()) throw UsageError("validation set is empty");
  ag::NoGradGuard guard;
  std::vector<const FeatureMatrix*> inputs;
  std::vector<int> labels;
  for (const auto& v : validation) {
    inputs.push_back(&v.features);
    labels.push_back(v.label);
  }
  const Tensor emb = model.embed_all(inputs);
  const std::vector<std::uint8_t> roles = fixed_roles(labels);
  Evaluation out;
  out.loss = ag::scalar(variant_loss(model, config.variant, ag::constant(emb), labels, roles, n_keywords, config.lambda,
                                     config.distance));
  const std::size_t e = emb.dim(1);

  std::vector<spotting::Decision> decisions;
  std::vector<int> scored_labels;
  if (uses_head(config.variant)) {
    const ag::Var logits = model.logits(ag::constant(emb));
    const std::size_t c = logits->value.dim(1);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const double* row = logits->value.data() + i * c;
      const int arg = static_cast<int>(std::max_element(row, row + c) - row);
      correct += arg == labels[i];
      decisions.push_back(spotting::decide_logits(std::span<const double>(row, c), n_keywords));
    }
    scored_labels = labels;
    out.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  } else {
    const bool thresholded = config.variant == Variant::finetune_proto_metric;
    losses::PrototypeBank bank =
        bank_from_rows(emb, labels, roles, thresholded ? n_keywords : -1, config.distance);
    const auto rule =
        thresholded ? spotting::DecisionRule::thresholded_prototype : spotting::DecisionRule::nearest_prototype;
    std::vector<std::size_t> queries;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (!roles[i]) queries.push_back(i);
    }
    if (queries.empty()) throw UsageError("validation set has no query items");
    if (thresholded) {
      std::vector<double> dist;
      std::vector<spotting::Outcome> outcomes;
      for (std::size_t i : queries) {
        const auto d = spotting::decide_embedding(std::span<const double>(emb.data() + i * e, e), bank,
                                                  spotting::DecisionRule::nearest_prototype, n_keywords);
        dist.push_back(d.distance);
        outcomes.push_back(labels[i] == n_keywords  ? spotting::Outcome::background
                           : labels[i] == d.keyword_id ? spotting::Outcome::correct
                                                        : spotting::Outcome::wrong_keyword);
      }
      bank.threshold = spotting::calibrate_threshold(dist, outcomes);
    }
    std::size_t correct = 0;
    for (std::size_t i : queries) {
      const auto d = spotting::decide_embedding(std::span<const double>(emb.data() + i * e, e), bank, rule, n_keywords);
      const int predicted = d.keyword_id < 0 ? n_keywords : d.keyword_id;
      correct += predicted == labels[i];
      decisions.push_back(d);
      scored_labels.push_back(labels[i]);
    }
    out.accuracy = static_cast<double>(correct) / static_cast<double>(queries.size());
  }
  out.f1 = spotting::segment_counts(decisions, scored_labels, n_keywords).f1();
  return out;
}

// ---------------------------------------------------------------------------

std::string TrainReport::to_json() const {
  nlohmann::json j;
  j["variant"] = trainer::to_string(variant);
  j["seed"] = seed;
  j["best_epoch"] = best_epoch;
  j["best_checkpoint"] = best_checkpoint.string();
  j["stop_reason"] = stop_reason;
  j["steps"] = steps;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& e : epochs) {
    rows.push_back({{"epoch", e.epoch},
                    {"train_loss", e.train_loss},
                    {"val_loss", e.val_loss},
                    {"val_accuracy", e.val_accuracy},
                    {"val_f1", e.val_f1},
                    {"learning_rate", e.learning_rate},
                    {"seconds", e.seconds}});
  }
  j["epochs"] = rows;
  return j.dump(2);
}

void TrainReport::write_json(const std::filesystem::path& path, const std::string& provenance_json) const {
  auto j = nlohmann::json::parse(to_json());
  j["provenance"] = nlohmann::json::parse(provenance_json);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

void TrainReport::write_csv(const std::filesystem::path& path, const std::vector<std::string>& comments) const {
  csv::Table t;
  t.comments = comments;
  t.header = {"epoch", "train_loss", "val_loss", "val_accuracy", "val_f1", "learning_rate"};
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return std::string(buf);
  };
  for (const auto& e : epochs) {
    t.rows.push_back({std::to_string(e.epoch), num(e.train_loss), num(e.val_loss), num(e.val_accuracy), num(e.val_f1),
                      num(e.learning_rate)});
  }
  csv::write(path, t);
}

// ---------------------------------------------------------------------------

TrainReport fit(Model& model, const ExampleSource& source, std::span<const LabeledFeatures> validation,
                const TrainConfig& config) {
  config.validate();
  const int k_count = source.n_keywords();
  const int background = k_count;
  if (uses_head(config.variant)) {
    if (!model.has_head()) throw UsageError(trainer::to_string(config.variant) + " needs a classification head");
    if (model.config().n_classes != static_cast<std::size_t>(k_count + 1)) {
      throw UsageError("classification head must have n_keywords + 1 classes");
    }
  }
  if (config.max_epochs > 0 && validation.empty()) throw UsageError("validation set is empty");

  TrainReport report;
  report.variant = config.variant;
  report.seed = config.seed;
  const std::filesystem::path ckpt =
      config.output_dir.empty() ? std::filesystem::path() : config.output_dir / "best.ckpt";
  if (!ckpt.empty()) report.best_checkpoint = ckpt;

  if (config.max_epochs == 0) {
    report.stop_reason = "max_epochs";
    if (!ckpt.empty()) save_checkpoint(model, ckpt, config.checkpoint_metadata);
    return report;
  }

  OptimizerConfig opt = config.optimizer;
  if (opt.total_steps == 0) opt.total_steps = config.max_epochs * config.steps_per_epoch;
  OptimizerState state;

  const std::size_t per_class = config.n_support + config.n_query;
  const std::size_t n_groups = static_cast<std::size_t>(k_count) + (config.n_background > 0 ? 1 : 0);
  std::vector<datasim::BatchCache<LabeledFeatures>> caches;
  std::vector<datasim::Rng> rngs;
  for (std::size_t g = 0; g < n_groups; ++g) {
    const std::size_t draw = g < static_cast<std::size_t>(k_count) ? per_class : config.n_background;
    caches.emplace_back(config.cache_factor * draw);
    rngs.emplace_back(datasim::derive_seed(config.seed, {1, g}));
  }
  datasim::Rng role_rng(datasim::derive_seed(config.seed, {2}));

  double best_metric = 0.0;
  std::size_t since_best = 0;
  ParameterSet best_params = model.parameter_values();
  report.stop_reason = "max_epochs";

  for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    double loss_sum = 0.0;
    const double lr = scheduled_learning_rate(opt, state.step);
    for (std::size_t step = 0; step < config.steps_per_epoch; ++step) {
      std::vector<std::vector<LabeledFeatures>> groups(n_groups);
      std::vector<std::exception_ptr> failures(n_groups);
      // Each group owns its cache and rng, so generation order across groups does not matter.
#pragma omp parallel for schedule(dynamic, 1)
      for (std::size_t g = 0; g < n_groups; ++g) {
        try {
          const int label = static_cast<int>(g);
          const std::size_t draw = g < static_cast<std::size_t>(k_count) ? per_class : config.n_background;
          groups[g] = caches[g]
                          .next_batch(draw, [&source, label](datasim::Rng& r) { return source.generate(label, r); },
                                      rngs[g])
                          .items;
        } catch (...) {
          failures[g] = std::current_exception();
        }
      }
      for (const auto& f : failures) {
        if (f) std::rethrow_exception(f);
      }
      std::vector<const FeatureMatrix*> inputs;
      std::vector<int> labels;
      for (const auto& group : groups) {
        for (const auto& item : group) {
          inputs.push_back(&item.features);
          labels.push_back(item.label);
        }
      }
      std::vector<std::uint8_t> is_support(labels.size(), 0);
      std::vector<int> keyword_labels(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(k_count * per_class));
      const EpisodeIndices ep = sample_episode(keyword_labels, config.n_support, config.n_query, role_rng);
      for (const auto& s : ep.support) {
        for (std::size_t i : s) is_support[i] = 1;
      }
      if (config.n_background > 0) {
        const std::vector<int> bg(config.n_background, background);
        const std::size_t bg_support = std::max<std::size_t>(1, config.n_background / 2);
        const std::size_t bg_query = config.n_background - bg_support;
        if (bg_query > 0) {
          const EpisodeIndices bep = sample_episode(bg, bg_support, bg_query, role_rng);
          for (std::size_t i : bep.support.front()) is_support[k_count * per_class + i] = 1;
        }
      }

      const ag::Var emb = model.embed(inputs);
      const ag::Var loss = variant_loss(model, config.variant, emb, labels, is_support, background, config.lambda,
                                        config.distance);
      const double value = ag::scalar(loss);
      if (!std::isfinite(value)) {
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(step) + " (" + trainer::to_string(config.variant) + ")");
      }
      loss_sum += value;
      model.backward(loss);
      optimizer_step(model, state, opt);
      ++report.steps;
    }

    const Evaluation ev = evaluate(model, validation, config, k_count);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(config.steps_per_epoch);
    rec.val_loss = ev.loss;
    rec.val_accuracy = ev.accuracy;
    rec.val_f1 = ev.f1;
    rec.learning_rate = lr;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!std::isfinite(rec.val_loss)) throw NumericError("non-finite validation loss at epoch " + std::to_string(epoch));
    report.epochs.push_back(rec);

    const double metric = config.selection == Selection::val_loss ? rec.val_loss : -rec.val_f1;
    if (report.best_epoch < 0 || metric < best_metric) {
      best_metric = metric;
      report.best_epoch = static_cast<int>(epoch);
      best_params = model.parameter_values();
      since_best = 0;
      if (!ckpt.empty()) save_checkpoint(model, ckpt, config.checkpoint_metadata);
    } else if (++since_best >= config.patience) {
      report.stop_reason = "early_stopping";
      break;
    }
  }

  for (Parameter& p : model.parameters()) p.var->value = best_params.at(p.name);
  model.zero_grad();
  if (!config.output_dir.empty()) {
    report.write_json(config.output_dir / "report.json");
    report.write_csv(config.output_dir / "metrics.csv");
  }
  return report;
}

// ---------------------------------------------------------------------------

std::vector<datasim::LabeledSegment> simulate_fixed_set(std::span<const datasim::KeywordUtterance> utterances,
                                                        std::span<const AudioClip> pool, int n_keywords,
                                                        std::size_t n_background, const datasim::MixConfig& mix,
                                                        std::uint64_t seed, bool all_positions) {
  std::vector<datasim::LabeledSegment> out;
  for (std::size_t i = 0; i < utterances.size(); ++i) {
    datasim::Rng rng(datasim::derive_seed(seed, {1, i}));
    if (all_positions) {
      for (auto pos : {datasim::Position::begin, datasim::Position::middle, datasim::Position::end}) {
        out.push_back(datasim::simulate_positive(utterances[i], pool, pos, mix, rng));
      }
    } else {
      std::uniform_int_distribution<int> where(0, 2);
      out.push_back(datasim::simulate_positive(utterances[i], pool, static_cast<datasim::Position>(where(rng)), mix, rng));
    }
  }
  for (std::size_t j = 0; j < n_background; ++j) {
    datasim::Rng rng(datasim::derive_seed(seed, {2, j}));
    out.push_back(datasim::simulate_background(pool, n_keywords, rng));
  }
  return out;
}

std::vector<LabeledFeatures> featurize(std::span<const datasim::LabeledSegment> segments,
                                       const dsp::FeatureConfig& features) {
  std::vector<LabeledFeatures> out(segments.size());
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < segments.size(); ++i) {
    out[i] = {dsp::extract_features(segments[i].clip, features), segments[i].label};
  }
  return out;
}

}  // namespace csks::trainer
