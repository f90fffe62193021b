#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "csks/datasim.hpp"
#include "csks/dsp.hpp"
#include "csks/losses.hpp"
#include "csks/model.hpp"
#include "csks/optim.hpp"

namespace csks::trainer {

enum class Variant { honk_ce, finetune_ce, finetune_proto, finetune_proto_metric };
enum class Selection { val_loss, val_f1 };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& name);
std::string to_string(Selection s);
Selection selection_from_string(const std::string& name);

bool uses_head(Variant v);
// Whether the background class gets its own prototype.
bool background_prototype(Variant v);

struct TrainConfig {
  Variant variant = Variant::finetune_proto_metric;
  OptimizerConfig optimizer{};
  // Per step: every keyword class contributes n_support + n_query items, plus
  // n_background background items.
  std::size_t n_support = 2;
  std::size_t n_query = 2;
  std::size_t n_background = 8;
  std::size_t steps_per_epoch = 25;
  std::size_t max_epochs = 10;
  std::size_t patience = 3;
  std::uint64_t seed = 1;
  double lambda = 1.0;
  losses::DistanceKind distance = losses::DistanceKind::euclidean;
  Selection selection = Selection::val_loss;
  // Cache capacity per class, as a multiple of the per-class draw size.
  std::size_t cache_factor = 10;
  // Best checkpoint, report.json and metrics.csv go here when non-empty.
  std::filesystem::path output_dir;
  std::string checkpoint_metadata;

  void validate() const;
};

// Produces training examples for a label in [0, n_keywords]; n_keywords is background.
class ExampleSource {
 public:
  virtual ~ExampleSource() = default;
  virtual int n_keywords() const = 0;
  virtual LabeledFeatures generate(int label, datasim::Rng& rng) const = 0;
};

// On-the-fly simulation: keyword insertion or background chunk, augmentation, features.
class SimulatedSource : public ExampleSource {
 public:
  struct Options {
    datasim::MixConfig mix{};
    datasim::AugmentConfig augment{};
    bool augment_enabled = true;
    dsp::FeatureConfig features{};
  };

  SimulatedSource(std::vector<datasim::KeywordUtterance> utterances, std::vector<AudioClip> background_pool,
                  int n_keywords, Options options);

  int n_keywords() const override { return n_keywords_; }
  LabeledFeatures generate(int label, datasim::Rng& rng) const override;
  datasim::LabeledSegment generate_segment(int label, datasim::Rng& rng) const;

 private:
  std::vector<datasim::KeywordUtterance> utterances_;
  std::vector<AudioClip> pool_;
  std::vector<std::vector<std::size_t>> by_class_;
  int n_keywords_;
  Options options_;
};

// Support/query assignment for one episode, as indices into the labelled items.
struct EpisodeIndices {
  std::vector<int> class_ids;
  std::vector<std::vector<std::size_t>> support;
  std::vector<std::vector<std::size_t>> query;
};

// Every distinct label in `labels` becomes a class; each class needs at least
// n_support + n_query items. Support and query sets are disjoint.
EpisodeIndices sample_episode(std::span<const int> labels, std::size_t n_support, std::size_t n_query,
                              datasim::Rng& rng);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  double val_f1 = 0.0;
  double learning_rate = 0.0;
  double seconds = 0.0;
};

struct TrainReport {
  Variant variant = Variant::finetune_proto_metric;
  std::uint64_t seed = 0;
  std::vector<EpochRecord> epochs;
  // Index into `epochs`; -1 when no epoch ran.
  int best_epoch = -1;
  std::filesystem::path best_checkpoint;
  std::string stop_reason;
  std::size_t steps = 0;

  std::string to_json() const;
  void write_json(const std::filesystem::path& path, const std::string& provenance_json = "{}") const;
  void write_csv(const std::filesystem::path& path, const std::vector<std::string>& comments = {}) const;
};

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
  double f1 = 0.0;
};

// Loss of `variant` on one labelled batch of embeddings/logits.
ag::Var variant_loss(const Model& model, Variant variant, const ag::Var& embeddings, std::span<const int> labels,
                     std::span<const std::uint8_t> is_support, int background_label, double lambda,
                     losses::DistanceKind distance);

// Validation with a fixed support/query split (alternating items per class).
Evaluation evaluate(const Model& model, std::span<const LabeledFeatures> validation, const TrainConfig& config,
                    int n_keywords);

// Trains in place and leaves the best-selected parameters in `model`.
TrainReport fit(Model& model, const ExampleSource& source, std::span<const LabeledFeatures> validation,
                const TrainConfig& config);

// Fixed evaluation sets: each utterance at the given position (no augmentation)
// plus `n_background` background segments.
std::vector<datasim::LabeledSegment> simulate_fixed_set(std::span<const datasim::KeywordUtterance> utterances,
                                                        std::span<const AudioClip> pool, int n_keywords,
                                                        std::size_t n_background, const datasim::MixConfig& mix,
                                                        std::uint64_t seed, bool all_positions = true);
std::vector<LabeledFeatures> featurize(std::span<const datasim::LabeledSegment> segments,
                                       const dsp::FeatureConfig& features);

}  // namespace csks::trainer
