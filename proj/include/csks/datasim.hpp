#pragma once

// Continuous-speech training data simulation: keyword insertion into
// background chunks, background-only segments, augmentation, and a batch
// cache that only generates a fixed fraction of every batch fresh.

#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <initializer_list>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "csks/audio.hpp"
#include "csks/error.hpp"

namespace csks::datasim {

using Rng = std::mt19937_64;

inline constexpr double kSegmentSeconds = 2.0;
inline constexpr double kFreshFraction = 0.3;

std::size_t segment_samples(int sample_rate);

struct KeywordUtterance {
  AudioClip clip;
  int keyword_id = 0;
  std::string speaker_id;
};

struct Span {
  double start_s = 0.0;
  double end_s = 0.0;
  friend bool operator==(const Span&, const Span&) = default;
};

// A 2 s fragment. `keyword_span` is present iff `label` is a keyword id;
// background uses label == number of keywords.
struct LabeledSegment {
  AudioClip clip;
  int label = 0;
  std::optional<Span> keyword_span;
  // Scale applied to the keyword samples when mixing.
  double keyword_gain = 1.0;
};

enum class Position { begin, middle, end };
enum class InsertMode { mix, concatenate };

struct MixConfig {
  double snr_low_db = 6.0;
  double snr_high_db = 20.0;
  InsertMode mode = InsertMode::mix;
  double keyword_gain = 1.0;
};

struct AugmentConfig {
  double max_shift_s = 0.3;
  double max_semitones = 2.0;
  double gain_low = 0.5;
  double gain_high = 1.5;
  void validate() const;
};

// One concrete draw of augmentation parameters.
struct AugmentDraw {
  double shift_s = 0.0;
  double semitones = 0.0;
  double gain = 1.0;
};

// Partitions by speaker: round(train_fraction * speakers) speakers go to train.
std::pair<std::vector<KeywordUtterance>, std::vector<KeywordUtterance>> speaker_split(
    const std::vector<KeywordUtterance>& corpus, double train_fraction, std::uint64_t seed);

// Start sample of a keyword of `keyword_samples` inside a segment of `segment_samples`.
std::size_t insertion_offset(std::size_t segment_samples, std::size_t keyword_samples, Position position);

LabeledSegment simulate_positive(const KeywordUtterance& utterance, std::span<const AudioClip> background_pool,
                                 Position position, const MixConfig& mix, Rng& rng);
LabeledSegment simulate_background(std::span<const AudioClip> background_pool, int background_label, Rng& rng);

AugmentDraw draw_augmentation(const AugmentConfig& config, Rng& rng);
// Pitch shift (resample, then pad/trim), circular time shift, then gain with clipping.
LabeledSegment augment(const LabeledSegment& segment, const AugmentDraw& draw);
LabeledSegment augment(const LabeledSegment& segment, const AugmentConfig& config, Rng& rng);

// Synthetic keyword corpus. Keyword templates depend only on `template_seed`;
// speaker perturbations and noise depend on `seed`.
struct SynthOptions {
  std::uint64_t template_seed = 7;
  int sample_rate = kCanonicalRate;
  double noise_level = 0.004;
};
std::vector<KeywordUtterance> synth_corpus(int n_keywords, int n_speakers, int reps, std::uint64_t seed,
                                           const SynthOptions& options = {});

enum class BackgroundStyle { noise, babble };
// Colored noise, optionally overlaid with syllable babble drawn from templates
// unrelated to the keyword set. Clip loudness varies between -40 and -14 dBFS
// RMS with a slow +-6 dB swell.
std::vector<AudioClip> make_background_pool(int n_clips, double seconds, BackgroundStyle style,
                                            std::uint64_t seed, int sample_rate = kCanonicalRate);

struct PlantedKeyword {
  int keyword_id = 0;
  double start_s = 0.0;
  double end_s = 0.0;
};

struct Recording {
  AudioClip clip;
  std::vector<PlantedKeyword> keywords;
};

struct RecordingOptions {
  double duration_s = 60.0;
  int n_keywords = 15;
  // Keywords are placed in equal slots; this much of each slot edge stays clear.
  double slot_margin_s = 1.0;
  double snr_low_db = 6.0;
  double snr_high_db = 20.0;
  double background_rms = 0.05;
};

// Long recording with keywords from `utterances` planted at known spans.
Recording simulate_recording(std::span<const KeywordUtterance> utterances, std::span<const AudioClip> background_pool,
                             const RecordingOptions& options, Rng& rng);

double rms(std::span<const double> x);

// Keeps up to `capacity` generated items; each batch draws round(fresh_fraction * B)
// new items and the rest uniformly without replacement from the stored items.
template <typename T>
class BatchCache {
 public:
  struct Batch {
    std::vector<T> items;
    std::size_t fresh = 0;
  };

  explicit BatchCache(std::size_t capacity, double fresh_fraction = kFreshFraction)
      : capacity_(capacity), fresh_fraction_(fresh_fraction) {
    if (capacity_ == 0) throw UsageError("batch cache capacity must be positive");
    if (!(fresh_fraction_ > 0.0 && fresh_fraction_ <= 1.0)) {
      throw UsageError("fresh fraction must be in (0, 1]");
    }
  }

  std::size_t fresh_count(std::size_t batch_size) const {
    return static_cast<std::size_t>(std::lround(fresh_fraction_ * static_cast<double>(batch_size)));
  }

  Batch next_batch(std::size_t batch_size, const std::function<T(Rng&)>& generate, Rng& rng) {
    Batch batch;
    const std::size_t fresh = fresh_count(batch_size);
    const std::size_t reused = batch_size - fresh;
    // Cold start: not enough stored items, so the whole batch is generated.
    const std::size_t to_generate = stored_.size() < reused ? batch_size : fresh;
    batch.items.reserve(batch_size);
    std::vector<T> generated;
    generated.reserve(to_generate);
    for (std::size_t i = 0; i < to_generate; ++i) generated.push_back(generate(rng));
    batch.items = generated;
    batch.fresh = to_generate;
    if (to_generate < batch_size) {
      std::vector<std::size_t> index(stored_.size());
      std::iota(index.begin(), index.end(), std::size_t{0});
      for (std::size_t i = 0; i < reused; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, index.size() - 1);
        std::swap(index[i], index[pick(rng)]);
        batch.items.push_back(stored_[index[i]]);
      }
    }
    for (T& item : generated) stored_.push_back(std::move(item));
    while (stored_.size() > capacity_) stored_.pop_front();
    return batch;
  }

  std::size_t size() const { return stored_.size(); }
  std::size_t capacity() const { return capacity_; }

 private:
  std::size_t capacity_;
  double fresh_fraction_;
  std::deque<T> stored_;
};

// CSV manifests.
struct CorpusEntry {
  std::string wav_path;
  int keyword_id = 0;
  std::string speaker_id;
};
struct SegmentEntry {
  std::string wav_path;
  int label = 0;
  std::optional<Span> span;
};

// Paths are written as given and resolved relative to the manifest's directory on read.
void write_corpus_manifest(const std::filesystem::path& path, const std::vector<CorpusEntry>& entries,
                           const std::vector<std::string>& comments = {});
std::vector<CorpusEntry> read_corpus_manifest(const std::filesystem::path& path);
void write_segment_manifest(const std::filesystem::path& path, const std::vector<SegmentEntry>& entries,
                            const std::vector<std::string>& comments = {});
std::vector<SegmentEntry> read_segment_manifest(const std::filesystem::path& path);

// Derives an independent stream seed from a base seed and a tag sequence.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags);

}  // namespace csks::datasim
