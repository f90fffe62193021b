#pragma once

// Sliding-window keyword spotting over long recordings.

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "csks/audio.hpp"
#include "csks/dsp.hpp"
#include "csks/losses.hpp"
#include "csks/model.hpp"

namespace csks::spotting {

// head_argmax: argmax over all classes, background discarded.
// nearest_prototype: nearest of keyword + background prototypes, hit unless background.
// thresholded_prototype: nearest keyword prototype, hit iff its distance <= tau.
enum class DecisionRule { head_argmax, nearest_prototype, thresholded_prototype };

std::string to_string(DecisionRule rule);
DecisionRule decision_rule_from_string(const std::string& name);

struct DetectionEvent {
  int keyword_id = 0;
  double start_s = 0.0;
  double end_s = 0.0;
  double score = 0.0;
  friend bool operator==(const DetectionEvent&, const DetectionEvent&) = default;
};

struct RawHit {
  double start_s = 0.0;
  double end_s = 0.0;
  int keyword_id = 0;
  double score = 0.0;
};

struct SpotConfig {
  double window_s = 2.0;
  double stride_s = 0.25;
  // Negative means "same as stride".
  double merge_gap_s = -1.0;
  DecisionRule rule = DecisionRule::thresholded_prototype;
  dsp::FeatureConfig features{};
  std::size_t batch = 32;

  double merge_gap() const { return merge_gap_s < 0.0 ? stride_s : merge_gap_s; }
  void validate() const;
};

// Per-item decision; keyword_id < 0 means rejected. Score is larger-is-better:
// the winning posterior for the head rule, minus the nearest distance otherwise.
struct Decision {
  int keyword_id = -1;
  double score = 0.0;
  double distance = 0.0;
};

Decision decide_logits(std::span<const double> logits, int background_label);
Decision decide_embedding(std::span<const double> embedding, const losses::PrototypeBank& bank, DecisionRule rule,
                          int background_label);
// Decisions for a batch of inputs in order.
std::vector<Decision> decide_all(const Model& model, const losses::PrototypeBank* bank, DecisionRule rule,
                                 std::span<const FeatureMatrix* const> inputs, int background_label,
                                 std::size_t chunk = 32);

// Mean embedding per class over the given labelled segments. Classes are the
// keywords 0..n_keywords-1, plus background (label n_keywords) when requested.
losses::PrototypeBank build_inference_bank(const Model& model, std::span<const LabeledFeatures> segments,
                                           int n_keywords, bool include_background,
                                           losses::DistanceKind distance = losses::DistanceKind::euclidean);

// Segment-level detection counts. A keyword item is a TP when decided as its own
// keyword; any other accepted keyword decision is an FP; keyword items not
// decided correctly are FNs.
struct SegmentCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  double f1() const;
};
SegmentCounts segment_counts(std::span<const Decision> decisions, std::span<const int> labels, int background_label);

enum class Outcome { correct, wrong_keyword, background };

// Sweeps every observed nearest-prototype distance and returns the cutoff with
// the highest segment F1. Among equal F1 the fewest acceptances win; the
// returned value is the midpoint between the last accepted and the first
// rejected distance, min - 1e-6 when rejecting everything and max + 1e-6 when
// accepting everything. Always positive.
double calibrate_threshold(std::span<const double> distances, std::span<const Outcome> outcomes);

// Model-based calibration on validation segments. Writes the global cutoff (and
// per-class cutoffs when `per_class`) into `bank` and returns the global one.
double calibrate_threshold(const Model& model, losses::PrototypeBank& bank, std::span<const LabeledFeatures> validation,
                           int n_keywords, bool per_class = false);

// Consecutive hits of one keyword whose gap (next start minus current event end)
// is at most `merge_gap` become one event spanning the union; score is the
// best member. Output sorted by start time, then keyword.
std::vector<DetectionEvent> merge_hits(std::span<const RawHit> hits, double merge_gap);

// Window starts 0, stride, 2*stride, ... while the window fits.
std::vector<double> window_starts(double duration_s, double window_s, double stride_s);
// Raw hits before merging.
std::vector<RawHit> raw_hits(const Model& model, const losses::PrototypeBank* bank, const AudioClip& recording,
                             const SpotConfig& config, int n_keywords);
std::vector<DetectionEvent> spot(const Model& model, const losses::PrototypeBank* bank, const AudioClip& recording,
                                 const SpotConfig& config, int n_keywords);

// Bank persistence (JSON).
struct BankFile {
  losses::PrototypeBank bank;
  DecisionRule rule = DecisionRule::thresholded_prototype;
  int n_keywords = 0;
};
void save_bank(const std::filesystem::path& path, const BankFile& bank, const std::string& provenance_json = "{}");
BankFile load_bank(const std::filesystem::path& path);

// Events CSV: recording_id,keyword_id,start_s,end_s,score.
struct RecordingEvents {
  std::string recording_id;
  std::vector<DetectionEvent> events;
};
void write_events_csv(const std::filesystem::path& path, std::span<const RecordingEvents> events,
                      const std::vector<std::string>& comments = {});
void write_events_json(const std::filesystem::path& path, std::span<const RecordingEvents> events,
                       const std::string& provenance_json = "{}");
std::vector<RecordingEvents> read_events_csv(const std::filesystem::path& path);

}  // namespace csks::spotting
