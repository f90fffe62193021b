#pragma once

// Event-level scoring against ground-truth keyword spans.

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "csks/spotting.hpp"

namespace csks::evalkit {

struct GroundTruthSpan {
  std::string recording_id;
  int keyword_id = 0;
  double start_s = 0.0;
  double end_s = 0.0;
};

struct Prediction {
  std::string recording_id;
  int keyword_id = 0;
  double start_s = 0.0;
  double end_s = 0.0;
  double score = 0.0;
};

struct Counts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  Counts& operator+=(const Counts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  friend bool operator==(const Counts&, const Counts&) = default;
};

enum class MatchRule { any_overlap, iou };

struct MatchOptions {
  MatchRule rule = MatchRule::any_overlap;
  double min_iou = 0.5;
};

struct MatchResult {
  Counts pooled;
  std::map<int, Counts> per_keyword;
  // Index of the truth matched by each prediction, or -1.
  std::vector<long> assignment;
};

double overlap(double a0, double a1, double b0, double b1);
double iou(double a0, double a1, double b0, double b1);
bool intervals_match(const Prediction& p, const GroundTruthSpan& t, const MatchOptions& options);

// Greedy one-to-one matching: predictions in descending score order (ties by
// recording, start, keyword) each take the best-overlapping unmatched truth
// with the same recording and label.
MatchResult match_events(std::span<const Prediction> predictions, std::span<const GroundTruthSpan> truths,
                         const MatchOptions& options = {});

struct Scores {
  double recall = 0.0;
  double precision = 0.0;
  double f1 = 0.0;
  // Set when a ratio had a zero denominator and was defined as 0.
  bool degenerate = false;
};

Scores precision_recall_f1(const Counts& counts);
// F1 from already computed precision and recall (0 when both are 0).
double f1_from(double precision, double recall);

enum class Averaging { micro, macro };
Scores average_scores(const MatchResult& result, Averaging averaging);

struct ReportRow {
  std::string name;
  Scores scores;
  Counts counts;
};

struct RenderedReport {
  std::string text;
  std::string csv;
  std::string json;
};

// Recall/Precision/F1 to three decimals; every row tied for the best F1 (after
// rounding to three decimals) is marked with '*'.
RenderedReport render_report(std::span<const ReportRow> rows, const std::string& provenance_json = "{}");
std::vector<std::size_t> best_rows(std::span<const ReportRow> rows);

std::vector<GroundTruthSpan> read_truth_csv(const std::filesystem::path& path);
void write_truth_csv(const std::filesystem::path& path, std::span<const GroundTruthSpan> truths,
                     const std::vector<std::string>& comments = {});
std::vector<Prediction> flatten(std::span<const spotting::RecordingEvents> events);

}  // namespace csks::evalkit
