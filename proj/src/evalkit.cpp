#include "csks/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "csks/csv.hpp"
#include "csks/error.hpp"

namespace csks::evalkit {

double overlap(double a0, double a1, double b0, double b1) { return std::max(0.0, std::min(a1, b1) - std::max(a0, b0)); }

double iou(double a0, double a1, double b0, double b1) {
  const double inter = overlap(a0, a1, b0, b1);
  const double uni = std::max(a1, b1) - std::min(a0, b0);
  return uni > 0.0 ? inter / uni : 0.0;
}

bool intervals_match(const Prediction& p, const GroundTruthSpan& t, const MatchOptions& options) {
  if (p.recording_id != t.recording_id || p.keyword_id != t.keyword_id) return false;
  if (options.rule == MatchRule::iou) return iou(p.start_s, p.end_s, t.start_s, t.end_s) >= options.min_iou;
  return overlap(p.start_s, p.end_s, t.start_s, t.end_s) > 0.0;
}

MatchResult match_events(std::span<const Prediction> predictions, std::span<const GroundTruthSpan> truths,
                         const MatchOptions& options) {
  std::vector<std::size_t> order(predictions.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const Prediction& x = predictions[a];
    const Prediction& y = predictions[b];
    if (x.score != y.score) return x.score > y.score;
    if (x.recording_id != y.recording_id) return x.recording_id < y.recording_id;
    if (x.start_s != y.start_s) return x.start_s < y.start_s;
    return x.keyword_id < y.keyword_id;
  });
  MatchResult r;
  r.assignment.assign(predictions.size(), -1);
  std::vector<char> taken(truths.size(), 0);
  for (std::size_t pi : order) {
    const Prediction& p = predictions[pi];
    long best = -1;
    double best_overlap = -1.0;
    for (std::size_t ti = 0; ti < truths.size(); ++ti) {
      if (taken[ti] || !intervals_match(p, truths[ti], options)) continue;
      const double ov = overlap(p.start_s, p.end_s, truths[ti].start_s, truths[ti].end_s);
      if (ov > best_overlap) {
        best_overlap = ov;
        best = static_cast<long>(ti);
      }
    }
    if (best >= 0) {
      taken[static_cast<std::size_t>(best)] = 1;
      r.assignment[pi] = best;
      ++r.pooled.tp;
      ++r.per_keyword[p.keyword_id].tp;
    } else {
      ++r.pooled.fp;
      ++r.per_keyword[p.keyword_id].fp;
    }
  }
  for (std::size_t ti = 0; ti < truths.size(); ++ti) {
    if (taken[ti]) continue;
    ++r.pooled.fn;
    ++r.per_keyword[truths[ti].keyword_id].fn;
  }
  return r;
}

double f1_from(double precision, double recall) {
  return precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

Scores precision_recall_f1(const Counts& c) {
  Scores s;
  const double tp = static_cast<double>(c.tp);
  if (c.tp + c.fp > 0) {
    s.precision = tp / static_cast<double>(c.tp + c.fp);
  } else {
    s.degenerate = true;
  }
  if (c.tp + c.fn > 0) {
    s.recall = tp / static_cast<double>(c.tp + c.fn);
  } else {
    s.degenerate = true;
  }
  s.f1 = f1_from(s.precision, s.recall);
  return s;
}

Scores average_scores(const MatchResult& result, Averaging averaging) {
  if (averaging == Averaging::micro || result.per_keyword.empty()) return precision_recall_f1(result.pooled);
  Scores s;
  for (const auto& [k, c] : result.per_keyword) {
    const Scores one = precision_recall_f1(c);
    s.precision += one.precision;
    s.recall += one.recall;
    s.f1 += one.f1;
    s.degenerate = s.degenerate || one.degenerate;
  }
  const double n = static_cast<double>(result.per_keyword.size());
  s.precision /= n;
  s.recall /= n;
  s.f1 /= n;
  return s;
}

namespace {

std::string fixed3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

}  // namespace

std::vector<std::size_t> best_rows(std::span<const ReportRow> rows) {
  std::vector<std::size_t> out;
  if (rows.empty()) return out;
  double best = -1.0;
  for (const auto& r : rows) best = std::max(best, std::round(r.scores.f1 * 1000.0));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (std::round(rows[i].scores.f1 * 1000.0) == best) out.push_back(i);
  }
  return out;
}

RenderedReport render_report(std::span<const ReportRow> rows, const std::string& provenance_json) {
  if (rows.empty()) throw UsageError("report needs at least one row");
  const auto best = best_rows(rows);
  auto is_best = [&](std::size_t i) { return std::find(best.begin(), best.end(), i) != best.end(); };
  std::size_t name_width = 5;
  for (const auto& r : rows) name_width = std::max(name_width, r.name.size());

  std::ostringstream text;
  char line[512];
  std::snprintf(line, sizeof line, "  %-*s  %9s  %9s  %9s\n", static_cast<int>(name_width), "Model", "Recall",
                "Precision", "F1");
  text << line;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    std::snprintf(line, sizeof line, "%c %-*s  %9s  %9s  %9s%s\n", is_best(i) ? '*' : ' ', static_cast<int>(name_width),
                  r.name.c_str(), fixed3(r.scores.recall).c_str(), fixed3(r.scores.precision).c_str(),
                  fixed3(r.scores.f1).c_str(), r.scores.degenerate ? "  (degenerate)" : "");
    text << line;
  }

  std::ostringstream csv;
  csv << "model,recall,precision,f1,tp,fp,fn,best,degenerate\n";
  nlohmann::json j;
  j["provenance"] = nlohmann::json::parse(provenance_json);
  nlohmann::json jr = nlohmann::json::array();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    csv << r.name << ',' << fixed3(r.scores.recall) << ',' << fixed3(r.scores.precision) << ',' << fixed3(r.scores.f1)
        << ',' << r.counts.tp << ',' << r.counts.fp << ',' << r.counts.fn << ',' << (is_best(i) ? 1 : 0) << ','
        << (r.scores.degenerate ? 1 : 0) << '\n';
    jr.push_back({{"model", r.name},
                  {"recall", r.scores.recall},
                  {"precision", r.scores.precision},
                  {"f1", r.scores.f1},
                  {"tp", r.counts.tp},
                  {"fp", r.counts.fp},
                  {"fn", r.counts.fn},
                  {"best", is_best(i)},
                  {"degenerate", r.scores.degenerate}});
  }
  j["rows"] = jr;
  return {text.str(), csv.str(), j.dump(2) + "\n"};
}

std::vector<GroundTruthSpan> read_truth_csv(const std::filesystem::path& path) {
  const csv::Table t = csv::read(path);
  const std::size_t rid = t.column("recording_id"), kid = t.column("keyword_id"), s = t.column("start_s"),
                    e = t.column("end_s");
  std::vector<GroundTruthSpan> out;
  for (const auto& row : t.rows) {
    GroundTruthSpan g{row[rid], csv::to_int(row[kid]), csv::to_double(row[s]), csv::to_double(row[e])};
    if (!(g.start_s < g.end_s)) throw DataError(path.string() + ": truth span with start >= end");
    out.push_back(std::move(g));
  }
  return out;
}

void write_truth_csv(const std::filesystem::path& path, std::span<const GroundTruthSpan> truths,
                     const std::vector<std::string>& comments) {
  csv::Table t;
  t.comments = comments;
  t.header = {"recording_id", "keyword_id", "start_s", "end_s"};
  char a[32], b[32];
  for (const auto& g : truths) {
    std::snprintf(a, sizeof a, "%.6f", g.start_s);
    std::snprintf(b, sizeof b, "%.6f", g.end_s);
    t.rows.push_back({g.recording_id, std::to_string(g.keyword_id), a, b});
  }
  csv::write(path, t);
}

std::vector<Prediction> flatten(std::span<const spotting::RecordingEvents> events) {
  std::vector<Prediction> out;
  for (const auto& rec : events) {
    for (const auto& e : rec.events) out.push_back({rec.recording_id, e.keyword_id, e.start_s, e.end_s, e.score});
  }
  return out;
}

}  // namespace csks::evalkit
