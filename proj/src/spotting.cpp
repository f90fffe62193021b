#include "csks/spotting.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>

#include <json.hpp>

#include "csks/csv.hpp"
#include "csks/error.hpp"

namespace csks::spotting {

std::string to_string(DecisionRule rule) {
  switch (rule) {
    case DecisionRule::head_argmax: return "head_argmax";
    case DecisionRule::nearest_prototype: return "nearest_prototype";
    case DecisionRule::thresholded_prototype: return "thresholded_prototype";
  }
  return "thresholded_prototype";
}

DecisionRule decision_rule_from_string(const std::string& name) {
  if (name == "head_argmax") return DecisionRule::head_argmax;
  if (name == "nearest_prototype") return DecisionRule::nearest_prototype;
  if (name == "thresholded_prototype") return DecisionRule::thresholded_prototype;
  throw UsageError("unknown decision rule '" + name + "'");
}

void SpotConfig::validate() const {
  if (!(window_s > 0.0)) throw UsageError("window_s must be positive");
  if (!(stride_s > 0.0 && stride_s <= window_s)) throw UsageError("stride_s must be in (0, window_s]");
  if (batch == 0) throw UsageError("spot batch must be positive");
}

Decision decide_logits(std::span<const double> logits, int background_label) {
  if (logits.empty()) throw UsageError("empty logits");
  const std::size_t best = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - logits[best]);
  Decision d;
  d.score = 1.0 / z;
  if (static_cast<int>(best) != background_label) d.keyword_id = static_cast<int>(best);
  return d;
}

Decision decide_embedding(std::span<const double> embedding, const losses::PrototypeBank& bank, DecisionRule rule,
                          int background_label) {
  const std::vector<double> dist = losses::prototype_distances(embedding, bank);
  std::size_t best = bank.size();
  for (std::size_t k = 0; k < bank.size(); ++k) {
    if (rule == DecisionRule::thresholded_prototype && bank.class_ids[k] == background_label) continue;
    if (best == bank.size() || dist[k] < dist[best]) best = k;
  }
  Decision d;
  if (best == bank.size()) return d;
  d.distance = dist[best];
  d.score = -dist[best];
  const int label = bank.class_ids[best];
  if (label == background_label) return d;
  if (rule == DecisionRule::thresholded_prototype) {
    const auto tau = bank.threshold_for(best);
    if (tau && d.distance > *tau) return d;
  }
  d.keyword_id = label;
  return d;
}

std::vector<Decision> decide_all(const Model& model, const losses::PrototypeBank* bank, DecisionRule rule,
                                 std::span<const FeatureMatrix* const> inputs, int background_label,
                                 std::size_t chunk) {
  std::vector<Decision> out;
  out.reserve(inputs.size());
  if (inputs.empty()) return out;
  if (rule == DecisionRule::head_argmax) {
    const Tensor logits = model.logits_all(inputs, chunk);
    const std::size_t c = logits.dim(1);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      out.push_back(decide_logits(std::span<const double>(logits.data() + i * c, c), background_label));
    }
    return out;
  }
  if (bank == nullptr) throw UsageError("prototype decision rules need a prototype bank");
  const Tensor emb = model.embed_all(inputs, chunk);
  const std::size_t e = emb.dim(1);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    out.push_back(decide_embedding(std::span<const double>(emb.data() + i * e, e), *bank, rule, background_label));
  }
  return out;
}

losses::PrototypeBank build_inference_bank(const Model& model, std::span<const LabeledFeatures> segments,
                                           int n_keywords, bool include_background, losses::DistanceKind distance) {
  const int n_classes = n_keywords + (include_background ? 1 : 0);
  std::vector<const FeatureMatrix*> inputs;
  for (const auto& s : segments) inputs.push_back(&s.features);
  const Tensor emb = model.embed_all(inputs);
  const std::size_t e = model.config().embedding_dim;
  std::vector<std::vector<std::vector<double>>> supports(static_cast<std::size_t>(n_classes));
  for (std::size_t i = 0; i < segments.size(); ++i) {
    const int label = segments[i].label;
    if (label < 0 || label >= n_classes) continue;
    supports[static_cast<std::size_t>(label)].emplace_back(emb.data() + i * e, emb.data() + (i + 1) * e);
  }
  std::vector<int> ids(static_cast<std::size_t>(n_classes));
  std::iota(ids.begin(), ids.end(), 0);
  for (int k = 0; k < n_classes; ++k) {
    if (supports[static_cast<std::size_t>(k)].empty()) {
      throw DataError("no segments for class " + std::to_string(k) + " when building the prototype bank");
    }
  }
  return losses::compute_prototypes(ids, supports, distance);
}

double SegmentCounts::f1() const {
  const double denom = 2.0 * static_cast<double>(tp) + static_cast<double>(fp) + static_cast<double>(fn);
  return denom == 0.0 ? 0.0 : 2.0 * static_cast<double>(tp) / denom;
}

SegmentCounts segment_counts(std::span<const Decision> decisions, std::span<const int> labels, int background_label) {
  if (decisions.size() != labels.size()) throw UsageError("segment_counts: size mismatch");
  SegmentCounts c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool keyword = labels[i] != background_label;
    const bool correct = keyword && decisions[i].keyword_id == labels[i];
    if (correct) {
      ++c.tp;
      continue;
    }
    if (decisions[i].keyword_id >= 0) ++c.fp;
    if (keyword) ++c.fn;
  }
  return c;
}

double calibrate_threshold(std::span<const double> distances, std::span<const Outcome> outcomes) {
  if (distances.empty()) throw UsageError("calibration needs at least one validation item");
  if (distances.size() != outcomes.size()) throw UsageError("calibration: size mismatch");
  std::vector<std::size_t> order(distances.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return distances[a] < distances[b]; });
  std::size_t n_keyword = 0;
  for (Outcome o : outcomes) n_keyword += o != Outcome::background;

  // Only cut between distinct values, so ties are accepted or rejected together.
  double best_f1 = -1.0;
  std::size_t best_m = 0;
  std::size_t tp = 0;
  for (std::size_t m = 0; m <= order.size(); ++m) {
    if (m > 0) tp += outcomes[order[m - 1]] == Outcome::correct;
    const bool cut_ok = m == 0 || m == order.size() || distances[order[m - 1]] < distances[order[m]];
    if (!cut_ok) continue;
    const double denom = static_cast<double>(m + n_keyword);
    const double f1 = denom == 0.0 ? 0.0 : 2.0 * static_cast<double>(tp) / denom;
    if (f1 > best_f1) {
      best_f1 = f1;
      best_m = m;
    }
  }
  const double lo = distances[order.front()];
  const double hi = distances[order.back()];
  if (best_m == 0) return lo - 1e-6 > 0.0 ? lo - 1e-6 : lo * 0.5 + std::numeric_limits<double>::min();
  if (best_m == order.size()) return hi + 1e-6;
  return 0.5 * (distances[order[best_m - 1]] + distances[order[best_m]]);
}

double calibrate_threshold(const Model& model, losses::PrototypeBank& bank, std::span<const LabeledFeatures> validation,
                           int n_keywords, bool per_class) {
  if (validation.empty()) throw UsageError("calibration needs a non-empty validation set");
  std::vector<const FeatureMatrix*> inputs;
  for (const auto& v : validation) inputs.push_back(&v.features);
  const Tensor emb = model.embed_all(inputs);
  const std::size_t e = emb.dim(1);
  std::vector<double> distances;
  std::vector<Outcome> outcomes;
  std::vector<std::size_t> nearest;
  for (std::size_t i = 0; i < validation.size(); ++i) {
    const auto d = losses::prototype_distances(std::span<const double>(emb.data() + i * e, e), bank);
    std::size_t best = bank.size();
    for (std::size_t k = 0; k < bank.size(); ++k) {
      if (bank.class_ids[k] == n_keywords) continue;
      if (best == bank.size() || d[k] < d[best]) best = k;
    }
    if (best == bank.size()) throw UsageError("calibration: bank has no keyword prototypes");
    const int label = validation[i].label;
    distances.push_back(d[best]);
    nearest.push_back(best);
    outcomes.push_back(label == n_keywords                ? Outcome::background
                       : label == bank.class_ids[best] ? Outcome::correct
                                                          : Outcome::wrong_keyword);
  }
  const double tau = calibrate_threshold(distances, outcomes);
  bank.threshold = tau;
  bank.class_thresholds.clear();
  if (per_class) {
    bank.class_thresholds.assign(bank.size(), tau);
    for (std::size_t k = 0; k < bank.size(); ++k) {
      std::vector<double> dk;
      std::vector<Outcome> ok;
      for (std::size_t i = 0; i < distances.size(); ++i) {
        if (nearest[i] != k) continue;
        dk.push_back(distances[i]);
        ok.push_back(outcomes[i]);
      }
      if (!dk.empty()) bank.class_thresholds[k] = calibrate_threshold(dk, ok);
    }
  }
  return tau;
}

std::vector<DetectionEvent> merge_hits(std::span<const RawHit> hits, double merge_gap) {
  for (std::size_t i = 1; i < hits.size(); ++i) {
    if (hits[i].start_s < hits[i - 1].start_s) throw UsageError("merge_hits: hits must be sorted by start");
  }
  std::map<int, DetectionEvent> open;
  std::vector<DetectionEvent> out;
  for (const RawHit& h : hits) {
    auto it = open.find(h.keyword_id);
    if (it != open.end() && h.start_s - it->second.end_s <= merge_gap) {
      it->second.end_s = std::max(it->second.end_s, h.end_s);
      it->second.score = std::max(it->second.score, h.score);
      continue;
    }
    if (it != open.end()) out.push_back(it->second);
    open[h.keyword_id] = DetectionEvent{h.keyword_id, h.start_s, h.end_s, h.score};
  }
  for (const auto& [k, e] : open) out.push_back(e);
  std::stable_sort(out.begin(), out.end(), [](const DetectionEvent& a, const DetectionEvent& b) {
    return a.start_s != b.start_s ? a.start_s < b.start_s : a.keyword_id < b.keyword_id;
  });
  return out;
}

std::vector<double> window_starts(double duration_s, double window_s, double stride_s) {
  std::vector<double> starts;
  // Small slack so exact multiples are not lost to rounding.
  for (std::size_t i = 0;; ++i) {
    const double s = static_cast<double>(i) * stride_s;
    if (s + window_s > duration_s + 1e-9) break;
    starts.push_back(s);
  }
  return starts;
}

std::vector<RawHit> raw_hits(const Model& model, const losses::PrototypeBank* bank, const AudioClip& recording,
                             const SpotConfig& config, int n_keywords) {
  config.validate();
  if (recording.duration() + 1e-9 < config.window_s) throw UsageError("recording is shorter than one window");
  const std::size_t window = static_cast<std::size_t>(std::lround(config.window_s * recording.sample_rate));
  const std::vector<double> starts = window_starts(recording.duration(), config.window_s, config.stride_s);
  std::vector<RawHit> hits;
  for (std::size_t first = 0; first < starts.size(); first += config.batch) {
    const std::size_t n = std::min(config.batch, starts.size() - first);
    std::vector<FeatureMatrix> feats(n);
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t offset = static_cast<std::size_t>(std::lround(starts[first + i] * recording.sample_rate));
      AudioClip piece;
      piece.sample_rate = recording.sample_rate;
      const std::size_t end = std::min(recording.samples.size(), offset + window);
      piece.samples.assign(recording.samples.begin() + static_cast<std::ptrdiff_t>(offset),
                           recording.samples.begin() + static_cast<std::ptrdiff_t>(end));
      piece.samples.resize(window, 0.0);
      feats[i] = dsp::extract_features(piece, config.features);
    }
    std::vector<const FeatureMatrix*> ptrs;
    for (const auto& f : feats) ptrs.push_back(&f);
    const auto decisions = decide_all(model, bank, config.rule, ptrs, n_keywords, config.batch);
    for (std::size_t i = 0; i < n; ++i) {
      if (decisions[i].keyword_id < 0) continue;
      const double s = starts[first + i];
      hits.push_back({s, std::min(s + config.window_s, recording.duration()), decisions[i].keyword_id,
                      decisions[i].score});
    }
  }
  return hits;
}

std::vector<DetectionEvent> spot(const Model& model, const losses::PrototypeBank* bank, const AudioClip& recording,
                                 const SpotConfig& config, int n_keywords) {
  const auto hits = raw_hits(model, bank, recording, config, n_keywords);
  return merge_hits(hits, config.merge_gap());
}

void save_bank(const std::filesystem::path& path, const BankFile& file, const std::string& provenance_json) {
  nlohmann::json j;
  j["provenance"] = nlohmann::json::parse(provenance_json);
  j["rule"] = to_string(file.rule);
  j["n_keywords"] = file.n_keywords;
  j["distance"] = losses::to_string(file.bank.distance);
  j["class_ids"] = file.bank.class_ids;
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t k = 0; k < file.bank.size(); ++k) {
    const auto p = file.bank.prototype(k);
    rows.push_back(std::vector<double>(p.begin(), p.end()));
  }
  j["prototypes"] = rows;
  j["threshold"] = file.bank.threshold ? nlohmann::json(*file.bank.threshold) : nlohmann::json(nullptr);
  j["class_thresholds"] = file.bank.class_thresholds;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

BankFile load_bank(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open prototype bank " + path.string());
  BankFile file;
  try {
    const auto j = nlohmann::json::parse(in);
    file.rule = decision_rule_from_string(j.at("rule").get<std::string>());
    file.n_keywords = j.at("n_keywords").get<int>();
    file.bank.distance = losses::distance_kind_from_string(j.value("distance", std::string("euclidean")));
    file.bank.class_ids = j.at("class_ids").get<std::vector<int>>();
    const auto rows = j.at("prototypes").get<std::vector<std::vector<double>>>();
    if (rows.size() != file.bank.class_ids.size()) throw DataError(path.string() + ": prototype count mismatch");
    const std::size_t dim = rows.empty() ? 0 : rows.front().size();
    std::vector<double> flat;
    for (const auto& r : rows) {
      if (r.size() != dim) throw DataError(path.string() + ": ragged prototypes");
      flat.insert(flat.end(), r.begin(), r.end());
    }
    file.bank.prototypes = Tensor({rows.size(), dim}, std::move(flat));
    if (!j.at("threshold").is_null()) file.bank.threshold = j.at("threshold").get<double>();
    file.bank.class_thresholds = j.value("class_thresholds", std::vector<double>{});
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": malformed prototype bank: " + e.what());
  }
  return file;
}

void write_events_csv(const std::filesystem::path& path, std::span<const RecordingEvents> events,
                      const std::vector<std::string>& comments) {
  csv::Table t;
  t.comments = comments;
  t.header = {"recording_id", "keyword_id", "start_s", "end_s", "score"};
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  for (const auto& rec : events) {
    for (const auto& e : rec.events) {
      t.rows.push_back({rec.recording_id, std::to_string(e.keyword_id), num(e.start_s), num(e.end_s), num(e.score)});
    }
  }
  csv::write(path, t);
}

void write_events_json(const std::filesystem::path& path, std::span<const RecordingEvents> events,
                       const std::string& provenance_json) {
  nlohmann::json j;
  j["provenance"] = nlohmann::json::parse(provenance_json);
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& rec : events) {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& e : rec.events) {
      list.push_back({{"keyword_id", e.keyword_id}, {"start_s", e.start_s}, {"end_s", e.end_s}, {"score", e.score}});
    }
    recs.push_back({{"recording_id", rec.recording_id}, {"events", list}});
  }
  j["recordings"] = recs;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

std::vector<RecordingEvents> read_events_csv(const std::filesystem::path& path) {
  const csv::Table t = csv::read(path);
  const std::size_t rid = t.column("recording_id"), kid = t.column("keyword_id"), s = t.column("start_s"),
                    e = t.column("end_s"), sc = t.column("score");
  std::vector<RecordingEvents> out;
  std::map<std::string, std::size_t> index;
  for (const auto& row : t.rows) {
    auto [it, inserted] = index.emplace(row[rid], out.size());
    if (inserted) out.push_back({row[rid], {}});
    out[it->second].events.push_back(
        {csv::to_int(row[kid]), csv::to_double(row[s]), csv::to_double(row[e]), csv::to_double(row[sc])});
  }
  return out;
}

}  // namespace csks::spotting
