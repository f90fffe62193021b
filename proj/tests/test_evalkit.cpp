#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <functional>
#include <random>

#include "csks/error.hpp"
#include "csks/evalkit.hpp"

using namespace csks;
using namespace csks::evalkit;

namespace {

// Maximum one-to-one matching by exhaustive search.
std::size_t max_matching(std::span<const Prediction> p, std::span<const GroundTruthSpan> t, const MatchOptions& o) {
  std::vector<bool> used(t.size(), false);
  std::function<std::size_t(std::size_t)> go = [&](std::size_t i) -> std::size_t {
    if (i == p.size()) return 0;
    std::size_t best = go(i + 1);
    for (std::size_t j = 0; j < t.size(); ++j) {
      if (used[j] || !intervals_match(p[i], t[j], o)) continue;
      used[j] = true;
      best = std::max(best, 1 + go(i + 1));
      used[j] = false;
    }
    return best;
  };
  return go(0);
}

}  // namespace

TEST_CASE("interval arithmetic") {
  CHECK(overlap(0, 2, 1, 3) == 1.0);
  CHECK(overlap(0, 1, 1, 2) == 0.0);
  CHECK(iou(0, 2, 1, 3) == doctest::Approx(1.0 / 3.0));
  CHECK(iou(0, 2, 0, 2) == 1.0);
  const Prediction p{"r", 1, 0.0, 2.0, 0.0};
  CHECK(intervals_match(p, {"r", 1, 1.9, 2.5}, {}));
  CHECK_FALSE(intervals_match(p, {"r", 2, 1.0, 1.5}, {}));
  CHECK_FALSE(intervals_match(p, {"q", 1, 1.0, 1.5}, {}));
  CHECK_FALSE(intervals_match(p, {"r", 1, 1.9, 2.5}, {MatchRule::iou, 0.5}));
}

TEST_CASE("hand-worked matching: duplicates become false positives") {
  const std::vector<GroundTruthSpan> t{{"r", 0, 1.0, 1.8}, {"r", 1, 5.0, 5.7}};
  const std::vector<Prediction> p{{"r", 0, 0.5, 2.5, -0.1},
                                  {"r", 0, 1.5, 3.0, -0.5},
                                  {"r", 2, 4.8, 6.0, -0.2},
                                  {"r", 1, 9.0, 10.0, -0.3}};
  const auto m = match_events(p, t);
  CHECK(m.pooled == Counts{1, 3, 1});
  CHECK(m.assignment == std::vector<long>{0, -1, -1, -1});
  CHECK(m.per_keyword.at(0) == Counts{1, 1, 0});
  CHECK(m.per_keyword.at(1) == Counts{0, 1, 1});
  CHECK(m.per_keyword.at(2) == Counts{0, 1, 0});
}

TEST_CASE("greedy matching is one-to-one, consistent and optimal when predictions touch at most one truth") {
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> start(0.0, 20.0), len(0.3, 2.5), score(-3.0, 0.0);
  std::uniform_int_distribution<int> kw(0, 2), rec(0, 1), cnt(0, 7);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<GroundTruthSpan> t;
    std::vector<Prediction> p;
    for (int i = cnt(rng); i > 0; --i) {
      const double s = start(rng);
      t.push_back({"r" + std::to_string(rec(rng)), kw(rng), s, s + len(rng)});
    }
    for (int i = cnt(rng); i > 0; --i) {
      const double s = start(rng);
      p.push_back({"r" + std::to_string(rec(rng)), kw(rng), s, s + len(rng), score(rng)});
    }
    const MatchOptions opt = trial % 2 ? MatchOptions{} : MatchOptions{MatchRule::iou, 0.3};
    const auto m = match_events(p, t, opt);
    CHECK(m.pooled.tp + m.pooled.fp == p.size());
    CHECK(m.pooled.tp + m.pooled.fn == t.size());
    Counts sum;
    for (const auto& [k, c] : m.per_keyword) sum += c;
    CHECK(sum == m.pooled);
    std::vector<int> hits(t.size(), 0);
    std::size_t tp = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (m.assignment[i] < 0) continue;
      const auto j = static_cast<std::size_t>(m.assignment[i]);
      CHECK(intervals_match(p[i], t[j], opt));
      ++hits[j];
      ++tp;
    }
    for (int h : hits) CHECK(h <= 1);
    CHECK(tp == m.pooled.tp);
    const std::size_t best = max_matching(p, t, opt);
    CHECK(m.pooled.tp <= best);
    bool simple = true;
    for (const auto& pi : p) {
      int touching = 0;
      for (const auto& tj : t) touching += intervals_match(pi, tj, opt) ? 1 : 0;
      simple = simple && touching <= 1;
    }
    if (simple) CHECK(m.pooled.tp == best);
  }
}

TEST_CASE("scores: F1 equals the harmonic mean and the counts form") {
  std::mt19937_64 rng(42);
  std::uniform_int_distribution<std::size_t> n(0, 30);
  for (int trial = 0; trial < 500; ++trial) {
    const Counts c{n(rng), n(rng), n(rng)};
    const Scores s = precision_recall_f1(c);
    const double denom = 2.0 * c.tp + c.fp + c.fn;
    CHECK(s.f1 == doctest::Approx(denom == 0 ? 0.0 : 2.0 * c.tp / denom));
    CHECK(s.f1 == doctest::Approx(f1_from(s.precision, s.recall)));
    CHECK(s.degenerate == (c.tp + c.fp == 0 || c.tp + c.fn == 0));
  }
  const Scores none = precision_recall_f1({0, 0, 0});
  CHECK(none.f1 == 0.0);
  CHECK(none.degenerate);
  CHECK(f1_from(0.0, 0.0) == 0.0);
}

TEST_CASE("macro averaging is the unweighted mean over keywords") {
  MatchResult m;
  m.per_keyword[0] = {3, 1, 0};
  m.per_keyword[1] = {1, 0, 3};
  m.pooled = {4, 1, 3};
  const Scores macro = average_scores(m, Averaging::macro);
  CHECK(macro.precision == doctest::Approx((0.75 + 1.0) / 2));
  CHECK(macro.recall == doctest::Approx((1.0 + 0.25) / 2));
  CHECK(macro.f1 == doctest::Approx((6.0 / 7.0 + 0.4) / 2));
  const Scores micro = average_scores(m, Averaging::micro);
  CHECK(micro.f1 == doctest::Approx(8.0 / 12.0));
}

TEST_CASE("report marks every row tied for the best rounded F1") {
  std::vector<ReportRow> rows{{"a", {0.5, 0.5, 0.6004, false}, {}},
                              {"b", {0.5, 0.5, 0.5996, false}, {}},
                              {"c", {0.5, 0.5, 0.3, false}, {}}};
  CHECK(best_rows(rows) == std::vector<std::size_t>{0, 1});
  const auto r = render_report(rows, R"({"seed":1})");
  CHECK(r.text.find("* a") != std::string::npos);
  CHECK(r.text.find("* b") != std::string::npos);
  CHECK(r.text.find("  c") != std::string::npos);
  CHECK(r.text.find("0.600") != std::string::npos);
  CHECK(r.csv.rfind("model,recall,precision,f1", 0) == 0);
  CHECK(r.json.find("\"seed\"") != std::string::npos);
  CHECK_THROWS_AS(render_report(std::vector<ReportRow>{}), UsageError);
}

TEST_CASE("truth CSV round trip and malformed input") {
  const auto dir = std::filesystem::temp_directory_path() / "csks_test_eval";
  std::filesystem::create_directories(dir);
  const std::vector<GroundTruthSpan> t{{"rec0", 3, 1.25, 2.0}, {"rec1", 0, 0.5, 1.0}};
  write_truth_csv(dir / "truth.csv", t, {"seed=1"});
  const auto back = read_truth_csv(dir / "truth.csv");
  REQUIRE(back.size() == 2);
  CHECK(back[0].recording_id == "rec0");
  CHECK(back[0].keyword_id == 3);
  CHECK(back[0].start_s == 1.25);
  std::ofstream(dir / "bad.csv") << "recording_id,keyword_id,start_s,end_s\nrec0,x,1,2\n";
  CHECK_THROWS_AS(read_truth_csv(dir / "bad.csv"), DataError);
  CHECK_THROWS_AS(read_truth_csv(dir / "missing.csv"), DataError);
}
