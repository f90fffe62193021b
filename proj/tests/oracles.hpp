#pragma once

// Plain scalar re-derivations of the losses, written without the gradient
// engine, used as test oracles.

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

inline double dist(const Vec& a, const Vec& b, bool squared = false) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return squared ? s : std::sqrt(s);
}

inline Vec mean_of(const Mat& rows) {
  Vec m(rows.front().size(), 0.0);
  for (const auto& r : rows)
    for (std::size_t i = 0; i < r.size(); ++i) m[i] += r[i];
  for (auto& v : m) v /= static_cast<double>(rows.size());
  return m;
}

// -log of the softmax of `scores` at `k`, via log-sum-exp.
inline double neg_log_softmax(const Vec& scores, std::size_t k) {
  const double mx = *std::max_element(scores.begin(), scores.end());
  double s = 0.0;
  for (double v : scores) s += std::exp(v - mx);
  return -(scores[k] - mx - std::log(s));
}

inline Vec softmax(const Vec& scores) {
  const double mx = *std::max_element(scores.begin(), scores.end());
  Vec p(scores.size());
  double s = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) s += p[i] = std::exp(scores[i] - mx);
  for (auto& v : p) v /= s;
  return p;
}

// supports[k], queries[k]: rows of class k.
inline double prototypical(const std::vector<Mat>& supports, const std::vector<Mat>& queries, bool squared = false) {
  std::vector<Vec> protos;
  for (const auto& s : supports) protos.push_back(mean_of(s));
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t k = 0; k < queries.size(); ++k) {
    for (const auto& q : queries[k]) {
      Vec scores;
      for (const auto& c : protos) scores.push_back(-dist(q, c, squared));
      total += neg_log_softmax(scores, k);
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

inline double metric(const Vec& anchor, const Mat& pos, const Mat& neg, bool squared = false) {
  double dp = 0.0, dn = 0.0;
  for (const auto& p : pos) dp += dist(anchor, p, squared);
  for (const auto& n : neg) dn += dist(anchor, n, squared);
  dp = std::min(dp / static_cast<double>(pos.size()), 50.0);
  dn = std::min(dn / static_cast<double>(neg.size()), 50.0);
  return std::exp(dp) / (std::exp(dp) + std::exp(dn));
}

inline double cross_entropy(const Mat& logits, const std::vector<std::size_t>& targets) {
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) s += neg_log_softmax(logits[i], targets[i]);
  return s / static_cast<double>(logits.size());
}

// Prototypes from support keyword rows, queries are the other keyword rows;
// metric term averaged over anchors that have both positives and negatives.
inline double combined(const Mat& emb, const std::vector<int>& labels, const std::vector<int>& support, int background,
                       double lambda, bool squared = false) {
  std::map<int, Mat> sup, qry;
  for (std::size_t i = 0; i < emb.size(); ++i) {
    if (labels[i] == background) continue;
    (support[i] ? sup[labels[i]] : qry[labels[i]]).push_back(emb[i]);
  }
  std::vector<Mat> s, q;
  for (auto& [label, rows] : sup) {
    s.push_back(rows);
    q.push_back(qry.count(label) ? qry[label] : Mat{});
  }
  double loss = prototypical(s, q, squared);
  double m = 0.0;
  std::size_t eligible = 0;
  for (std::size_t i = 0; i < emb.size(); ++i) {
    Mat pos, neg;
    for (std::size_t j = 0; j < emb.size(); ++j) {
      if (j == i) continue;
      if (labels[j] == labels[i] && labels[i] != background) {
        pos.push_back(emb[j]);
      } else {
        neg.push_back(emb[j]);
      }
    }
    if (pos.empty() || neg.empty()) continue;
    m += metric(emb[i], pos, neg, squared);
    ++eligible;
  }
  if (eligible > 0) loss += lambda * m / static_cast<double>(eligible);
  return loss;
}

}  // namespace oracle
