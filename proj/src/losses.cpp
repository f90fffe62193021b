#include "csks/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "csks/error.hpp"

namespace csks::losses {

std::string to_string(DistanceKind kind) { return kind == DistanceKind::squared ? "squared" : "euclidean"; }

DistanceKind distance_kind_from_string(const std::string& name) {
  if (name == "euclidean") return DistanceKind::euclidean;
  if (name == "squared") return DistanceKind::squared;
  throw UsageError("unknown distance '" + name + "'");
}

double distance(std::span<const double> a, std::span<const double> b, DistanceKind kind) {
  if (a.size() != b.size()) throw UsageError("distance: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return kind == DistanceKind::squared ? s : std::sqrt(s);
}

std::span<const double> PrototypeBank::prototype(std::size_t k) const {
  return std::span<const double>(prototypes.data() + k * dim(), dim());
}

std::optional<double> PrototypeBank::threshold_for(std::size_t k) const {
  if (k < class_thresholds.size()) return class_thresholds[k];
  return threshold;
}

PrototypeBank compute_prototypes(std::span<const int> class_ids,
                                 const std::vector<std::vector<std::vector<double>>>& supports,
                                 DistanceKind distance) {
  if (class_ids.size() != supports.size()) throw UsageError("compute_prototypes: class/support count mismatch");
  if (class_ids.empty()) throw UsageError("compute_prototypes: no classes");
  const std::size_t dim = supports.front().empty() ? 0 : supports.front().front().size();
  PrototypeBank bank;
  bank.class_ids.assign(class_ids.begin(), class_ids.end());
  bank.distance = distance;
  bank.prototypes = Tensor({class_ids.size(), dim});
  for (std::size_t k = 0; k < supports.size(); ++k) {
    if (supports[k].empty()) throw UsageError("compute_prototypes: class " + std::to_string(class_ids[k]) + " is empty");
    for (std::size_t c = 0; c < dim; ++c) {
      // Neumaier summation keeps the mean independent of support order in practice.
      double sum = 0.0, comp = 0.0;
      for (const auto& v : supports[k]) {
        if (v.size() != dim) throw UsageError("compute_prototypes: dimension mismatch");
        const double x = v[c];
        const double t = sum + x;
        comp += std::abs(sum) >= std::abs(x) ? (sum - t) + x : (x - t) + sum;
        sum = t;
      }
      bank.prototypes[k * dim + c] = (sum + comp) / static_cast<double>(supports[k].size());
    }
  }
  return bank;
}

std::vector<double> prototype_distances(std::span<const double> query, const PrototypeBank& bank) {
  if (bank.size() == 0) throw UsageError("empty prototype bank");
  if (query.size() != bank.dim()) throw UsageError("query dimension does not match the prototype bank");
  std::vector<double> d(bank.size());
  for (std::size_t k = 0; k < bank.size(); ++k) d[k] = distance(query, bank.prototype(k), bank.distance);
  return d;
}

std::vector<double> class_posteriors(std::span<const double> query, const PrototypeBank& bank) {
  std::vector<double> p = prototype_distances(query, bank);
  const double dmin = *std::min_element(p.begin(), p.end());
  double z = 0.0;
  for (double& v : p) {
    v = std::exp(-(v - dmin));
    z += v;
  }
  for (double& v : p) v /= z;
  return p;
}

void Episode::validate() const {
  if (class_ids.empty()) throw UsageError("episode has no classes");
  if (supports.size() != class_ids.size() || queries.size() != class_ids.size()) {
    throw UsageError("episode support/query lists do not match the class list");
  }
  const std::size_t dim = supports.front()->value.dim(1);
  for (std::size_t k = 0; k < class_ids.size(); ++k) {
    if (supports[k]->value.rank() != 2 || queries[k]->value.rank() != 2) throw UsageError("episode sets must be [n, D]");
    if (supports[k]->value.dim(0) == 0 || queries[k]->value.dim(0) == 0) {
      throw UsageError("every episode class needs at least one support and one query");
    }
    if (supports[k]->value.dim(1) != dim || queries[k]->value.dim(1) != dim) {
      throw UsageError("episode embeddings differ in dimension");
    }
  }
}

ag::Var prototypical_loss(const Episode& episode, DistanceKind distance) {
  episode.validate();
  std::vector<ag::Var> parts;
  std::vector<std::size_t> index;
  std::vector<std::uint8_t> support;
  for (std::size_t k = 0; k < episode.class_ids.size(); ++k) {
    parts.push_back(episode.supports[k]);
    index.insert(index.end(), episode.supports[k]->value.dim(0), k);
    support.insert(support.end(), episode.supports[k]->value.dim(0), 1);
  }
  for (std::size_t k = 0; k < episode.class_ids.size(); ++k) {
    parts.push_back(episode.queries[k]);
    index.insert(index.end(), episode.queries[k]->value.dim(0), k);
    support.insert(support.end(), episode.queries[k]->value.dim(0), 0);
  }
  return prototypical_loss_rows(ag::concat_rows(parts), index, support, episode.class_ids.size(), distance);
}

ag::Var prototypical_loss_rows(const ag::Var& embeddings, std::span<const std::size_t> class_index,
                               std::span<const std::uint8_t> is_support, std::size_t n_classes, DistanceKind distance) {
  const std::size_t n = embeddings->value.dim(0);
  if (class_index.size() != n || is_support.size() != n) throw UsageError("prototypical loss: row metadata mismatch");
  std::vector<double> support_count(n_classes, 0.0);
  std::vector<std::size_t> queries;
  std::vector<std::size_t> targets;
  for (std::size_t i = 0; i < n; ++i) {
    if (class_index[i] >= n_classes) throw UsageError("prototypical loss: class index out of range");
    if (is_support[i]) {
      support_count[class_index[i]] += 1.0;
    } else {
      queries.push_back(i);
      targets.push_back(class_index[i]);
    }
  }
  for (double c : support_count) {
    if (c == 0.0) throw UsageError("prototypical loss: a class has no support rows");
  }
  if (queries.empty()) throw UsageError("prototypical loss: no query rows");
  // Prototypes as an averaging matrix times the embeddings.
  Tensor averaging({n_classes, n});
  for (std::size_t i = 0; i < n; ++i) {
    if (is_support[i]) averaging[class_index[i] * n + i] = 1.0 / support_count[class_index[i]];
  }
  const ag::Var prototypes = ag::matmul(ag::constant(std::move(averaging)), embeddings);
  const ag::Var q = ag::select_rows(embeddings, queries);
  const ag::Var d = ag::pairwise_distance(q, prototypes, distance == DistanceKind::squared);
  return ag::cross_entropy_rows(ag::scale(d, -1.0), targets);
}

ag::Var metric_loss(const ag::Var& anchor, const ag::Var& positives, const ag::Var& negatives, DistanceKind distance) {
  if (anchor->value.rank() != 2 || anchor->value.dim(0) != 1) throw UsageError("metric loss: anchor must be [1, D]");
  if (positives->value.dim(0) == 0) throw UsageError("metric loss: empty positive set");
  if (negatives->value.dim(0) == 0) throw UsageError("metric loss: empty negative set");
  const bool squared = distance == DistanceKind::squared;
  const ag::Var dp = ag::clamp_max(ag::mean(ag::pairwise_distance(anchor, positives, squared)), kDistanceClamp);
  const ag::Var dn = ag::clamp_max(ag::mean(ag::pairwise_distance(anchor, negatives, squared)), kDistanceClamp);
  return ag::sigmoid(ag::sub(dp, dn));
}

ag::Var batch_metric_loss(const ag::Var& embeddings, std::span<const int> labels, int background_label,
                          DistanceKind distance) {
  const std::size_t n = embeddings->value.dim(0);
  if (labels.size() != n) throw UsageError("metric loss: label count mismatch");
  Tensor pos({n, n});
  Tensor neg({n, n});
  Tensor weights({n});
  std::size_t eligible = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t np = 0, nn = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const bool same = labels[i] == labels[j] && labels[i] != background_label;
      if (same) {
        pos[i * n + j] = 1.0;
        ++np;
      } else {
        neg[i * n + j] = 1.0;
        ++nn;
      }
    }
    if (np > 0 && nn > 0) {
      weights[i] = 1.0;
      ++eligible;
    }
  }
  if (eligible == 0) return ag::constant(Tensor({1}, 0.0));
  for (double& w : weights.values()) w /= static_cast<double>(eligible);
  const ag::Var d = ag::pairwise_distance(embeddings, embeddings, distance == DistanceKind::squared);
  const ag::Var dp = ag::clamp_max(ag::masked_row_mean(d, pos), kDistanceClamp);
  const ag::Var dn = ag::clamp_max(ag::masked_row_mean(d, neg), kDistanceClamp);
  return ag::weighted_sum(ag::sigmoid(ag::sub(dp, dn)), weights);
}

ag::Var combined_loss(const ag::Var& embeddings, std::span<const int> labels, std::span<const std::uint8_t> is_support,
                      const CombinedOptions& options) {
  const std::size_t n = embeddings->value.dim(0);
  if (labels.size() != n || is_support.size() != n) throw UsageError("combined loss: row metadata mismatch");
  std::map<int, std::size_t> classes;
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] != options.background_label) classes.emplace(labels[i], 0);
  }
  if (classes.empty()) throw UsageError("combined loss: batch has no keyword items");
  std::size_t next = 0;
  for (auto& [label, index] : classes) index = next++;
  std::vector<std::size_t> class_index;
  std::vector<std::uint8_t> support;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] == options.background_label) continue;
    rows.push_back(i);
    class_index.push_back(classes.at(labels[i]));
    support.push_back(is_support[i]);
  }
  const ag::Var keyword_rows = ag::select_rows(embeddings, rows);
  ag::Var loss = prototypical_loss_rows(keyword_rows, class_index, support, classes.size(), options.distance);
  if (options.lambda != 0.0) {
    const ag::Var metric = batch_metric_loss(embeddings, labels, options.background_label, options.distance);
    loss = ag::add(loss, ag::scale(metric, options.lambda));
  }
  return loss;
}

ag::Var cross_entropy(const ag::Var& logits, std::span<const std::size_t> targets) {
  if (logits->value.rank() != 2) throw UsageError("cross entropy: logits must be [N, C]");
  const std::size_t c = logits->value.dim(1);
  for (std::size_t t : targets) {
    if (t >= c) throw UsageError("cross entropy: class " + std::to_string(t) + " out of range");
  }
  return ag::cross_entropy_rows(logits, targets);
}

}  // namespace csks::losses
