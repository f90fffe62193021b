#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <span>
#include <vector>

#include "csks/autograd.hpp"
#include "csks/tensor.hpp"

namespace csks::losses {

enum class DistanceKind { euclidean, squared };

std::string to_string(DistanceKind kind);
DistanceKind distance_kind_from_string(const std::string& name);

double distance(std::span<const double> a, std::span<const double> b, DistanceKind kind = DistanceKind::euclidean);

// Per-class prototypes (row k of `prototypes` belongs to class_ids[k]) plus the
// background-rejection cutoff used at inference.
struct PrototypeBank {
  std::vector<int> class_ids;
  Tensor prototypes;  // [K, D]
  DistanceKind distance = DistanceKind::euclidean;
  // Global nearest-distance cutoff; absent means no rejection.
  std::optional<double> threshold;
  // Optional per-class cutoffs, indexed like class_ids; override `threshold`.
  std::vector<double> class_thresholds;

  std::size_t size() const { return class_ids.size(); }
  std::size_t dim() const { return prototypes.rank() == 2 ? prototypes.dim(1) : 0; }
  std::span<const double> prototype(std::size_t k) const;
  std::optional<double> threshold_for(std::size_t k) const;
};

// c_k = mean of the support vectors of class k.
PrototypeBank compute_prototypes(std::span<const int> class_ids,
                                 const std::vector<std::vector<std::vector<double>>>& supports,
                                 DistanceKind distance = DistanceKind::euclidean);

std::vector<double> prototype_distances(std::span<const double> query, const PrototypeBank& bank);
// softmax(-d(query, c_k)) over the bank.
std::vector<double> class_posteriors(std::span<const double> query, const PrototypeBank& bank);

// Support and query embeddings per class; supports[k] and queries[k] are [n, D].
struct Episode {
  std::vector<int> class_ids;
  std::vector<ag::Var> supports;
  std::vector<ag::Var> queries;
  void validate() const;
};

// Mean over all queries of -log softmax(-d(q, c))[true class], prototypes from supports.
ag::Var prototypical_loss(const Episode& episode, DistanceKind distance = DistanceKind::euclidean);

// Row form: rows flagged in `is_support` build the prototypes of their class
// (class_index[i] in [0, n_classes)); the remaining rows are queries.
ag::Var prototypical_loss_rows(const ag::Var& embeddings, std::span<const std::size_t> class_index,
                               std::span<const std::uint8_t> is_support, std::size_t n_classes,
                               DistanceKind distance = DistanceKind::euclidean);

inline constexpr double kDistanceClamp = 50.0;

// e^{avg d+} / (e^{avg d+} + e^{avg d-}) = logistic(avg d+ - avg d-), averages clamped at 50.
// anchor is [1, D]; positives [P, D]; negatives [N, D].
ag::Var metric_loss(const ag::Var& anchor, const ag::Var& positives, const ag::Var& negatives,
                    DistanceKind distance = DistanceKind::euclidean);

struct CombinedOptions {
  double lambda = 1.0;
  int background_label = -1;
  DistanceKind distance = DistanceKind::euclidean;
};

// Prototypical term over keyword rows (background excluded from prototypes)
// plus lambda * mean metric term. For anchor i, c+ is every other row with the
// same keyword label and c- every row with a different label; background rows
// count as a different class for everyone, so background anchors have an
// empty c+ and contribute only as negatives. Anchors with empty c+ or c- are
// left out of the mean.
ag::Var combined_loss(const ag::Var& embeddings, std::span<const int> labels, std::span<const std::uint8_t> is_support,
                      const CombinedOptions& options);
// The metric part alone (mean over eligible anchors); zero if none is eligible.
ag::Var batch_metric_loss(const ag::Var& embeddings, std::span<const int> labels, int background_label,
                          DistanceKind distance = DistanceKind::euclidean);

// Mean over rows of -log softmax(logits)[target].
ag::Var cross_entropy(const ag::Var& logits, std::span<const std::size_t> targets);

}  // namespace csks::losses
