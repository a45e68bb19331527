#pragma once

#include <map>
#include <vector>

#include "d3gzsl/data.hpp"
#include "d3gzsl/error.hpp"

namespace d3gzsl {

// Percentages: U and S are per-class mean top-1 accuracies, H = 2US/(U+S).
struct GzslMetrics {
  double unseen = 0.0;
  double seen = 0.0;
  double harmonic = 0.0;
};

inline double harmonic_mean(double u, double s) { return u + s > 0.0 ? 2.0 * u * s / (u + s) : 0.0; }

inline GzslMetrics gzsl_metrics(double unseen, double seen) { return {unseen, seen, harmonic_mean(unseen, seen)}; }

// Mean over `classes` of the per-class fraction of rows predicted correctly,
// in percent. Classes without rows are skipped.
inline double per_class_accuracy(const std::vector<ClassId>& predicted, const std::vector<ClassId>& truth,
                                 const std::vector<ClassId>& classes) {
  std::map<ClassId, std::pair<std::size_t, std::size_t>> tally;  // class -> (correct, total)
  for (auto c : classes) tally[c] = {0, 0};
  for (std::size_t i = 0; i < truth.size(); ++i) {
    auto it = tally.find(truth[i]);
    if (it == tally.end()) continue;
    ++it->second.second;
    if (predicted[i] == truth[i]) ++it->second.first;
  }
  double sum = 0.0;
  std::size_t present = 0;
  for (const auto& [c, ct] : tally) {
    if (ct.second == 0) continue;
    sum += static_cast<double>(ct.first) / static_cast<double>(ct.second);
    ++present;
  }
  if (present == 0) throw ValidationError("per_class_accuracy: no rows for any of the requested classes");
  return 100.0 * sum / static_cast<double>(present);
}

// U/S/H of predictions for the dataset's test rows (predictions[i] is for test_index[i]).
inline GzslMetrics evaluate_predictions(const GzslDataset& ds, const std::vector<ClassId>& predictions) {
  if (predictions.size() != ds.test_index.size())
    throw ShapeError("evaluate: " + std::to_string(predictions.size()) + " predictions for " +
                     std::to_string(ds.test_index.size()) + " test rows");
  auto truth = labels_of(ds, ds.test_index);
  std::size_t n_seen = 0, n_unseen = 0;
  for (auto y : truth) (ds.is_seen(y) ? n_seen : n_unseen) += 1;
  if (n_seen == 0) throw ValidationError("evaluate: test split has no seen-class rows");
  if (n_unseen == 0) throw ValidationError("evaluate: test split has no unseen-class rows");
  return gzsl_metrics(per_class_accuracy(predictions, truth, ds.unseen_classes),
                      per_class_accuracy(predictions, truth, ds.seen_classes));
}

}  // namespace d3gzsl
