#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "nids_xray/matrix.hpp"

namespace nids_xray {

// The black-box contract every explanation module consumes: labels and
// anomaly scores for a matrix whose columns are feature_names(), in order.
// Implementations must be deterministic and safe for concurrent const calls.
class ModelAdapter {
 public:
  virtual ~ModelAdapter() = default;

  virtual std::string id() const = 0;
  virtual const std::vector<std::string>& feature_names() const = 0;
  // predict(X)[i] == 1 exactly when score(X)[i] > threshold().
  virtual double threshold() const = 0;

  std::vector<double> score(const Matrix& x) const {
    check_width(x);
    return score_rows(x);
  }
  std::vector<int> predict(const Matrix& x) const {
    check_width(x);
    return predict_rows(x);
  }
  std::vector<double> score(const FeatureMatrix& x) const {
    check_names(x.names);
    return score_rows(x.values);
  }
  std::vector<int> predict(const FeatureMatrix& x) const {
    check_names(x.names);
    return predict_rows(x.values);
  }

  void check_names(const std::vector<std::string>& names) const {
    const auto& own = feature_names();
    if (names == own) return;
    std::set<std::string> a(names.begin(), names.end()), b(own.begin(), own.end());
    std::vector<std::string> diff;
    std::set_symmetric_difference(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(diff));
    std::string listed;
    for (const auto& d : diff) listed += (listed.empty() ? "" : ", ") + d;
    if (diff.empty()) listed = "(same names, different order)";
    throw InvalidArgument(str_cat("feature columns do not match model '", id(), "': ", listed));
  }

 protected:
  virtual std::vector<double> score_rows(const Matrix& x) const = 0;
  virtual std::vector<int> predict_rows(const Matrix& x) const {
    const auto s = score_rows(x);
    std::vector<int> out(s.size());
    const double phi = threshold();
    for (std::size_t i = 0; i < s.size(); ++i) out[i] = s[i] > phi ? 1 : 0;
    return out;
  }

 private:
  void check_width(const Matrix& x) const {
    if (x.cols() != feature_names().size()) {
      throw InvalidArgument(str_cat("model '", id(), "' expects ", feature_names().size(), " columns, got ", x.cols()));
    }
  }
};

struct ConfusionCounts {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

struct DetectionMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double accuracy = 0.0;
  // Absent when the ground truth holds a single class.
  std::optional<double> auc;
  ConfusionCounts counts;
};

// Area under the ROC curve as the Mann-Whitney rank statistic, ties
// receiving their average rank.
inline std::optional<double> rank_auc(const std::vector<int>& truth, const std::vector<double>& scores) {
  const std::size_t n = truth.size();
  std::size_t pos = 0;
  for (int t : truth) pos += t == 1 ? 1 : 0;
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) return std::nullopt;
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) {
      if (truth[order[k]] == 1) rank_sum_pos += avg_rank;
    }
    i = j + 1;
  }
  const double p = static_cast<double>(pos), q = static_cast<double>(neg);
  return (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q);
}

// Rows whose truth is neither 0 nor 1 are skipped.
inline DetectionMetrics evaluate(const std::vector<int>& truth, const std::vector<int>& pred,
                                 const std::vector<double>& scores) {
  if (truth.size() != pred.size() || (!scores.empty() && scores.size() != truth.size())) {
    throw InvalidArgument(str_cat("evaluate: length mismatch (truth ", truth.size(), ", pred ", pred.size(),
                                  ", scores ", scores.size(), ")"));
  }
  DetectionMetrics m;
  std::vector<int> t2;
  std::vector<double> s2;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] != 0 && truth[i] != 1) continue;
    const bool p = pred[i] == 1, t = truth[i] == 1;
    if (p && t) ++m.counts.tp;
    else if (p && !t) ++m.counts.fp;
    else if (!p && t) ++m.counts.fn;
    else ++m.counts.tn;
    if (!scores.empty()) {
      t2.push_back(truth[i]);
      s2.push_back(scores[i]);
    }
  }
  const auto& c = m.counts;
  const double tp = static_cast<double>(c.tp);
  m.precision = c.tp + c.fp > 0 ? tp / static_cast<double>(c.tp + c.fp) : 0.0;
  m.recall = c.tp + c.fn > 0 ? tp / static_cast<double>(c.tp + c.fn) : 0.0;
  m.f1 = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  const std::size_t total = c.tp + c.fp + c.tn + c.fn;
  m.accuracy = total > 0 ? static_cast<double>(c.tp + c.tn) / static_cast<double>(total) : 0.0;
  if (!scores.empty()) m.auc = rank_auc(t2, s2);
  return m;
}

}  // namespace nids_xray
