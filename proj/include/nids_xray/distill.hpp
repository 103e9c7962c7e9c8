#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "nids_xray/cart.hpp"
#include "nids_xray/model.hpp"

namespace nids_xray {

struct DistillParams {
  double sample_fraction = 0.3;
  std::size_t iterations = 50;
  double holdout_fraction = 0.3;
  // Size of the feature set compared across iterations for stability.
  std::size_t stability_top_k = 10;
  CartParams cart;
  std::uint64_t seed = 0;
};

struct TrustReport {
  std::string teacher_id;
  double sample_fraction = 0.0;
  std::size_t iterations = 0;
  std::size_t best_iteration = 0;
  std::vector<double> fidelities;
  double fidelity_mean = 0.0;
  double fidelity_std = 0.0;
  // (feature index, share of total impurity decrease) for the best tree.
  std::vector<std::pair<std::size_t, double>> top_features;
  double stability = 0.0;
  // Rows the best tree was scored on.
  std::vector<std::size_t> best_holdout;
};

struct DistillResult {
  TrustReport report;
  SurrogateTree best;
};

// Teacher-student imitation: each iteration fits a CART tree to the
// teacher's labels on a random sample and scores it on a held-out part of
// that sample. The highest-fidelity tree wins.
inline DistillResult distill(const ModelAdapter& teacher, const FeatureMatrix& x, const DistillParams& params) {
  if (params.iterations < 1) throw InvalidArgument("distill: iterations must be >= 1");
  if (params.sample_fraction <= 0.0 || params.sample_fraction > 1.0) {
    throw InvalidArgument(str_cat("distill: sample_fraction must be in (0,1], got ", params.sample_fraction));
  }
  teacher.check_names(x.names);
  const auto sample_size = static_cast<std::size_t>(std::floor(params.sample_fraction * static_cast<double>(x.rows())));
  const auto holdout_size =
      static_cast<std::size_t>(std::floor(params.holdout_fraction * static_cast<double>(sample_size)));
  if (sample_size < 2 || holdout_size < 1 || holdout_size >= sample_size) {
    throw InvalidArgument(str_cat("distill: sample of ", sample_size, " rows is too small to hold out ", holdout_size));
  }
  const std::size_t width = x.cols();

  DistillResult result;
  auto& rep = result.report;
  rep.teacher_id = teacher.id();
  rep.sample_fraction = params.sample_fraction;
  rep.iterations = params.iterations;
  std::vector<std::vector<std::size_t>> top_sets;
  double best_fid = -std::numeric_limits<double>::infinity();
  const Rng base(params.seed);

  for (std::size_t it = 0; it < params.iterations; ++it) {
    Rng rng = base.fork(it);
    const auto sample = rng.sample_without_replacement(x.rows(), sample_size);
    const Matrix xs = x.values.select_rows(sample);
    std::vector<int> labels;
    try {
      labels = teacher.predict(xs);
    } catch (const std::exception& e) {
      throw Error(str_cat("distill: teacher '", teacher.id(), "' failed at iteration ", it, ": ", e.what()));
    }
    const std::size_t train_n = sample_size - holdout_size;
    std::vector<std::size_t> train_idx(train_n), hold_idx(holdout_size);
    for (std::size_t i = 0; i < train_n; ++i) train_idx[i] = i;
    for (std::size_t i = 0; i < holdout_size; ++i) hold_idx[i] = train_n + i;
    const Matrix x_train = xs.select_rows(train_idx);
    const Matrix x_hold = xs.select_rows(hold_idx);
    std::vector<double> y_train(train_n), y_hold(holdout_size);
    for (std::size_t i = 0; i < train_n; ++i) y_train[i] = labels[i];
    for (std::size_t i = 0; i < holdout_size; ++i) y_hold[i] = labels[train_n + i];

    SurrogateTree tree = fit_cart(x_train, y_train, params.cart, x.names);
    tree.fidelity = r_squared(y_hold, tree.predict(x_hold));
    rep.fidelities.push_back(tree.fidelity);
    top_sets.push_back(tree.top_features(params.stability_top_k, width));
    std::sort(top_sets.back().begin(), top_sets.back().end());
    if (tree.fidelity > best_fid) {
      best_fid = tree.fidelity;
      rep.best_iteration = it;
      result.best = std::move(tree);
      rep.best_holdout.assign(sample.begin() + static_cast<std::ptrdiff_t>(train_n), sample.end());
    }
  }

  double sum = 0.0;
  for (double f : rep.fidelities) sum += f;
  rep.fidelity_mean = sum / static_cast<double>(rep.fidelities.size());
  double var = 0.0;
  for (double f : rep.fidelities) var += (f - rep.fidelity_mean) * (f - rep.fidelity_mean);
  rep.fidelity_std = std::sqrt(var / static_cast<double>(rep.fidelities.size()));

  const auto& best_set = top_sets[rep.best_iteration];
  std::size_t same = 0;
  for (const auto& s : top_sets) same += s == best_set ? 1 : 0;
  rep.stability = static_cast<double>(same) / static_cast<double>(top_sets.size());

  const auto imp = result.best.feature_importance(width);
  for (std::size_t f : result.best.top_features(params.stability_top_k, width)) rep.top_features.emplace_back(f, imp[f]);
  return result;
}

}  // namespace nids_xray
