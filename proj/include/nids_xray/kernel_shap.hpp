#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nids_xray/matrix.hpp"
#include "nids_xray/model.hpp"

namespace nids_xray {

// Maps a batch of rows to one model output per row.
using BatchModel = std::function<std::vector<double>(const Matrix&)>;

inline BatchModel score_function(const ModelAdapter& model) {
  return [&model](const Matrix& x) { return model.score(x); };
}

inline BatchModel label_function(const ModelAdapter& model) {
  return [&model](const Matrix& x) {
    const auto labels = model.predict(x);
    return std::vector<double>(labels.begin(), labels.end());
  };
}

inline double binomial(std::size_t n, std::size_t k) {
  if (k > n) return 0.0;
  k = std::min(k, n - k);
  double r = 1.0;
  for (std::size_t i = 1; i <= k; ++i) r = r * static_cast<double>(n - k + i) / static_cast<double>(i);
  return r > 1e15 ? r : std::round(r);
}

// Shapley kernel (M-1) / (C(M,s) s (M-s)). The empty and full coalitions
// have infinite weight; they are enforced as constraints, so std::nullopt.
inline std::optional<double> shapley_kernel_weight(std::size_t m, std::size_t s) {
  if (m < 2 || s == 0 || s >= m) return std::nullopt;
  return static_cast<double>(m - 1) /
         (binomial(m, s) * static_cast<double>(s) * static_cast<double>(m - s));
}

struct ShapParams {
  // Coalition budget per explained row; nullopt enumerates every coalition.
  std::optional<std::size_t> budget = 2048;
  std::uint64_t seed = 0;
  // Model rows evaluated per batch call.
  std::size_t batch_rows = 1 << 15;
};

struct ShapResult {
  std::vector<std::string> feature_names;
  Matrix values;  // rows x M attributions
  double base_value = 0.0;
  std::vector<double> outputs;  // model output on each explained row
  std::vector<double> mean_abs;
  std::vector<std::size_t> ranking;
  std::size_t background_size = 0;
  std::size_t coalitions = 0;
  // Set when some row's regression was rank deficient and the smallest-norm
  // solution was used.
  bool singular = false;
};

// Features by decreasing mean |phi|, ties by index.
inline std::vector<std::size_t> rank_by_mean_abs(const std::vector<double>& mean_abs) {
  std::vector<std::size_t> order(mean_abs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return mean_abs[a] > mean_abs[b]; });
  return order;
}

namespace detail {

struct Coalitions {
  std::vector<std::vector<std::uint8_t>> masks;
  std::vector<double> weights;
};

inline Coalitions enumerate_all(std::size_t m) {
  Coalitions c;
  const std::uint64_t total = std::uint64_t{1} << m;
  for (std::uint64_t bits = 1; bits + 1 < total; ++bits) {
    std::vector<std::uint8_t> mask(m);
    std::size_t s = 0;
    for (std::size_t j = 0; j < m; ++j) {
      mask[j] = (bits >> j) & 1u;
      s += mask[j];
    }
    c.masks.push_back(std::move(mask));
    c.weights.push_back(*shapley_kernel_weight(m, s));
  }
  return c;
}

inline void for_each_subset(std::size_t m, std::size_t s, const std::function<void(const std::vector<std::size_t>&)>& fn) {
  std::vector<std::size_t> idx(s);
  for (std::size_t i = 0; i < s; ++i) idx[i] = i;
  while (true) {
    fn(idx);
    std::ptrdiff_t i = static_cast<std::ptrdiff_t>(s) - 1;
    while (i >= 0 && idx[static_cast<std::size_t>(i)] == m - s + static_cast<std::size_t>(i)) --i;
    if (i < 0) return;
    ++idx[static_cast<std::size_t>(i)];
    for (std::size_t k = static_cast<std::size_t>(i) + 1; k < s; ++k) idx[k] = idx[k - 1] + 1;
  }
}

// Budgeted coalition design: subset sizes whose every coalition fits in the
// budget are enumerated with exact kernel mass; the rest are drawn by size in
// proportion to the remaining kernel mass, each mask paired with its
// complement, and reweighted to carry exactly that remaining mass.
inline Coalitions sample_coalitions(std::size_t m, std::size_t budget, Rng& rng) {
  Coalitions c;
  // Sizes 1..ceil((M-1)/2); complements cover the larger sizes.
  const std::size_t n_sizes = m / 2;
  const std::size_t n_paired = (m - 1) / 2;
  std::vector<double> size_weight(n_sizes + 1, 0.0);
  for (std::size_t s = 1; s <= n_sizes; ++s) {
    size_weight[s] = static_cast<double>(m - 1) / (static_cast<double>(s) * static_cast<double>(m - s));
    if (s <= n_paired) size_weight[s] *= 2.0;
  }
  double total = 0.0;
  for (double w : size_weight) total += w;
  for (double& w : size_weight) w /= total;

  std::vector<double> remaining_weight = size_weight;
  double left = static_cast<double>(budget);
  std::size_t full = 0;
  for (std::size_t s = 1; s <= n_sizes; ++s) {
    const bool paired = s <= n_paired;
    const double nsubsets = binomial(m, s) * (paired ? 2.0 : 1.0);
    if (left * remaining_weight[s] / nsubsets < 1.0 - 1e-8) break;
    ++full;
    left -= nsubsets;
    if (remaining_weight[s] < 1.0) {
      const double scale = 1.0 - remaining_weight[s];
      for (std::size_t r = s + 1; r <= n_sizes; ++r) remaining_weight[r] /= scale;
    }
    double w = size_weight[s] / binomial(m, s);
    if (paired) w /= 2.0;
    for_each_subset(m, s, [&](const std::vector<std::size_t>& idx) {
      std::vector<std::uint8_t> mask(m, 0);
      for (std::size_t j : idx) mask[j] = 1;
      c.masks.push_back(mask);
      c.weights.push_back(w);
      if (paired) {
        for (auto& b : mask) b ^= 1u;
        c.masks.push_back(std::move(mask));
        c.weights.push_back(w);
      }
    });
  }
  const std::size_t fixed = c.masks.size();
  if (full == n_sizes || left < 1.0) return c;

  double weight_left = 0.0;
  for (std::size_t s = full + 1; s <= n_sizes; ++s) weight_left += size_weight[s];
  std::vector<double> cdf;
  double acc = 0.0;
  for (std::size_t s = full + 1; s <= n_sizes; ++s) {
    acc += size_weight[s] / weight_left;
    cdf.push_back(acc);
  }
  std::map<std::vector<std::uint8_t>, std::size_t> seen;
  auto add = [&](std::vector<std::uint8_t> mask) {
    auto [it, inserted] = seen.emplace(mask, c.masks.size());
    if (inserted) {
      c.masks.push_back(std::move(mask));
      c.weights.push_back(1.0);
    } else {
      c.weights[it->second] += 1.0;
    }
  };
  auto samples_left = static_cast<std::size_t>(left);
  std::size_t draws = 0;
  const std::size_t max_draws = samples_left * 4;
  while (c.masks.size() - fixed < samples_left && draws < max_draws) {
    ++draws;
    const double u = rng.uniform();
    std::size_t k = 0;
    while (k + 1 < cdf.size() && u >= cdf[k]) ++k;
    const std::size_t s = full + 1 + k;
    const auto chosen = rng.sample_without_replacement(m, s);
    std::vector<std::uint8_t> mask(m, 0);
    for (std::size_t j : chosen) mask[j] = 1;
    if (s <= n_paired && c.masks.size() - fixed + 1 < samples_left) {
      auto comp = mask;
      for (auto& b : comp) b ^= 1u;
      add(std::move(mask));
      add(std::move(comp));
    } else {
      add(std::move(mask));
    }
  }
  double sampled = 0.0;
  for (std::size_t i = fixed; i < c.weights.size(); ++i) sampled += c.weights[i];
  if (sampled > 0.0) {
    for (std::size_t i = fixed; i < c.weights.size(); ++i) c.weights[i] *= weight_left / sampled;
  }
  return c;
}

// Mean model output over the background with the masked-in features taken
// from `row`, for every coalition. Batches model calls.
inline std::vector<double> masked_outputs(const BatchModel& model, std::span<const double> row, const Matrix& background,
                                          const std::vector<std::size_t>& varying, const Coalitions& coal,
                                          std::size_t batch_rows) {
  const std::size_t nb = background.rows(), width = background.cols();
  std::vector<double> out(coal.masks.size(), 0.0);
  const std::size_t per_batch = std::max<std::size_t>(1, batch_rows / std::max<std::size_t>(nb, 1));
  for (std::size_t start = 0; start < coal.masks.size(); start += per_batch) {
    const std::size_t end = std::min(coal.masks.size(), start + per_batch);
    Matrix batch((end - start) * nb, width);
    for (std::size_t c = start; c < end; ++c) {
      for (std::size_t b = 0; b < nb; ++b) {
        auto dst = batch.row((c - start) * nb + b);
        const auto src = background.row(b);
        std::copy(src.begin(), src.end(), dst.begin());
        for (std::size_t j = 0; j < varying.size(); ++j) {
          if (coal.masks[c][j]) dst[varying[j]] = row[varying[j]];
        }
      }
    }
    const auto y = model(batch);
    for (std::size_t c = start; c < end; ++c) {
      double acc = 0.0;
      for (std::size_t b = 0; b < nb; ++b) acc += y[(c - start) * nb + b];
      out[c] = acc / static_cast<double>(nb);
    }
  }
  return out;
}

}  // namespace detail

// Kernel SHAP: weighted least squares over coalitions with the Shapley
// kernel, constrained so that g(empty) = base value and g(full) = f(x).
inline ShapResult explain(const BatchModel& model, const Matrix& rows, const Matrix& background,
                          const ShapParams& params = {}, std::vector<std::string> feature_names = {}) {
  if (background.rows() == 0) throw InvalidArgument("explain: background set is empty");
  if (rows.cols() != background.cols()) throw InvalidArgument("explain: rows and background differ in width");
  const std::size_t m = rows.cols();
  if (!params.budget && m > 20) throw InvalidArgument(str_cat("explain: exact mode needs M <= 20, got ", m));
  if (params.budget && *params.budget < 2) throw InvalidArgument("explain: budget must be >= 2");

  ShapResult res;
  res.feature_names = std::move(feature_names);
  res.values = Matrix(rows.rows(), m);
  res.background_size = background.rows();
  const auto bg_out = model(background);
  double base = 0.0;
  for (double v : bg_out) base += v;
  res.base_value = base / static_cast<double>(bg_out.size());
  res.outputs = rows.rows() > 0 ? model(rows) : std::vector<double>{};

  Rng rng(params.seed);
  for (std::size_t r = 0; r < rows.rows(); ++r) {
    const auto x = rows.row(r);
    const double delta = res.outputs[r] - res.base_value;
    std::vector<std::size_t> varying;
    for (std::size_t j = 0; j < m; ++j) {
      for (std::size_t b = 0; b < background.rows(); ++b) {
        if (background(b, j) != x[j]) {
          varying.push_back(j);
          break;
        }
      }
    }
    const std::size_t mv = varying.size();
    if (mv == 0) continue;
    if (mv == 1) {
      res.values(r, varying[0]) = delta;
      continue;
    }
    Rng row_rng = rng.fork(r);
    const detail::Coalitions coal =
        params.budget ? detail::sample_coalitions(mv, *params.budget, row_rng) : detail::enumerate_all(mv);
    res.coalitions = std::max(res.coalitions, coal.masks.size());
    const auto ey = detail::masked_outputs(model, x, background, varying, coal, params.batch_rows);

    // Eliminate the last varying feature through the efficiency constraint.
    const std::size_t n = coal.masks.size();
    Eigen::MatrixXd a(n, mv - 1);
    Eigen::VectorXd b(n);
    for (std::size_t c = 0; c < n; ++c) {
      const double sw = std::sqrt(coal.weights[c]);
      const double z_last = coal.masks[c][mv - 1];
      for (std::size_t j = 0; j + 1 < mv; ++j) a(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(j)) =
          sw * (coal.masks[c][j] - z_last);
      b(static_cast<Eigen::Index>(c)) = sw * (ey[c] - res.base_value - z_last * delta);
    }
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(a);
    if (cod.rank() < static_cast<Eigen::Index>(mv - 1)) res.singular = true;
    const Eigen::VectorXd phi = cod.solve(b);
    double partial = 0.0;
    for (std::size_t j = 0; j + 1 < mv; ++j) {
      res.values(r, varying[j]) = phi(static_cast<Eigen::Index>(j));
      partial += phi(static_cast<Eigen::Index>(j));
    }
    res.values(r, varying[mv - 1]) = delta - partial;
  }

  res.mean_abs.assign(m, 0.0);
  for (std::size_t r = 0; r < rows.rows(); ++r) {
    for (std::size_t j = 0; j < m; ++j) res.mean_abs[j] += std::abs(res.values(r, j));
  }
  if (rows.rows() > 0) {
    for (double& v : res.mean_abs) v /= static_cast<double>(rows.rows());
  }
  res.ranking = rank_by_mean_abs(res.mean_abs);
  return res;
}

// Shapley values straight from the definition, enumerating all 2^M subsets.
// The value of a subset is the mean output with those features taken from
// `row` and the others from each background row.
inline std::vector<double> exact_shapley(const BatchModel& model, std::span<const double> row, const Matrix& background) {
  const std::size_t m = row.size();
  if (m > 12) throw InvalidArgument(str_cat("exact_shapley: M = ", m, " exceeds the enumeration limit of 12"));
  if (background.rows() == 0) throw InvalidArgument("exact_shapley: background set is empty");
  const std::size_t nb = background.rows();
  const std::size_t subsets = std::size_t{1} << m;
  Matrix batch(subsets * nb, m);
  for (std::size_t s = 0; s < subsets; ++s) {
    for (std::size_t b = 0; b < nb; ++b) {
      auto dst = batch.row(s * nb + b);
      for (std::size_t j = 0; j < m; ++j) dst[j] = (s >> j) & 1u ? row[j] : background(b, j);
    }
  }
  const auto y = model(batch);
  std::vector<double> value(subsets, 0.0);
  for (std::size_t s = 0; s < subsets; ++s) {
    double acc = 0.0;
    for (std::size_t b = 0; b < nb; ++b) acc += y[s * nb + b];
    value[s] = acc / static_cast<double>(nb);
  }
  std::vector<double> fact(m + 1, 1.0);
  for (std::size_t i = 1; i <= m; ++i) fact[i] = fact[i - 1] * static_cast<double>(i);
  std::vector<double> phi(m, 0.0);
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t s = 0; s < subsets; ++s) {
      if ((s >> j) & 1u) continue;
      const auto size = static_cast<std::size_t>(__builtin_popcountll(s));
      const double w = fact[size] * fact[m - size - 1] / fact[m];
      phi[j] += w * (value[s | (std::size_t{1} << j)] - value[s]);
    }
  }
  return phi;
}

struct BeeswarmPoint {
  std::size_t row = 0;
  std::size_t feature = 0;
  double phi = 0.0;
  double value = 0.0;
};

struct ForceRow {
  std::size_t row = 0;
  double base_value = 0.0;
  double output = 0.0;
  // (feature, phi) by decreasing |phi|, ties by feature index.
  std::vector<std::pair<std::size_t, double>> contributions;
};

struct ShapSummary {
  std::vector<std::size_t> ranking;
  std::vector<double> mean_abs;
  std::vector<BeeswarmPoint> beeswarm;
  std::vector<ForceRow> force;
};

inline ShapSummary summarize(const ShapResult& result, const Matrix& rows, std::size_t top_n = 10) {
  ShapSummary s;
  s.ranking = result.ranking;
  s.mean_abs = result.mean_abs;
  const std::size_t shown = std::min(top_n, s.ranking.size());
  for (std::size_t k = 0; k < shown; ++k) {
    const std::size_t f = s.ranking[k];
    for (std::size_t r = 0; r < result.values.rows(); ++r) s.beeswarm.push_back({r, f, result.values(r, f), rows(r, f)});
  }
  for (std::size_t r = 0; r < result.values.rows(); ++r) {
    ForceRow fr;
    fr.row = r;
    fr.base_value = result.base_value;
    fr.output = result.outputs[r];
    for (std::size_t j = 0; j < result.values.cols(); ++j) fr.contributions.emplace_back(j, result.values(r, j));
    std::stable_sort(fr.contributions.begin(), fr.contributions.end(),
                     [](const auto& a, const auto& b) { return std::abs(a.second) > std::abs(b.second); });
    s.force.push_back(std::move(fr));
  }
  return s;
}

}  // namespace nids_xray
