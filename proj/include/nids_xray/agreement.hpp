#pragma once

#include <algorithm>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "nids_xray/cart.hpp"
#include "nids_xray/kernel_shap.hpp"

namespace nids_xray {

struct SubsetSelection {
  std::vector<TreePath> paths;
  // Fewer than m leaves reached min_rows.
  bool shortfall = false;
};

// The m leaf paths covering the most rows of x, each with at least min_rows.
inline SubsetSelection select_subsets(const SurrogateTree& tree, const Matrix& x, std::size_t m,
                                      std::size_t min_rows = 300) {
  if (m == 0) throw InvalidArgument("select_subsets: m must be >= 1");
  SubsetSelection sel;
  for (auto& p : enumerate_paths(tree, x)) {
    if (p.rows.size() >= min_rows) sel.paths.push_back(std::move(p));
  }
  std::stable_sort(sel.paths.begin(), sel.paths.end(), [](const TreePath& a, const TreePath& b) {
    if (a.rows.size() != b.rows.size()) return a.rows.size() > b.rows.size();
    return a.leaf_index < b.leaf_index;
  });
  if (sel.paths.size() < m) {
    sel.shortfall = true;
  } else {
    sel.paths.resize(m);
  }
  return sel;
}

// |T ∩ S| / |T|; absent for an empty path feature set.
inline std::optional<double> alpha_score(const std::vector<std::size_t>& t, const std::vector<std::size_t>& s) {
  std::vector<std::size_t> a = t, b = s;
  std::sort(a.begin(), a.end());
  a.erase(std::unique(a.begin(), a.end()), a.end());
  if (a.empty()) return std::nullopt;
  std::sort(b.begin(), b.end());
  b.erase(std::unique(b.begin(), b.end()), b.end());
  std::vector<std::size_t> both;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(both));
  return static_cast<double>(both.size()) / static_cast<double>(a.size());
}

// Top-n features by mean |phi|. Features whose attribution is zero (to solver
// precision) carry no evidence and are left out even if n is not reached.
inline std::vector<std::size_t> top_shap_features(const ShapResult& r, std::size_t top_n) {
  double peak = 1.0;
  for (double v : r.mean_abs) peak = std::max(peak, v);
  std::vector<std::size_t> s;
  for (std::size_t f : r.ranking) {
    if (s.size() >= top_n) break;
    if (r.mean_abs[f] > 1e-9 * peak) s.push_back(f);
  }
  return s;
}

struct AgreementParams {
  std::size_t m = 3;
  std::size_t top_n = 10;
  std::size_t min_rows = 300;
  std::size_t rows_per_subset = 1000;
  ShapParams shap;
  std::uint64_t seed = 0;
};

struct AgreementResult {
  std::size_t subset = 0;
  std::size_t leaf_node = 0;
  std::size_t coverage = 0;  // |D|
  std::vector<std::size_t> explained_rows;
  std::vector<std::size_t> t;
  std::vector<std::size_t> s;
  std::optional<double> alpha;
  std::vector<double> mean_abs;
};

struct AgreementAverage {
  std::size_t m = 0;  // subsets with a defined alpha
  std::vector<AgreementResult> subsets;
  std::vector<double> alphas;
  std::optional<double> a;
  bool shortfall = false;
  std::vector<std::string> warnings;
};

inline std::optional<double> mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  double acc = 0.0;
  for (double x : v) acc += x;
  return acc / static_cast<double>(v.size());
}

inline AgreementAverage agreement_average(const BatchModel& model, const SurrogateTree& tree, const FeatureMatrix& x,
                                          const Matrix& background, const AgreementParams& params = {}) {
  AgreementAverage out;
  const auto sel = select_subsets(tree, x.values, params.m, params.min_rows);
  out.shortfall = sel.shortfall;
  if (sel.shortfall) {
    out.warnings.push_back(str_cat("only ", sel.paths.size(), " of ", params.m, " paths cover >= ", params.min_rows,
                                   " rows"));
  }
  const Rng base(params.seed);
  for (std::size_t i = 0; i < sel.paths.size(); ++i) {
    const auto& path = sel.paths[i];
    AgreementResult r;
    r.subset = i;
    r.leaf_node = path.leaf_node;
    r.coverage = path.rows.size();
    if (path.rows.size() > params.rows_per_subset) {
      Rng rng = base.fork(i);
      auto pick = rng.sample_without_replacement(path.rows.size(), params.rows_per_subset);
      std::sort(pick.begin(), pick.end());
      for (std::size_t p : pick) r.explained_rows.push_back(path.rows[p]);
    } else {
      r.explained_rows = path.rows;
    }
    ShapParams sp = params.shap;
    sp.seed = Rng(params.shap.seed).fork(i).next_u64();
    const auto res = explain(model, x.values.select_rows(r.explained_rows), background, sp, x.names);
    r.mean_abs = res.mean_abs;
    r.s = top_shap_features(res, params.top_n);
    r.t = path.features();
    r.alpha = alpha_score(r.t, r.s);
    if (r.alpha) {
      out.alphas.push_back(*r.alpha);
    } else {
      out.warnings.push_back(str_cat("subset ", i, ": path has no decisions, excluded from the average"));
    }
    out.subsets.push_back(std::move(r));
  }
  out.m = out.alphas.size();
  out.a = mean_of(out.alphas);
  return out;
}

namespace detail {
inline std::string join_names(const std::vector<std::size_t>& idx, const std::vector<std::string>& names) {
  std::string s;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (i) s += ';';
    s += idx[i] < names.size() ? names[idx[i]] : std::to_string(idx[i]);
  }
  return s;
}
}  // namespace detail

inline void write_agreement_csv(std::ostream& os, const AgreementAverage& avg, const std::vector<std::string>& names) {
  os << "subset,rows,T,S,alpha,A\n";
  const std::string a = avg.a ? format_double(*avg.a) : "n/a";
  for (const auto& r : avg.subsets) {
    os << r.subset << ',' << r.coverage << ',' << detail::join_names(r.t, names) << ','
       << detail::join_names(r.s, names) << ',' << (r.alpha ? format_double(*r.alpha) : "n/a") << ',' << a << '\n';
  }
}

inline void write_agreement_text(std::ostream& os, const AgreementAverage& avg, const std::vector<std::string>& names) {
  for (const auto& r : avg.subsets) {
    os << "subset " << r.subset << " (leaf " << r.leaf_node << ", " << r.coverage << " rows)\n";
    os << "  T: " << detail::join_names(r.t, names) << '\n';
    os << "  S: " << detail::join_names(r.s, names) << '\n';
    os << "  alpha: " << (r.alpha ? format_double(*r.alpha) : "n/a") << '\n';
  }
  os << "A over " << avg.m << " subsets: " << (avg.a ? format_double(*avg.a) : "n/a") << '\n';
  for (const auto& w : avg.warnings) os << "warning: " << w << '\n';
}

}  // namespace nids_xray
