#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>
#include <optional>
#include <ostream>
#include <queue>
#include <string>
#include <vector>

#include "nids_xray/matrix.hpp"
#include "nids_xray/model.hpp"

namespace nids_xray {

struct TreeNode {
  // feature < 0 marks a leaf.
  int feature = -1;
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  std::size_t sample_count = 0;
  // Per-sample variance reduction achieved by this node's split.
  double impurity_decrease = 0.0;
  // Mean teacher output over the node's training samples.
  double value = 0.0;
  std::size_t depth = 0;

  bool is_leaf() const { return feature < 0; }
  // Total squared-error reduction; the ranking key for top-k pruning.
  double rank() const { return static_cast<double>(sample_count) * impurity_decrease; }

  friend bool operator==(const TreeNode&, const TreeNode&) = default;
};

// Regression tree, samples with x[feature] <= threshold go left.
struct SurrogateTree {
  std::vector<TreeNode> nodes;  // root at index 0
  std::vector<std::string> feature_names;
  double fidelity = std::numeric_limits<double>::quiet_NaN();
  std::optional<std::size_t> k_pruned;

  std::size_t size() const { return nodes.size(); }
  std::size_t leaf_count() const {
    return static_cast<std::size_t>(std::count_if(nodes.begin(), nodes.end(), [](const TreeNode& n) { return n.is_leaf(); }));
  }
  std::size_t internal_count() const { return size() - leaf_count(); }
  std::size_t depth() const {
    std::size_t d = 0;
    for (const auto& n : nodes) d = std::max(d, n.depth);
    return d;
  }

  std::size_t leaf_of(std::span<const double> x) const {
    std::size_t id = 0;
    while (!nodes[id].is_leaf()) {
      const auto& n = nodes[id];
      id = static_cast<std::size_t>(x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right);
    }
    return id;
  }

  double predict_row(std::span<const double> x) const { return nodes[leaf_of(x)].value; }

  std::vector<double> predict(const Matrix& x) const {
    std::vector<double> out(x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r) out[r] = predict_row(x.row(r));
    return out;
  }

  // Share of the total squared-error reduction attributed to each feature.
  std::vector<double> feature_importance(std::size_t width) const {
    std::vector<double> imp(width, 0.0);
    double total = 0.0;
    for (const auto& n : nodes) {
      if (n.is_leaf()) continue;
      imp[static_cast<std::size_t>(n.feature)] += n.rank();
      total += n.rank();
    }
    if (total > 0.0) {
      for (double& v : imp) v /= total;
    }
    return imp;
  }

  // Features ordered by importance, ties by index; features the tree never
  // splits on are left out.
  std::vector<std::size_t> top_features(std::size_t k, std::size_t width) const {
    const auto imp = feature_importance(width);
    std::vector<std::size_t> used;
    for (const auto& n : nodes) {
      if (!n.is_leaf()) used.push_back(static_cast<std::size_t>(n.feature));
    }
    std::sort(used.begin(), used.end());
    used.erase(std::unique(used.begin(), used.end()), used.end());
    std::stable_sort(used.begin(), used.end(), [&](std::size_t a, std::size_t b) { return imp[a] > imp[b]; });
    if (used.size() > k) used.resize(k);
    return used;
  }

  friend bool operator==(const SurrogateTree& a, const SurrogateTree& b) {
    return a.nodes == b.nodes && a.feature_names == b.feature_names && a.k_pruned == b.k_pruned;
  }
};

struct CartParams {
  std::size_t max_depth = 100;
  std::size_t min_leaf = 5;
};

namespace detail {

class CartBuilder {
 public:
  CartBuilder(const Matrix& x, std::span<const double> y, CartParams params) : x_(x), y_(y), params_(params) {}

  SurrogateTree build() {
    const std::size_t n = x_.rows(), d = x_.cols();
    // Per-feature sample orderings, refined by stable partition at each split.
    std::vector<std::vector<std::size_t>> sorted(d, std::vector<std::size_t>(n));
    for (std::size_t f = 0; f < d; ++f) {
      auto& idx = sorted[f];
      for (std::size_t i = 0; i < n; ++i) idx[i] = i;
      std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x_(a, f) < x_(b, f); });
    }
    goes_left_.assign(n, 0);
    grow(std::move(sorted), 0);
    return std::move(tree_);
  }

 private:
  struct Split {
    int feature = -1;
    double threshold = 0.0;
    double gain = 0.0;
  };

  int grow(std::vector<std::vector<std::size_t>> sorted, std::size_t depth) {
    const auto& rows = sorted.empty() ? empty_ : sorted[0];
    const std::size_t n = sorted.empty() ? 0 : rows.size();
    double sum = 0.0, sum_sq = 0.0;
    for (std::size_t i : rows) {
      sum += y_[i];
      sum_sq += y_[i] * y_[i];
    }
    const int id = static_cast<int>(tree_.nodes.size());
    TreeNode node;
    node.sample_count = n;
    node.value = n > 0 ? sum / static_cast<double>(n) : 0.0;
    node.depth = depth;
    tree_.nodes.push_back(node);

    const double sse = std::max(0.0, sum_sq - sum * sum / static_cast<double>(std::max<std::size_t>(n, 1)));
    if (n < 2 * params_.min_leaf || depth >= params_.max_depth || sse <= 0.0 || constant_target(rows)) return id;
    const Split best = find_split(sorted, sum, sum_sq, sse);
    if (best.feature < 0) return id;

    const auto f = static_cast<std::size_t>(best.feature);
    for (std::size_t i : rows) goes_left_[i] = x_(i, f) <= best.threshold ? 1 : 0;
    std::vector<std::vector<std::size_t>> left(sorted.size()), right(sorted.size());
    for (std::size_t g = 0; g < sorted.size(); ++g) {
      for (std::size_t i : sorted[g]) (goes_left_[i] ? left[g] : right[g]).push_back(i);
    }
    sorted.clear();
    sorted.shrink_to_fit();
    tree_.nodes[static_cast<std::size_t>(id)].feature = best.feature;
    tree_.nodes[static_cast<std::size_t>(id)].threshold = best.threshold;
    tree_.nodes[static_cast<std::size_t>(id)].impurity_decrease = best.gain / static_cast<double>(n);
    const int l = grow(std::move(left), depth + 1);
    const int r = grow(std::move(right), depth + 1);
    tree_.nodes[static_cast<std::size_t>(id)].left = l;
    tree_.nodes[static_cast<std::size_t>(id)].right = r;
    return id;
  }

  bool constant_target(const std::vector<std::size_t>& rows) const {
    for (std::size_t i : rows) {
      if (y_[i] != y_[rows.front()]) return false;
    }
    return true;
  }

  // Scans features in index order and thresholds in increasing order; a
  // candidate must beat the incumbent by more than rounding noise, so ties
  // go to the lowest feature index, then the lowest threshold.
  Split find_split(const std::vector<std::vector<std::size_t>>& sorted, double sum, double sum_sq, double sse) const {
    Split best;
    const std::size_t n = sorted[0].size();
    const double tie_eps = 1e-12 * std::max(1.0, sse);
    for (std::size_t f = 0; f < sorted.size(); ++f) {
      const auto& idx = sorted[f];
      double ls = 0.0, lsq = 0.0;
      for (std::size_t k = 0; k + 1 < n; ++k) {
        const double yi = y_[idx[k]];
        ls += yi;
        lsq += yi * yi;
        const std::size_t nl = k + 1, nr = n - nl;
        const double a = x_(idx[k], f), b = x_(idx[k + 1], f);
        if (a == b || nl < params_.min_leaf || nr < params_.min_leaf) continue;
        const double rs = sum - ls, rsq = sum_sq - lsq;
        const double sse_l = std::max(0.0, lsq - ls * ls / static_cast<double>(nl));
        const double sse_r = std::max(0.0, rsq - rs * rs / static_cast<double>(nr));
        const double gain = sse - sse_l - sse_r;
        if (gain > best.gain + tie_eps) {
          double thr = a + (b - a) / 2.0;
          if (!(thr < b)) thr = a;
          best = {static_cast<int>(f), thr, gain};
        }
      }
    }
    return best;
  }

  const Matrix& x_;
  std::span<const double> y_;
  CartParams params_;
  SurrogateTree tree_;
  std::vector<char> goes_left_;
  const std::vector<std::size_t> empty_;
};

}  // namespace detail

// Greedy variance-reduction CART regression tree.
inline SurrogateTree fit_cart(const Matrix& x, std::span<const double> y, CartParams params = {},
                              std::vector<std::string> feature_names = {}) {
  if (y.size() != x.rows()) throw InvalidArgument(str_cat("fit_cart: ", y.size(), " targets for ", x.rows(), " rows"));
  if (x.rows() == 0) throw InvalidArgument("fit_cart: no rows");
  if (params.min_leaf < 1) params.min_leaf = 1;
  SurrogateTree tree = detail::CartBuilder(x, y, params).build();
  tree.feature_names = std::move(feature_names);
  return tree;
}

// R^2 of `predicted` against `reference`, the variance taken about the
// reference mean. Negative when worse than predicting that mean.
inline double r_squared(std::span<const double> reference, std::span<const double> predicted) {
  if (reference.size() != predicted.size()) throw InvalidArgument("r_squared: length mismatch");
  if (reference.empty()) return 1.0;
  double mean = 0.0;
  for (double v : reference) mean += v;
  mean /= static_cast<double>(reference.size());
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    ss_res += (reference[i] - predicted[i]) * (reference[i] - predicted[i]);
    ss_tot += (reference[i] - mean) * (reference[i] - mean);
  }
  if (ss_tot == 0.0) return ss_res == 0.0 ? 1.0 : 0.0;
  return 1.0 - ss_res / ss_tot;
}

inline double fidelity(const SurrogateTree& tree, const Matrix& x_eval, const ModelAdapter& teacher) {
  const auto labels = teacher.predict(x_eval);
  const std::vector<double> ref(labels.begin(), labels.end());
  const auto pred = tree.predict(x_eval);
  return r_squared(ref, pred);
}

// Keeps the k internal nodes reached best-first by rank from the root (so
// the kept part stays connected and k = 1 is the root stump). Every severed
// subtree collapses to a leaf predicting its sample mean.
inline SurrogateTree top_k_prune(const SurrogateTree& tree, std::size_t k) {
  if (k < 1) throw InvalidArgument("top_k_prune: k must be >= 1");
  SurrogateTree out;
  out.feature_names = tree.feature_names;
  if (k >= tree.internal_count()) {
    out = tree;
    out.k_pruned = k;
    return out;
  }
  std::vector<char> keep(tree.nodes.size(), 0);
  auto cmp = [&](int a, int b) {
    const double ra = tree.nodes[static_cast<std::size_t>(a)].rank(), rb = tree.nodes[static_cast<std::size_t>(b)].rank();
    if (ra != rb) return ra < rb;
    return a > b;
  };
  std::priority_queue<int, std::vector<int>, decltype(cmp)> frontier(cmp);
  if (!tree.nodes[0].is_leaf()) frontier.push(0);
  std::size_t kept = 0;
  while (kept < k && !frontier.empty()) {
    const int id = frontier.top();
    frontier.pop();
    keep[static_cast<std::size_t>(id)] = 1;
    ++kept;
    const auto& n = tree.nodes[static_cast<std::size_t>(id)];
    for (int c : {n.left, n.right}) {
      if (!tree.nodes[static_cast<std::size_t>(c)].is_leaf()) frontier.push(c);
    }
  }
  // Re-emit in pre-order so ids stay parent-before-child.
  auto emit = [&](auto&& self, int id) -> int {
    const auto& src = tree.nodes[static_cast<std::size_t>(id)];
    const int new_id = static_cast<int>(out.nodes.size());
    TreeNode n = src;
    if (!keep[static_cast<std::size_t>(id)]) {
      n.feature = -1;
      n.threshold = 0.0;
      n.left = n.right = -1;
      n.impurity_decrease = 0.0;
      out.nodes.push_back(n);
      return new_id;
    }
    out.nodes.push_back(n);
    const int l = self(self, src.left);
    const int r = self(self, src.right);
    out.nodes[static_cast<std::size_t>(new_id)].left = l;
    out.nodes[static_cast<std::size_t>(new_id)].right = r;
    return new_id;
  };
  emit(emit, 0);
  out.k_pruned = k;
  return out;
}

struct PathPredicate {
  std::size_t feature = 0;
  bool less_equal = true;  // x <= threshold when true, x > threshold otherwise
  double threshold = 0.0;

  friend bool operator==(const PathPredicate&, const PathPredicate&) = default;
};

struct TreePath {
  std::size_t leaf_node = 0;   // node id
  std::size_t leaf_index = 0;  // position among leaves, left to right
  std::vector<PathPredicate> predicates;
  std::vector<std::size_t> rows;

  std::vector<std::size_t> features() const {
    std::vector<std::size_t> f;
    for (const auto& p : predicates) f.push_back(p.feature);
    std::sort(f.begin(), f.end());
    f.erase(std::unique(f.begin(), f.end()), f.end());
    return f;
  }
};

// One entry per leaf, left to right, with the rows of x routed to it.
inline std::vector<TreePath> enumerate_paths(const SurrogateTree& tree, const Matrix& x) {
  std::vector<TreePath> paths;
  std::vector<std::ptrdiff_t> leaf_slot(tree.nodes.size(), -1);
  std::vector<PathPredicate> trail;
  auto walk = [&](auto&& self, std::size_t id) -> void {
    const auto& n = tree.nodes[id];
    if (n.is_leaf()) {
      leaf_slot[id] = static_cast<std::ptrdiff_t>(paths.size());
      paths.push_back({id, paths.size(), trail, {}});
      return;
    }
    const auto f = static_cast<std::size_t>(n.feature);
    trail.push_back({f, true, n.threshold});
    self(self, static_cast<std::size_t>(n.left));
    trail.back().less_equal = false;
    self(self, static_cast<std::size_t>(n.right));
    trail.pop_back();
  };
  if (!tree.nodes.empty()) walk(walk, 0);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    paths[static_cast<std::size_t>(leaf_slot[tree.leaf_of(x.row(r))])].rows.push_back(r);
  }
  return paths;
}

// Wraps a tree as a black-box model (score = leaf value, label = score > 0.5).
class TreeModel final : public ModelAdapter {
 public:
  TreeModel(SurrogateTree tree, std::vector<std::string> names, std::string name = "tree", double cut = 0.5)
      : tree_(std::move(tree)), names_(std::move(names)), name_(std::move(name)), cut_(cut) {}

  std::string id() const override { return name_; }
  const std::vector<std::string>& feature_names() const override { return names_; }
  double threshold() const override { return cut_; }
  const SurrogateTree& tree() const { return tree_; }

 protected:
  std::vector<double> score_rows(const Matrix& x) const override { return tree_.predict(x); }

 private:
  SurrogateTree tree_;
  std::vector<std::string> names_;
  std::string name_;
  double cut_;
};

inline nlohmann::json tree_to_json(const SurrogateTree& tree) {
  nlohmann::json j;
  j["format"] = "nids-xray-tree";
  j["version"] = 1;
  j["feature_names"] = tree.feature_names;
  j["fidelity"] = std::isnan(tree.fidelity) ? nlohmann::json() : nlohmann::json(tree.fidelity);
  j["k_pruned"] = tree.k_pruned ? nlohmann::json(*tree.k_pruned) : nlohmann::json();
  j["size"] = tree.size();
  j["depth"] = tree.depth();
  j["leaves"] = tree.leaf_count();
  auto& arr = j["nodes"] = nlohmann::json::array();
  for (const auto& n : tree.nodes) {
    arr.push_back({{"feature", n.feature},
                   {"threshold", n.threshold},
                   {"left", n.left},
                   {"right", n.right},
                   {"samples", n.sample_count},
                   {"impurity_decrease", n.impurity_decrease},
                   {"value", n.value},
                   {"depth", n.depth}});
  }
  return j;
}

inline SurrogateTree tree_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "nids-xray-tree") throw FormatError("not a serialized tree");
  SurrogateTree t;
  t.feature_names = j.at("feature_names").get<std::vector<std::string>>();
  if (!j.at("fidelity").is_null()) t.fidelity = j.at("fidelity").get<double>();
  if (!j.at("k_pruned").is_null()) t.k_pruned = j.at("k_pruned").get<std::size_t>();
  for (const auto& n : j.at("nodes")) {
    TreeNode node;
    node.feature = n.at("feature");
    node.threshold = n.at("threshold");
    node.left = n.at("left");
    node.right = n.at("right");
    node.sample_count = n.at("samples");
    node.impurity_decrease = n.at("impurity_decrease");
    node.value = n.at("value");
    node.depth = n.at("depth");
    t.nodes.push_back(node);
  }
  return t;
}

// Graphviz rendering; max_layers limits the view to the top layers.
inline void write_dot(std::ostream& os, const SurrogateTree& tree,
                      std::size_t max_layers = std::numeric_limits<std::size_t>::max()) {
  os << "digraph surrogate {\n  node [shape=box, fontname=\"Helvetica\"];\n";
  auto name_of = [&](int f) {
    const auto i = static_cast<std::size_t>(f);
    return i < tree.feature_names.size() ? tree.feature_names[i] : str_cat("f", f);
  };
  char buf[64];
  for (std::size_t id = 0; id < tree.nodes.size(); ++id) {
    const auto& n = tree.nodes[id];
    if (n.depth >= max_layers) continue;
    std::snprintf(buf, sizeof buf, "%.6g", n.value);
    if (n.is_leaf() || n.depth + 1 >= max_layers) {
      os << "  n" << id << " [label=\"value = " << buf << "\\nsamples = " << n.sample_count << "\"";
      if (!n.is_leaf()) os << ", style=dashed";
      os << "];\n";
    } else {
      char thr[64];
      std::snprintf(thr, sizeof thr, "%.6g", n.threshold);
      os << "  n" << id << " [label=\"" << name_of(n.feature) << " <= " << thr << "\\nsamples = " << n.sample_count
         << "\\nvalue = " << buf << "\"];\n";
      os << "  n" << id << " -> n" << n.left << " [label=\"true\"];\n";
      os << "  n" << id << " -> n" << n.right << " [label=\"false\"];\n";
    }
  }
  os << "}\n";
}

}  // namespace nids_xray
