#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace nids_xray;

namespace {

BatchModel linear(std::vector<double> coef, double bias = 0.0) {
  return [coef = std::move(coef), bias](const Matrix& x) {
    std::vector<double> out(x.rows(), bias);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      for (std::size_t c = 0; c < x.cols(); ++c) out[r] += coef[c] * x(r, c);
    }
    return out;
  };
}

// A non-additive model with interactions; reads every feature but the last.
BatchModel interacting(std::size_t m) {
  return [m](const Matrix& x) {
    std::vector<double> out(x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r) {
      double v = 0;
      for (std::size_t c = 0; c + 1 < m; ++c) v += std::sin(x(r, c) + static_cast<double>(c)) * x(r, (c + 1) % (m - 1));
      out[r] = v + x(r, 0) * x(r, 1) * 0.1;
    }
    return out;
  };
}

double max_abs_diff(const Matrix& a, std::size_t r, const std::vector<double>& b) {
  double d = 0;
  for (std::size_t j = 0; j < b.size(); ++j) d = std::max(d, std::abs(a(r, j) - b[j]));
  return d;
}

}  // namespace

TEST(KernelShap, KernelWeights) {
  EXPECT_DOUBLE_EQ(*shapley_kernel_weight(4, 1), 0.25);
  EXPECT_DOUBLE_EQ(*shapley_kernel_weight(4, 2), 0.125);
  EXPECT_FALSE(shapley_kernel_weight(4, 0).has_value());
  EXPECT_FALSE(shapley_kernel_weight(4, 4).has_value());
  for (std::size_t m = 2; m <= 32; ++m) {
    for (std::size_t s = 1; s < m; ++s) {
      const double a = *shapley_kernel_weight(m, s), b = *shapley_kernel_weight(m, m - s);
      EXPECT_GT(a, 0.0);
      EXPECT_TRUE(oracle::close(a, b, 1e-14)) << m << " " << s;
    }
  }
}

TEST(KernelShap, LinearClosedForm) {
  Matrix bg(1, 2, 0.0);
  Matrix row(1, 2, 1.0);
  for (auto budget : {std::optional<std::size_t>{}, std::optional<std::size_t>{2048}}) {
    ShapParams p;
    p.budget = budget;
    const auto res = explain(linear({2, 3}), row, bg, p);
    EXPECT_NEAR(res.values(0, 0), 2.0, 1e-9);
    EXPECT_NEAR(res.values(0, 1), 3.0, 1e-9);
    EXPECT_NEAR(res.base_value, 0.0, 1e-12);
  }
  // general background: phi_j = c_j (x_j - mean background_j)
  Rng rng(3);
  const Matrix bg2 = oracle::random_matrix(30, 6, rng);
  const Matrix rows = oracle::random_matrix(4, 6, rng);
  const std::vector<double> coef{1, -2, 0.5, 3, 0, 7};
  ShapParams p;
  p.budget = std::nullopt;
  const auto res = explain(linear(coef, 4), rows, bg2, p);
  for (std::size_t r = 0; r < rows.rows(); ++r) {
    for (std::size_t j = 0; j < 6; ++j) {
      double mean = 0;
      for (std::size_t b = 0; b < bg2.rows(); ++b) mean += bg2(b, j);
      mean /= static_cast<double>(bg2.rows());
      EXPECT_NEAR(res.values(r, j), coef[j] * (rows(r, j) - mean), 1e-8);
    }
  }
}

TEST(KernelShap, DummyFeatureGetsZero) {
  Rng rng(5);
  Matrix bg = oracle::random_matrix(10, 5, rng);
  Matrix rows = oracle::random_matrix(5, 5, rng);
  for (std::size_t b = 0; b < bg.rows(); ++b) bg(b, 2) = 4.0;
  for (std::size_t r = 0; r < rows.rows(); ++r) rows(r, 2) = 4.0;
  ShapParams p;
  p.budget = std::nullopt;
  // constant across row and background
  auto res = explain(interacting(5), rows, bg, p);
  for (std::size_t r = 0; r < rows.rows(); ++r) EXPECT_EQ(res.values(r, 2), 0.0);
  // never read by the model (last column)
  res = explain(interacting(5), oracle::random_matrix(5, 5, rng), bg, p);
  for (std::size_t r = 0; r < 5; ++r) EXPECT_NEAR(res.values(r, 4), 0.0, 1e-9);
}

TEST(KernelShap, SymmetricFeaturesEqual) {
  // f = x0 * x1 + x2, with x0 and x1 interchangeable and equally valued.
  const BatchModel f = [](const Matrix& x) {
    std::vector<double> out(x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r) out[r] = x(r, 0) * x(r, 1) + x(r, 2);
    return out;
  };
  Rng rng(2);
  Matrix bg(20, 3);
  for (std::size_t b = 0; b < 20; ++b) {
    const double v = rng.uniform(0, 5);
    bg(b, 0) = bg(b, 1) = v;
    bg(b, 2) = rng.uniform(0, 5);
  }
  Matrix row(1, 3);
  row(0, 0) = row(0, 1) = 3.0;
  row(0, 2) = 1.0;
  ShapParams p;
  p.budget = std::nullopt;
  const auto res = explain(f, row, bg, p);
  EXPECT_NEAR(res.values(0, 0), res.values(0, 1), 1e-6);
}

TEST(KernelShap, EfficiencyExactAndSampled) {
  for (std::size_t m : {3u, 9u, 16u, 30u}) {
    Rng rng(m);
    const Matrix bg = oracle::random_matrix(10, m, rng);
    const Matrix rows = oracle::random_matrix(3, m, rng);
    ShapParams p;
    if (m <= 16) p.budget = std::nullopt;
    for (int pass = 0; pass < 2; ++pass) {
      const auto res = explain(interacting(m), rows, bg, p);
      for (std::size_t r = 0; r < rows.rows(); ++r) {
        double sum = res.base_value;
        for (std::size_t j = 0; j < m; ++j) sum += res.values(r, j);
        EXPECT_NEAR(sum, res.outputs[r], p.budget ? 1e-3 : 1e-6) << "m=" << m;
      }
      p.budget = 2048;
    }
  }
}

TEST(KernelShap, ExactRegressionMatchesShapleyOracle) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const std::size_t m = 2 + seed % 9;  // 2..10
    const auto tree = oracle::random_tree_model(m, seed);
    const BatchModel f = score_function(tree);
    Rng rng(seed * 7);
    const Matrix bg = oracle::random_matrix(8, m, rng);
    const Matrix rows = oracle::random_matrix(3, m, rng);
    ShapParams p;
    p.budget = std::nullopt;
    const auto res = explain(f, rows, bg, p);
    for (std::size_t r = 0; r < rows.rows(); ++r) {
      const auto phi = exact_shapley(f, rows.row(r), bg);
      EXPECT_LE(max_abs_diff(res.values, r, phi), 1e-6) << "seed " << seed;
    }
  }
}

TEST(KernelShap, EightFeatureTreeExact) {
  const auto tree = oracle::random_tree_model(8, 99);
  const BatchModel f = score_function(tree);
  Rng rng(8);
  const Matrix bg = oracle::random_matrix(20, 8, rng);
  const Matrix rows = oracle::random_matrix(5, 8, rng);
  ShapParams p;
  p.budget = std::nullopt;
  const auto res = explain(f, rows, bg, p);
  for (std::size_t r = 0; r < rows.rows(); ++r) {
    EXPECT_LE(max_abs_diff(res.values, r, exact_shapley(f, rows.row(r), bg)), 1e-6);
  }
}

TEST(KernelShap, SampledApproximatesExact) {
  const std::size_t m = 14;
  Rng rng(12);
  const Matrix bg = oracle::random_matrix(5, m, rng);
  const Matrix rows = oracle::random_matrix(2, m, rng);
  ShapParams exact;
  exact.budget = std::nullopt;
  ShapParams sampled;
  sampled.budget = 2048;
  const auto a = explain(interacting(m), rows, bg, exact);
  const auto b = explain(interacting(m), rows, bg, sampled);
  double scale = 0, err = 0;
  for (std::size_t i = 0; i < a.values.data().size(); ++i) {
    scale = std::max(scale, std::abs(a.values.data()[i]));
    err = std::max(err, std::abs(a.values.data()[i] - b.values.data()[i]));
  }
  EXPECT_LT(err, 0.1 * scale);
  // deterministic under a fixed seed
  EXPECT_EQ(explain(interacting(m), rows, bg, sampled).values, b.values);
}

TEST(KernelShap, ShapleyOracleProperties) {
  Rng rng(1);
  const Matrix bg = oracle::random_matrix(6, 1, rng);
  const Matrix row = oracle::random_matrix(1, 1, rng);
  const auto f = interacting(3);
  const BatchModel g = [](const Matrix& x) {
    std::vector<double> out(x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r) out[r] = x(r, 0) * x(r, 0);
    return out;
  };
  double base = 0;
  for (double v : g(bg)) base += v;
  base /= 6;
  EXPECT_NEAR(exact_shapley(g, row.row(0), bg)[0], g(row)[0] - base, 1e-12);

  // additive: phi_j depends only on x_j
  const auto add = linear({1, 2, 3});
  const Matrix bg3 = oracle::random_matrix(4, 3, rng);
  Matrix r1 = oracle::random_matrix(1, 3, rng), r2 = r1;
  r2(0, 1) += 5;
  r2(0, 2) -= 3;
  EXPECT_NEAR(exact_shapley(add, r1.row(0), bg3)[0], exact_shapley(add, r2.row(0), bg3)[0], 1e-12);

  const Matrix bg5 = oracle::random_matrix(4, 5, rng);
  const Matrix r5 = oracle::random_matrix(1, 5, rng);
  const auto phi = exact_shapley(interacting(5), r5.row(0), bg5);
  double base5 = 0;
  for (double v : interacting(5)(bg5)) base5 += v;
  base5 /= 4;
  double sum = base5;
  for (double v : phi) sum += v;
  EXPECT_NEAR(sum, interacting(5)(r5)[0], 1e-9);
  (void)f;
  EXPECT_THROW(exact_shapley(add, std::vector<double>(13, 0.0), Matrix(1, 13)), InvalidArgument);
}

TEST(KernelShap, Errors) {
  const auto f = linear({1, 1});
  EXPECT_THROW(explain(f, Matrix(1, 2), Matrix(0, 2)), InvalidArgument);
  EXPECT_THROW(explain(f, Matrix(1, 2), Matrix(1, 3)), InvalidArgument);
  ShapParams p;
  p.budget = std::nullopt;
  EXPECT_THROW(explain(linear(std::vector<double>(21, 1.0)), Matrix(1, 21), Matrix(1, 21), p), InvalidArgument);
}

TEST(KernelShap, SummaryOrderingAndForceRows) {
  Rng rng(4);
  const Matrix bg = oracle::random_matrix(10, 6, rng);
  const Matrix rows = oracle::random_matrix(7, 6, rng);
  ShapParams p;
  p.budget = std::nullopt;
  const auto res = explain(interacting(6), rows, bg, p);
  const auto s = summarize(res, rows, 3);
  EXPECT_EQ(s.beeswarm.size(), 3u * rows.rows());
  for (std::size_t k = 1; k < s.ranking.size(); ++k) {
    EXPECT_GE(s.mean_abs[s.ranking[k - 1]], s.mean_abs[s.ranking[k]]);
  }
  for (const auto& fr : s.force) {
    double sum = fr.base_value;
    for (const auto& [j, phi] : fr.contributions) sum += phi;
    EXPECT_NEAR(sum, fr.output, 1e-6);
    for (std::size_t k = 1; k < fr.contributions.size(); ++k) {
      EXPECT_GE(std::abs(fr.contributions[k - 1].second), std::abs(fr.contributions[k].second));
    }
  }
  for (const auto& pt : s.beeswarm) EXPECT_EQ(pt.value, rows(pt.row, pt.feature));

  ShapResult zero;
  zero.values = Matrix(2, 4);
  zero.outputs = {0, 0};
  zero.mean_abs.assign(4, 0.0);
  zero.ranking = rank_by_mean_abs(zero.mean_abs);
  const auto zs = summarize(zero, Matrix(2, 4), 10);
  EXPECT_EQ(zs.ranking, (std::vector<std::size_t>{0, 1, 2, 3}));
  for (const auto& fr : zs.force) {
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(fr.contributions[k].first, k);
  }
}
