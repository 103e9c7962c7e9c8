#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace nids_xray;

TEST(DisFeatures, SingleInsert) {
  DampedStat s = make_stat(0.1);
  insert_1d(s, 100.0, 0.0);
  EXPECT_EQ(s.weight(), 1.0);
  EXPECT_EQ(s.mean(), 100.0);
  EXPECT_EQ(s.std_dev(), 0.0);
}

TEST(DisFeatures, HandDecay) {
  DampedStat s = make_stat(0.1);
  insert_1d(s, 100.0, 0.0);
  insert_1d(s, 200.0, 10.0);
  EXPECT_DOUBLE_EQ(s.w, 1.5);
  EXPECT_DOUBLE_EQ(s.linear_sum(), 250.0);
  EXPECT_NEAR(s.mean(), 166.66666666666666, 1e-12);
}

TEST(DisFeatures, SameInstantEqualsUndamped) {
  Rng rng(5);
  for (double lam : {5.0, 0.01, 37.0}) {
    DampedStat s = make_stat(lam);
    std::vector<double> v;
    for (int i = 0; i < 50; ++i) {
      v.push_back(rng.uniform(0, 1500));
      insert_1d(s, v.back(), 42.0);
    }
    double mean = 0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= static_cast<double>(v.size());
    EXPECT_DOUBLE_EQ(s.weight(), 50.0);
    EXPECT_NEAR(s.mean(), mean, 1e-9 * mean);
    EXPECT_NEAR(s.std_dev(), std::sqrt(var), 1e-7 * std::sqrt(var));
  }
}

TEST(DisFeatures, BackwardsTimeCounted) {
  DampedStat s = make_stat(1.0);
  DisDiagnostics d;
  insert_1d(s, 1.0, 5.0, &d);
  insert_1d(s, 1.0, 4.0, &d);
  EXPECT_EQ(d.backwards_time, 1u);
  EXPECT_DOUBLE_EQ(s.w, 2.0);
}

TEST(DisFeatures, OneDirectionHasZeroCorrelation) {
  DampedStat si = make_stat(1.0), sj = make_stat(1.0);
  ResidualProduct rp;
  PairStats ps;
  for (int i = 0; i < 20; ++i) ps = insert_2d(si, sj, rp, 100.0 + i, i * 0.1);
  EXPECT_EQ(ps.covariance, 0.0);
  EXPECT_EQ(ps.pcc, 0.0);
}

TEST(DisFeatures, EqualBidirectionalStreamsCorrelate) {
  // Alternating directions carrying the same sizes at one instant (no decay).
  DampedStat a = make_stat(1.0), b = make_stat(1.0);
  ResidualProduct rp;
  PairStats ps;
  const std::vector<double> sizes{60, 1500, 400, 900, 100, 1200, 700, 60, 1400, 300, 800, 1000};
  for (double v : sizes) {
    ps = insert_2d(a, b, rp, v, 0.0);
    ps = insert_2d(b, a, rp, v, 0.0);
  }
  // Undamped Pearson of the two raw lists is exactly 1.
  EXPECT_GT(ps.pcc, 0.0);
  EXPECT_LE(ps.pcc, 1.0);
  EXPECT_NEAR(a.mean(), b.mean(), 1e-9);
  EXPECT_NEAR(a.std_dev(), b.std_dev(), 1e-9);
}

TEST(DisFeatures, MagnitudeThreeFourFive) {
  DampedStat a = make_stat(1.0), b = make_stat(1.0);
  ResidualProduct rp;
  insert_2d(b, a, rp, 40.0, 0.0);
  const PairStats ps = insert_2d(a, b, rp, 30.0, 0.0);
  EXPECT_DOUBLE_EQ(ps.magnitude, 50.0);
}

TEST(DisFeatures, NamesAndLayout) {
  const auto& names = feature_names();
  ASSERT_EQ(names.size(), kFeatureCount);
  EXPECT_EQ(names[0], "MI_dir_5_weight");
  EXPECT_EQ(names[14], "MI_dir_0.01_std");
  EXPECT_EQ(names[15], "H_5_weight");
  EXPECT_EQ(names[30], "HH_5_weight_0");
  EXPECT_EQ(names[36], "HH_5_pcc_0_1");
  EXPECT_EQ(names[65], "HH_jit_5_weight");
  EXPECT_EQ(names[114], "HpHp_0.01_pcc_0_1");
  EXPECT_NE(std::find(names.begin(), names.end(), "HpHp_0.1_pcc_0_1"), names.end());
  EXPECT_NE(std::find(names.begin(), names.end(), "MI_dir_0.1_weight"), names.end());
}

TEST(DisFeatures, ColdStart) {
  const auto fm = extract_features({oracle::packet(3.0, 1, 2, Proto::tcp, 1000, 80, 77)});
  ASSERT_EQ(fm.rows(), 1u);
  for (std::size_t c = 0; c < kFeatureCount; ++c) {
    const std::string& n = fm.names[c];
    const double v = fm.values(0, c);
    if (n.find("HH_jit") == 0) {
      if (n.ends_with("weight")) EXPECT_EQ(v, 1.0) << n;
      else EXPECT_EQ(v, 0.0) << n;
      continue;
    }
    if (n.find("weight") != std::string::npos) EXPECT_EQ(v, 1.0) << n;
    if (n.find("std") != std::string::npos) EXPECT_EQ(v, 0.0) << n;
    if (n.find("pcc") != std::string::npos) EXPECT_EQ(v, 0.0) << n;
    if (n.find("mean") != std::string::npos) EXPECT_EQ(v, 77.0) << n;
  }
}

TEST(DisFeatures, MatchesFullHistoryOracle) {
  const auto trace = oracle::random_trace(10000, 17);
  const auto fm = extract_features(trace);
  const Matrix expect = oracle::dis_features(trace);
  ASSERT_EQ(fm.values.rows(), expect.rows());
  std::size_t bad = 0;
  for (std::size_t r = 0; r < expect.rows(); ++r) {
    for (std::size_t c = 0; c < kFeatureCount; ++c) {
      const double got = fm.values(r, c), want = expect(r, c);
      if (!oracle::close(got, want, 1e-9) && bad++ < 10) {
        ADD_FAILURE() << "row " << r << " " << fm.names[c] << ": " << got << " vs " << want;
      }
    }
  }
  EXPECT_EQ(bad, 0u);
}

TEST(DisFeatures, LambdaMonotoneMemory) {
  const auto fm = extract_features(oracle::random_trace(3000, 4));
  // (first column, per-lambda stride) of each family's weight column
  const std::vector<std::pair<std::size_t, std::size_t>> blocks{{0, 3}, {15, 3}, {30, 7}, {65, 3}, {80, 7}};
  for (const auto& [first, stride] : blocks) {
    ASSERT_NE(fm.names[first].find("_5_weight"), std::string::npos);
    for (std::size_t r = 0; r < fm.rows(); ++r) {
      for (std::size_t l = 1; l < 5; ++l) {
        EXPECT_LE(fm.values(r, first + (l - 1) * stride), fm.values(r, first + l * stride) + 1e-12);
      }
    }
  }
}

TEST(DisFeatures, AllFiniteOnDegenerateTraces) {
  std::vector<std::vector<PacketRecord>> traces{
      {oracle::packet(0, 1, 2)},
      {oracle::packet(0, 1, 2), oracle::packet(0, 1, 2), oracle::packet(0, 1, 2)},
      {oracle::packet(0, 9, 3, Proto::arp, 0, 0, 60), oracle::packet(1, 9, 3, Proto::arp, 0, 0, 60)},
  };
  PacketRecord self = oracle::packet(2, 4, 4);
  traces.push_back({self, self});
  PacketRecord bare = oracle::packet(1, 1, 2, Proto::other, 0, 0, 64);
  bare.src_ip = bare.dst_ip = IpAddr{};
  traces.push_back({bare, bare});
  for (const auto& t : traces) {
    const auto fm = extract_features(t);
    for (double v : fm.values.data()) EXPECT_TRUE(std::isfinite(v));
  }
}

TEST(DisFeatures, EvictionKeepsOutputsConsistent) {
  // Two bursts separated by more than the eviction horizon: the second burst
  // must look like a cold start once the stale keys are swept.
  std::vector<PacketRecord> trace;
  for (int i = 0; i < 5000; ++i) trace.push_back(oracle::packet(i * 0.001, 1, 2));
  const double later = 10.0 + FeatureExtractor::eviction_horizon() * 2;
  for (int i = 0; i < 5000; ++i) trace.push_back(oracle::packet(later + i * 0.001, 3, 4));
  DisDiagnostics diag;
  const auto fm = extract_features(trace, &diag);
  EXPECT_GT(diag.evicted_keys, 0u);
  for (double v : fm.values.data()) EXPECT_TRUE(std::isfinite(v));
  const std::size_t w = fm.column_index("MI_dir_0.01_weight");
  EXPECT_EQ(fm.values(5000, w), 1.0);
}

TEST(DisFeatures, FeatureCsvAndBinaryRoundTrip) {
  oracle::TempDir dir("dis");
  auto fm = extract_features(oracle::random_trace(200, 8));
  fm.labels[3] = 1;
  write_feature_csv(fm, dir / "f.csv");
  write_feature_binary(fm, dir / "f.bin");
  const auto a = read_feature_csv(dir / "f.csv");
  const auto b = read_feature_binary(dir / "f.bin");
  EXPECT_EQ(a.names, fm.names);
  EXPECT_EQ(b.names, fm.names);
  EXPECT_EQ(b.values, fm.values);
  EXPECT_EQ(b.labels, fm.labels);
  EXPECT_EQ(a.labels, fm.labels);
  for (std::size_t i = 0; i < fm.values.data().size(); ++i) {
    EXPECT_TRUE(oracle::close(a.values.data()[i], fm.values.data()[i], 1e-15));
  }
}
