#include <gtest/gtest.h>

#include <sstream>

#include "oracles.hpp"

using namespace nids_xray;

namespace {

const PacketPredicate kAttack = PacketPredicate::parse("label=malicious");

std::vector<PacketRecord> benign_only(const std::vector<PacketRecord>& t) {
  std::vector<PacketRecord> out;
  for (const auto& p : t) {
    if (p.label != Label::malicious) out.push_back(p);
  }
  return out;
}

const std::vector<PacketRecord>& synthetic_base() {
  static const auto trace = [] {
    SyntheticParams p;
    p.duration_s = 300;
    return synthetic_trace(p);
  }();
  return trace;
}

}  // namespace

TEST(TamperBias, BandComplianceAndConservation) {
  const auto base = oracle::tamper_fixture();
  TamperSpec spec;
  spec.lo = 10;
  spec.hi = 50;
  spec.seed = 1;
  const auto res = tamper(base, spec);
  EXPECT_EQ(res.matched, 10000u);
  const auto counts = oracle::attack_counts(res.records, kAttack);
  std::size_t total = 0;
  const auto last = counts.rbegin()->first;
  for (const auto& [sec, c] : counts) {
    total += c;
    EXPECT_LE(c, 50u) << sec;
    if (sec != last) EXPECT_GE(c, 10u) << sec;
  }
  EXPECT_EQ(total, 10000u);
  // recount agrees with the emitted buckets
  for (const auto& b : res.buckets) EXPECT_EQ(counts.at(b.second), static_cast<std::size_t>(b.emitted));

  EXPECT_EQ(oracle::field_multiset(res.records), oracle::field_multiset(base));
  EXPECT_EQ(benign_only(res.records), benign_only(base));
  for (std::size_t i = 1; i < res.records.size(); ++i) EXPECT_GE(res.records[i].ts_us, res.records[i - 1].ts_us);

  // attack order preserved
  std::vector<std::size_t> attack_src;
  for (std::size_t i = 0; i < res.records.size(); ++i) {
    if (kAttack.matches(res.records[i])) attack_src.push_back(res.source_index[i]);
  }
  EXPECT_TRUE(std::is_sorted(attack_src.begin(), attack_src.end()));
}

TEST(TamperBias, ThousandPacketsInOneSecond) {
  std::vector<PacketRecord> base;
  for (int i = 0; i < 1000; ++i) base.push_back(oracle::packet(5.0 + i * 0.0009, 9, 3, Proto::arp, 0, 0, 60, Label::malicious));
  TamperSpec spec;
  const auto res = tamper(base, spec);
  const auto counts = oracle::attack_counts(res.records, kAttack);
  std::size_t total = 0;
  for (const auto& [sec, c] : counts) {
    total += c;
    EXPECT_LE(c, 50u);
    if (sec != counts.rbegin()->first) EXPECT_GE(c, 10u);
  }
  EXPECT_EQ(total, 1000u);
}

TEST(TamperBias, WideBandKeepsPerSecondCounts) {
  std::vector<PacketRecord> base;
  for (int s = 0; s < 20; ++s) {
    for (int k = 0; k < 5; ++k) base.push_back(oracle::packet(s + k * 0.15, 9, 3, Proto::udp, 1, 2, 90, Label::malicious));
  }
  TamperSpec spec;
  spec.lo = 10;
  spec.hi = 50;
  const auto res = tamper(base, spec);
  EXPECT_EQ(oracle::attack_counts(res.records, kAttack), oracle::attack_counts(base, kAttack));
}

TEST(TamperBias, Deterministic) {
  const auto base = oracle::tamper_fixture();
  TamperSpec spec;
  spec.seed = 42;
  oracle::TempDir dir("tamper");
  write_trace(tamper(base, spec).records, dir / "a.csv", TraceFormat::csv);
  write_trace(tamper(base, spec).records, dir / "b.csv", TraceFormat::csv);
  EXPECT_EQ(oracle::TempDir::slurp(dir / "a.csv"), oracle::TempDir::slurp(dir / "b.csv"));
  spec.seed = 43;
  write_trace(tamper(base, spec).records, dir / "c.csv", TraceFormat::csv);
  EXPECT_NE(oracle::TempDir::slurp(dir / "a.csv"), oracle::TempDir::slurp(dir / "c.csv"));
}

TEST(TamperBias, Errors) {
  const auto base = oracle::tamper_fixture();
  TamperSpec spec;
  spec.match = PacketPredicate::parse("proto=ICMP");
  try {
    tamper(base, spec);
    FAIL() << "expected error";
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("proto=ICMP"), std::string::npos);
  }
  spec = TamperSpec{};
  spec.lo = 50;
  spec.hi = 10;
  EXPECT_THROW(tamper(base, spec), InvalidArgument);
  spec.lo = 0;
  spec.hi = 10;
  EXPECT_THROW(tamper(base, spec), InvalidArgument);
}

TEST(TamperBias, RateSeriesExamples) {
  const std::vector<PacketRecord> t{oracle::packet(0.1, 1, 2), oracle::packet(0.5, 1, 2),
                                    oracle::packet(1.2, 1, 2, Proto::udp, 1, 2, 100, Label::malicious)};
  const auto rs = rate_series(t);
  EXPECT_EQ(rs.first_second, 0);
  EXPECT_EQ(rs.benign, (std::vector<std::size_t>{2, 0}));
  EXPECT_EQ(rs.malicious, (std::vector<std::size_t>{0, 1}));
  const auto empty = rate_series({});
  EXPECT_TRUE(empty.benign.empty());
  EXPECT_TRUE(empty.malicious.empty());

  TamperSpec spec;
  const auto tampered = tamper(oracle::tamper_fixture(), spec).records;
  const auto r2 = rate_series(tampered);
  std::size_t sum = 0;
  for (std::size_t i = 0; i < r2.malicious.size(); ++i) {
    sum += r2.malicious[i] + r2.benign[i];
    EXPECT_LE(r2.malicious[i], 50u);
  }
  EXPECT_EQ(sum, tampered.size());
  std::ostringstream os;
  write_rate_csv(os, rs);
  EXPECT_EQ(os.str(), "second,benign,malicious\n0,2,0\n1,0,1\n");
}

TEST(TamperBias, ReferenceDetectorIsRateDependent) {
  const auto& base = synthetic_base();
  const Trainer trainer = [](const FeatureMatrix& x) {
    EnsembleConfig cfg;
    cfg.seed = 1;
    return std::make_unique<EnsembleAeModel>(EnsembleAeModel::train(x, cfg));
  };
  std::vector<TamperSpec> specs;
  for (auto [lo, hi] : std::vector<std::pair<int, int>>{{50, 90}, {10, 50}, {30, 70}}) {
    TamperSpec s;
    s.lo = lo;
    s.hi = hi;
    s.seed = 7;
    specs.push_back(s);
  }
  BiasParams bp;
  bp.train_rows = 8000;
  const auto rep = bias_experiment(trainer, base, specs, bp);
  ASSERT_EQ(rep.traces.size(), 4u);
  const double orig = rep.traces[0].mean_attack_score;
  std::map<std::int64_t, double> by_band;
  for (std::size_t k = 1; k < 4; ++k) by_band[rep.traces[k].band->first] = rep.traces[k].mean_attack_score;
  EXPECT_LT(by_band[10], orig);
  EXPECT_LE(by_band[10], by_band[30]);
  EXPECT_LE(by_band[30], by_band[50]);
  EXPECT_TRUE(rep.monotone);
  EXPECT_EQ(rep.verdict, "vulnerable");
  for (const auto& t : rep.traces) {
    std::size_t n = 0;
    for (std::size_t i = 0; i < t.rates.benign.size(); ++i) n += t.rates.benign[i] + t.rates.malicious[i];
    EXPECT_EQ(t.scores.size(), n);
  }
  for (std::size_t k = 0; k < rep.pairs.size(); ++k) EXPECT_EQ(rep.pairs[k].size(), rep.traces[0].attack_positions.size());

  std::ostringstream os;
  write_bias_summary(os, rep);
  EXPECT_NE(os.str().find("verdict: vulnerable"), std::string::npos);
}

TEST(TamperBias, RateBlindModelIsNotVulnerable) {
  const auto& base = synthetic_base();
  const Trainer trainer = [](const FeatureMatrix& x) {
    return std::make_unique<SizeZScoreModel>(SizeZScoreModel::train(x, 3.0));
  };
  TamperSpec s;
  s.seed = 3;
  BiasParams bp;
  bp.train_rows = 8000;
  const auto rep = bias_experiment(trainer, base, {s}, bp);
  EXPECT_EQ(rep.verdict, "not vulnerable");
  double worst = 0;
  for (const auto& [expected, predicted] : rep.pairs[0]) worst = std::max(worst, std::abs(expected - predicted));
  EXPECT_LT(worst, 0.05 * std::max(1.0, rep.traces[0].mean_attack_score));
  EXPECT_EQ(rep.traces[0].scores.size(), base.size());
}

TEST(TamperBias, ExperimentErrors) {
  const Trainer trainer = [](const FeatureMatrix& x) {
    return std::make_unique<SizeZScoreModel>(SizeZScoreModel::train(x, 3.0));
  };
  const auto base = oracle::tamper_fixture();
  BiasParams bp;
  bp.train_rows = 100;
  EXPECT_THROW(bias_experiment(trainer, {{"original", base, std::nullopt}}, bp), InvalidArgument);
  const Trainer failing = [](const FeatureMatrix&) -> std::unique_ptr<ModelAdapter> { throw Error("nope"); };
  try {
    bias_experiment(failing, base, {TamperSpec{}}, bp);
    FAIL() << "expected failure";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("original"), std::string::npos);
  }
}
