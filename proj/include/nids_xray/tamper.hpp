#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "nids_xray/dis.hpp"
#include "nids_xray/model.hpp"
#include "nids_xray/packet.hpp"

namespace nids_xray {

constexpr std::int64_t kUsPerSecond = 1'000'000;

inline std::int64_t second_of(std::int64_t ts_us) {
  return ts_us >= 0 ? ts_us / kUsPerSecond : -((-ts_us + kUsPerSecond - 1) / kUsPerSecond);
}

struct TamperSpec {
  std::int64_t lo = 10;
  std::int64_t hi = 50;
  PacketPredicate match = PacketPredicate::parse("label=malicious");
  std::uint64_t seed = 0;

  void validate() const {
    if (lo <= 0 || lo >= hi) throw InvalidArgument(str_cat("tamper band needs 0 < lo < hi, got ", lo, ":", hi));
  }
  std::string band() const { return str_cat(lo, ":", hi); }
};

struct TamperBucket {
  std::int64_t second = 0;
  std::int64_t drawn = 0;
  std::int64_t emitted = 0;
  // The queue held fewer packets than were drawn.
  bool drained = false;
};

struct TamperResult {
  std::vector<PacketRecord> records;
  // Input index of each output record.
  std::vector<std::size_t> source_index;
  std::vector<TamperBucket> buckets;
  std::size_t matched = 0;
};

// Re-times the matched packets so each one-second bucket carries a count drawn
// uniformly from [lo, hi]. Packets queue from their original second onwards
// and spill into later buckets; their order is kept and each bucket spaces
// its packets evenly. Everything else is left alone.
inline TamperResult tamper(const std::vector<PacketRecord>& records, const TamperSpec& spec) {
  spec.validate();
  for (std::size_t i = 1; i < records.size(); ++i) {
    if (records[i].ts_us < records[i - 1].ts_us) throw InvalidArgument(str_cat("tamper: record ", i, " goes back in time"));
  }
  std::vector<std::size_t> matched;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (spec.match.matches(records[i])) matched.push_back(i);
  }
  if (matched.empty()) throw InvalidArgument(str_cat("tamper: no packet matches '", spec.match.text(), "'"));

  TamperResult res;
  res.matched = matched.size();
  std::vector<PacketRecord> out = records;
  Rng rng(spec.seed);
  std::size_t queued = 0, arrived = 0;
  std::int64_t second = second_of(records[matched[0]].ts_us);
  while (queued < matched.size()) {
    while (arrived < matched.size() && second_of(records[matched[arrived]].ts_us) <= second) ++arrived;
    if (arrived == queued) {
      second = second_of(records[matched[arrived]].ts_us);
      continue;
    }
    const std::int64_t drawn = rng.between(spec.lo, spec.hi);
    const auto k = std::min<std::int64_t>(drawn, static_cast<std::int64_t>(arrived - queued));
    for (std::int64_t j = 0; j < k; ++j) {
      out[matched[queued + static_cast<std::size_t>(j)]].ts_us = second * kUsPerSecond + j * kUsPerSecond / k;
    }
    res.buckets.push_back({second, drawn, k, k < drawn});
    queued += static_cast<std::size_t>(k);
    ++second;
  }

  res.source_index.resize(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) res.source_index[i] = i;
  std::stable_sort(res.source_index.begin(), res.source_index.end(),
                   [&](std::size_t a, std::size_t b) { return out[a].ts_us < out[b].ts_us; });
  res.records.reserve(out.size());
  for (std::size_t i : res.source_index) res.records.push_back(out[i]);
  return res;
}

struct RateSeries {
  std::int64_t first_second = 0;
  std::vector<std::size_t> benign;     // everything not labelled malicious
  std::vector<std::size_t> malicious;
};

inline RateSeries rate_series(const std::vector<PacketRecord>& records) {
  RateSeries rs;
  if (records.empty()) return rs;
  std::int64_t lo = records.front().ts_us, hi = lo;
  for (const auto& r : records) {
    lo = std::min(lo, r.ts_us);
    hi = std::max(hi, r.ts_us);
  }
  rs.first_second = second_of(lo);
  const auto n = static_cast<std::size_t>(second_of(hi) - rs.first_second + 1);
  rs.benign.assign(n, 0);
  rs.malicious.assign(n, 0);
  for (const auto& r : records) {
    const auto b = static_cast<std::size_t>(second_of(r.ts_us) - rs.first_second);
    (r.label == Label::malicious ? rs.malicious : rs.benign)[b] += 1;
  }
  return rs;
}

inline void write_rate_csv(std::ostream& os, const RateSeries& rs) {
  os << "second,benign,malicious\n";
  for (std::size_t i = 0; i < rs.benign.size(); ++i) {
    os << rs.first_second + static_cast<std::int64_t>(i) << ',' << rs.benign[i] << ',' << rs.malicious[i] << '\n';
  }
}

// Rate-blind toy detector: |z| of one size feature, fitted on training rows.
// With the short-decay source mean it tracks packet sizes, not rates.
class SizeZScoreModel final : public ModelAdapter {
 public:
  static constexpr const char* kFeature = "MI_dir_5_mean";

  static SizeZScoreModel train(const FeatureMatrix& x, double cut = 3.0) {
    SizeZScoreModel m;
    m.names_ = x.names;
    m.column_ = x.column_index(kFeature);
    m.cut_ = cut;
    if (x.rows() == 0) throw InvalidArgument("size_zscore: no training rows");
    double sum = 0.0, sq = 0.0;
    for (std::size_t r = 0; r < x.rows(); ++r) sum += x.values(r, m.column_);
    m.mean_ = sum / static_cast<double>(x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r) sq += (x.values(r, m.column_) - m.mean_) * (x.values(r, m.column_) - m.mean_);
    m.sd_ = std::sqrt(sq / static_cast<double>(x.rows()));
    if (m.sd_ <= 0.0) m.sd_ = 1.0;
    return m;
  }

  static SizeZScoreModel from_params(std::vector<std::string> names, double mean, double sd, double cut) {
    SizeZScoreModel m;
    m.names_ = std::move(names);
    const auto it = std::find(m.names_.begin(), m.names_.end(), kFeature);
    if (it == m.names_.end()) throw InvalidArgument(str_cat("size_zscore: feature set lacks ", kFeature));
    m.column_ = static_cast<std::size_t>(it - m.names_.begin());
    if (!(sd > 0.0)) throw InvalidArgument("size_zscore: sd must be positive");
    m.mean_ = mean, m.sd_ = sd, m.cut_ = cut;
    return m;
  }

  std::string id() const override { return "size_zscore"; }
  const std::vector<std::string>& feature_names() const override { return names_; }
  double threshold() const override { return cut_; }
  double mean() const { return mean_; }
  double sd() const { return sd_; }

 protected:
  std::vector<double> score_rows(const Matrix& x) const override {
    std::vector<double> out(x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r) out[r] = std::abs(x(r, column_) - mean_) / sd_;
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::size_t column_ = 0;
  double mean_ = 0.0, sd_ = 1.0, cut_ = 3.0;
};

// Fresh model from the leading training rows of one trace.
using Trainer = std::function<std::unique_ptr<ModelAdapter>(const FeatureMatrix& train)>;

struct NamedTrace {
  std::string name;
  std::vector<PacketRecord> records;
  // Band the trace was tampered to; empty for the original.
  std::optional<std::pair<std::int64_t, std::int64_t>> band;
};

struct BiasParams {
  std::size_t train_rows = 0;
  PacketPredicate attack = PacketPredicate::parse("label=malicious");
  // A tampered trace whose mean attack score falls by more than this share
  // of the original's marks the detector as rate-dependent.
  double drop_threshold = 0.1;
};

struct TraceScores {
  std::string name;
  std::string model_id;
  std::optional<std::pair<std::int64_t, std::int64_t>> band;
  std::vector<double> scores;
  RateSeries rates;
  std::vector<std::size_t> attack_positions;
  double threshold = 0.0;
  double mean_attack_score = 0.0;
  double fraction_below_threshold = 0.0;
};

struct BiasReport {
  std::string model_id;
  std::vector<TraceScores> traces;  // original first
  // Per tampered trace: (expected from the original run, predicted) for the
  // k-th attack packet.
  std::vector<std::vector<std::pair<double, double>>> pairs;
  bool vulnerable = false;
  // Mean attack score weakly increases with band height.
  bool monotone = false;
  std::string verdict;
};

inline TraceScores score_trace(const Trainer& trainer, const NamedTrace& trace, const BiasParams& params) {
  TraceScores ts;
  ts.name = trace.name;
  ts.band = trace.band;
  const FeatureMatrix fm = extract_features(trace.records);
  if (fm.rows() < params.train_rows || params.train_rows == 0) {
    throw InvalidArgument(str_cat("bias: trace '", trace.name, "' has ", fm.rows(), " rows, training needs ",
                                  params.train_rows));
  }
  std::unique_ptr<ModelAdapter> model;
  try {
    model = trainer(fm.slice(0, params.train_rows));
  } catch (const std::exception& e) {
    throw Error(str_cat("bias: training failed on trace '", trace.name, "': ", e.what()));
  }
  ts.model_id = model->id();
  ts.scores = model->score(fm);
  ts.threshold = model->threshold();
  ts.rates = rate_series(trace.records);
  double sum = 0.0;
  std::size_t below = 0;
  for (std::size_t i = 0; i < trace.records.size(); ++i) {
    if (!params.attack.matches(trace.records[i])) continue;
    ts.attack_positions.push_back(i);
    sum += ts.scores[i];
    below += ts.scores[i] < ts.threshold ? 1 : 0;
  }
  if (ts.attack_positions.empty()) throw InvalidArgument(str_cat("bias: trace '", trace.name, "' has no attack packets"));
  const auto n = static_cast<double>(ts.attack_positions.size());
  ts.mean_attack_score = sum / n;
  ts.fraction_below_threshold = static_cast<double>(below) / n;
  return ts;
}

// First trace is the original; the rest are its tampered versions.
inline BiasReport bias_experiment(const Trainer& trainer, const std::vector<NamedTrace>& traces,
                                  const BiasParams& params) {
  if (traces.size() < 2) throw InvalidArgument("bias: need the original trace and at least one tampered trace");
  BiasReport rep;
  for (const auto& t : traces) rep.traces.push_back(score_trace(trainer, t, params));
  const auto& orig = rep.traces.front();
  rep.model_id = orig.model_id;
  for (std::size_t k = 1; k < rep.traces.size(); ++k) {
    const auto& tt = rep.traces[k];
    if (tt.attack_positions.size() != orig.attack_positions.size()) {
      throw InvalidArgument(str_cat("bias: trace '", tt.name, "' has ", tt.attack_positions.size(),
                                    " attack packets, the original has ", orig.attack_positions.size()));
    }
    std::vector<std::pair<double, double>> p;
    p.reserve(orig.attack_positions.size());
    for (std::size_t i = 0; i < orig.attack_positions.size(); ++i) {
      p.emplace_back(orig.scores[orig.attack_positions[i]], tt.scores[tt.attack_positions[i]]);
    }
    rep.pairs.push_back(std::move(p));
    if (tt.mean_attack_score < orig.mean_attack_score * (1.0 - params.drop_threshold)) rep.vulnerable = true;
  }

  // Order tampered traces by band midpoint, or by their busiest attack second
  // when no band was recorded.
  auto height = [](const TraceScores& t) {
    if (t.band) return 0.5 * static_cast<double>(t.band->first + t.band->second);
    std::size_t peak = 0;
    for (std::size_t c : t.rates.malicious) peak = std::max(peak, c);
    return static_cast<double>(peak);
  };
  std::vector<const TraceScores*> order;
  for (std::size_t k = 1; k < rep.traces.size(); ++k) order.push_back(&rep.traces[k]);
  std::stable_sort(order.begin(), order.end(), [&](auto* a, auto* b) { return height(*a) < height(*b); });
  rep.monotone = true;
  for (std::size_t k = 1; k < order.size(); ++k) {
    if (order[k]->mean_attack_score < order[k - 1]->mean_attack_score) rep.monotone = false;
  }
  rep.verdict = rep.vulnerable ? "vulnerable" : "not vulnerable";
  return rep;
}

// Tampers `base` once per spec and runs the experiment on all of them.
inline BiasReport bias_experiment(const Trainer& trainer, const std::vector<PacketRecord>& base,
                                  const std::vector<TamperSpec>& specs, const BiasParams& params) {
  std::vector<NamedTrace> traces{{"original", base, std::nullopt}};
  for (const auto& s : specs) traces.push_back({"band_" + s.band(), tamper(base, s).records, std::pair{s.lo, s.hi}});
  return bias_experiment(trainer, traces, params);
}

inline void write_bias_scores_csv(std::ostream& os, const BiasReport& rep) {
  os << "trace,packet,score\n";
  for (const auto& t : rep.traces) {
    for (std::size_t i = 0; i < t.scores.size(); ++i) os << t.name << ',' << i << ',' << format_double(t.scores[i]) << '\n';
  }
}

inline void write_bias_pairs_csv(std::ostream& os, const BiasReport& rep) {
  os << "trace,attack_packet,expected,predicted\n";
  for (std::size_t k = 0; k < rep.pairs.size(); ++k) {
    for (std::size_t i = 0; i < rep.pairs[k].size(); ++i) {
      os << rep.traces[k + 1].name << ',' << i << ',' << format_double(rep.pairs[k][i].first) << ','
         << format_double(rep.pairs[k][i].second) << '\n';
    }
  }
}

inline void write_bias_summary(std::ostream& os, const BiasReport& rep) {
  os << "model: " << rep.model_id << '\n';
  for (const auto& t : rep.traces) {
    os << t.name << ": mean attack score " << format_double(t.mean_attack_score) << ", below threshold "
       << format_double(t.fraction_below_threshold) << " of " << t.attack_positions.size() << " attack packets\n";
  }
  os << "monotone in band: " << (rep.monotone ? "yes" : "no") << '\n';
  os << "verdict: " << rep.verdict << '\n';
}

}  // namespace nids_xray
