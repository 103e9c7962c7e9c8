#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "nids_xray/matrix.hpp"
#include "nids_xray/packet.hpp"

namespace nids_xray {

// Decay factors; every feature name carries one of these.
inline constexpr std::array<double, 5> kDecayFactors{5.0, 3.0, 1.0, 0.1, 0.01};
inline constexpr std::array<std::string_view, 5> kDecayNames{"5", "3", "1", "0.1", "0.01"};
inline constexpr std::size_t kFeatureCount = 115;

struct DisDiagnostics {
  std::size_t backwards_time = 0;
  std::size_t evicted_keys = 0;
};

// Decayed weight, mean and centred second moment of one value stream. Keeping
// the moment centred avoids the cancellation of sum-of-squares minus squared
// mean on low-variance streams of large values.
struct DampedStat {
  double lambda = 1.0;
  double w = 0.0;
  double mu = 0.0;
  double m2 = 0.0;
  double t_last = 0.0;
  // Deviation from the mean at the last insert, and when it was taken.
  double last_residual = 0.0;
  double t_residual = 0.0;
  bool started = false;

  // Decays the sums forward to t and returns the factor applied.
  double decay_to(double t) {
    if (!started) {
      t_last = t;
      started = true;
      return 1.0;
    }
    const double dt = t - t_last;
    if (dt <= 0.0) return 1.0;
    const double gamma = std::exp2(-lambda * dt);
    w *= gamma;
    m2 *= gamma;
    t_last = t;
    return gamma;
  }

  double weight() const { return w; }
  double mean() const { return w > 0.0 ? mu : 0.0; }
  double linear_sum() const { return mu * w; }
  double variance() const { return w > 0.0 ? std::max(0.0, m2 / w) : 0.0; }
  double std_dev() const { return std::sqrt(variance()); }

  // Residual decayed forward to time t.
  double residual_at(double t) const {
    if (t <= t_residual) return last_residual;
    return last_residual * std::exp2(-lambda * (t - t_residual));
  }
};

inline DampedStat make_stat(double lambda) {
  DampedStat s;
  s.lambda = lambda;
  return s;
}

inline DampedStat& insert_1d(DampedStat& stat, double v, double t, DisDiagnostics* diag = nullptr) {
  if (stat.started && t < stat.t_last) {
    t = stat.t_last;
    if (diag) ++diag->backwards_time;
  }
  stat.decay_to(t);
  // weighted Welford step; the earlier mass already carries its decay.
  // delta^2 * w_old / w_new rather than delta * (v - new mean), which cancels
  // when the old mass is nearly gone.
  const double w_old = stat.w;
  stat.w += 1.0;
  const double delta = v - stat.mu;
  stat.mu += delta / stat.w;
  stat.m2 += delta * delta * (w_old / stat.w);
  // v - new mean, without the cancellation
  stat.last_residual = delta * (w_old / stat.w);
  stat.t_residual = t;
  return stat;
}

// Decayed sum of residual products shared by the two directions of a stream
// pair.
struct ResidualProduct {
  double sr = 0.0;
  double t_last = 0.0;
  bool started = false;
};

struct PairStats {
  double magnitude = 0.0;
  double radius = 0.0;
  double covariance = 0.0;
  double pcc = 0.0;
};

inline PairStats pair_stats(const DampedStat& si, const DampedStat& sj, const ResidualProduct& rp) {
  PairStats out;
  const double mi = si.mean(), mj = sj.mean();
  const double vi = si.variance(), vj = sj.variance();
  out.magnitude = std::sqrt(mi * mi + mj * mj);
  out.radius = std::sqrt(vi * vi + vj * vj);
  const double wsum = si.w + sj.w;
  out.covariance = wsum > 0.0 ? rp.sr / wsum : 0.0;
  const double denom = std::sqrt(vi) * std::sqrt(vj);
  out.pcc = denom > 0.0 ? std::clamp(out.covariance / denom, -1.0, 1.0) : 0.0;
  return out;
}

// Inserts v into stream i (the direction carrying the packet), decays the
// reverse stream j to the same instant and accumulates the residual product
// against j's last residual.
inline PairStats insert_2d(DampedStat& si, DampedStat& sj, ResidualProduct& rp, double v, double t,
                           DisDiagnostics* diag = nullptr) {
  if (si.started && t < si.t_last) {
    t = si.t_last;
    if (diag) ++diag->backwards_time;
  }
  insert_1d(si, v, t, diag);
  if (sj.started) sj.decay_to(t);
  if (!rp.started) {
    rp.started = true;
    rp.t_last = t;
  } else if (t > rp.t_last) {
    rp.sr *= std::exp2(-si.lambda * (t - rp.t_last));
    rp.t_last = t;
  }
  if (sj.started) rp.sr += si.last_residual * sj.residual_at(t);
  return pair_stats(si, sj, rp);
}

enum class StatFamily : std::uint8_t { mi_dir, h, hh, hh_jit, hphp };

inline constexpr std::array<StatFamily, 5> kFamilies{StatFamily::mi_dir, StatFamily::h, StatFamily::hh,
                                                     StatFamily::hh_jit, StatFamily::hphp};

inline std::string_view family_name(StatFamily f) {
  switch (f) {
    case StatFamily::mi_dir: return "MI_dir";
    case StatFamily::h: return "H";
    case StatFamily::hh: return "HH";
    case StatFamily::hh_jit: return "HH_jit";
    case StatFamily::hphp: return "HpHp";
  }
  return "";
}

inline bool is_pair_family(StatFamily f) { return f == StatFamily::hh || f == StatFamily::hphp; }

// Canonical column names: family-major, decay-minor, statistic-minor.
inline const std::vector<std::string>& feature_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (StatFamily f : kFamilies) {
      for (std::string_view lam : kDecayNames) {
        const std::string prefix = str_cat(family_name(f), "_", lam, "_");
        if (is_pair_family(f)) {
          for (const char* s : {"weight_0", "mean_0", "std_0", "magnitude_0_1", "radius_0_1", "covariance_0_1",
                                "pcc_0_1"}) {
            out.push_back(prefix + s);
          }
        } else {
          for (const char* s : {"weight", "mean", "std"}) out.push_back(prefix + s);
        }
      }
    }
    return out;
  }();
  return names;
}

// Streaming extractor holding the per-key statistics. Single writer: rows
// depend on packet order.
class FeatureExtractor {
 public:
  FeatureExtractor() = default;

  // Inserts the packet into every one of its keys and writes the 115
  // features read out afterwards.
  void process(const PacketRecord& p, std::span<double> row) {
    if (row.size() != kFeatureCount) throw InvalidArgument("feature row must have 115 entries");
    const double t = p.ts();
    const double size = static_cast<double>(p.frame_len);
    const std::string src_host = host_key(p.src_ip, p.src_mac);
    const std::string dst_host = host_key(p.dst_ip, p.dst_mac);
    std::size_t col = 0;

    // MI_dir: source MAC + source IP.
    {
      std::string key(reinterpret_cast<const char*>(p.src_mac.data()), 6);
      key += src_host;
      auto& e = touch(mi_dir_, key, t);
      for (std::size_t l = 0; l < 5; ++l) {
        insert_1d(e.stats[l], size, t, &diag_);
        write_1d(e.stats[l], row, col);
      }
    }
    // H: source host.
    {
      auto& e = touch(host_, src_host, t);
      for (std::size_t l = 0; l < 5; ++l) {
        insert_1d(e.stats[l], size, t, &diag_);
        write_1d(e.stats[l], row, col);
      }
    }
    // HH: host pair, both directions.
    const std::string hh_fwd = pair_key(src_host, dst_host);
    const std::string hh_rev = pair_key(dst_host, src_host);
    process_pair(hh_, hh_fwd, hh_rev, size, t, row, col);
    // HH_jit: inter-arrival gap of the directed host pair.
    {
      const bool fresh = !jitter_.contains(hh_fwd);
      auto& e = touch(jitter_, hh_fwd, t);
      const double gap = fresh ? 0.0 : std::max(0.0, t - e.last_arrival);
      e.last_arrival = t;
      for (std::size_t l = 0; l < 5; ++l) {
        insert_1d(e.stats[l], gap, t, &diag_);
        write_1d(e.stats[l], row, col);
      }
    }
    // HpHp: socket pair.
    const std::string src_sock = socket_key(src_host, p.src_port);
    const std::string dst_sock = socket_key(dst_host, p.dst_port);
    process_pair(hphp_, pair_key(src_sock, dst_sock), pair_key(dst_sock, src_sock), size, t, row, col);

    if (++since_sweep_ >= kSweepInterval) {
      since_sweep_ = 0;
      evict_idle(t);
    }
  }

  const DisDiagnostics& diagnostics() const { return diag_; }

  // Idle keys are dropped once even the slowest decay has shrunk their mass
  // below 2^-64.
  static double eviction_horizon() { return 2.0 / kDecayFactors.back() * std::log(2.0) * 64.0; }

 private:
  struct Entry {
    std::array<DampedStat, 5> stats;
    double last_seen = 0.0;
    double last_arrival = 0.0;
    Entry() {
      for (std::size_t l = 0; l < 5; ++l) stats[l] = make_stat(kDecayFactors[l]);
    }
  };
  struct PairEntry {
    std::array<ResidualProduct, 5> products;
    double last_seen = 0.0;
  };
  using Store = std::unordered_map<std::string, Entry>;

  static constexpr std::size_t kSweepInterval = 4096;

  static std::string host_key(const IpAddr& ip, const MacAddr& mac) {
    if (!ip.empty()) return std::string(reinterpret_cast<const char*>(ip.bytes.data()), ip.size());
    return std::string("M") + std::string(reinterpret_cast<const char*>(mac.data()), 6);
  }
  static std::string pair_key(const std::string& a, const std::string& b) {
    std::string k;
    k.reserve(a.size() + b.size() + 1);
    k += a;
    k += '|';
    k += b;
    return k;
  }
  static std::string socket_key(const std::string& host, std::uint16_t port) {
    std::string k = host;
    k += static_cast<char>(port >> 8);
    k += static_cast<char>(port & 0xff);
    return k;
  }

  template <typename Map>
  static typename Map::mapped_type& touch(Map& store, const std::string& key, double t) {
    auto& e = store[key];
    e.last_seen = t;
    return e;
  }

  static void write_1d(const DampedStat& s, std::span<double> row, std::size_t& col) {
    row[col++] = s.weight();
    row[col++] = s.mean();
    row[col++] = s.std_dev();
  }

  void process_pair(Store& store, const std::string& fwd, const std::string& rev, double v, double t,
                    std::span<double> row, std::size_t& col) {
    auto& ei = touch(store, fwd, t);
    // The reverse direction may not exist yet; a detached zero stat stands in
    // without creating an entry.
    auto it = store.find(rev);
    Entry* ej = it == store.end() ? nullptr : &it->second;
    Entry scratch;
    if (fwd == rev) ej = nullptr;
    auto& pe = touch(products_, fwd < rev ? fwd : rev, t);
    for (std::size_t l = 0; l < 5; ++l) {
      DampedStat& sj = ej ? ej->stats[l] : scratch.stats[l];
      const PairStats ps = insert_2d(ei.stats[l], sj, pe.products[l], v, t, &diag_);
      write_1d(ei.stats[l], row, col);
      row[col++] = ps.magnitude;
      row[col++] = ps.radius;
      row[col++] = ps.covariance;
      row[col++] = ps.pcc;
    }
  }

  void evict_idle(double now) {
    const double horizon = eviction_horizon();
    auto sweep = [&](auto& store) {
      for (auto it = store.begin(); it != store.end();) {
        if (now - it->second.last_seen > horizon) {
          it = store.erase(it);
          ++diag_.evicted_keys;
        } else {
          ++it;
        }
      }
    };
    sweep(mi_dir_);
    sweep(host_);
    sweep(hh_);
    sweep(jitter_);
    sweep(hphp_);
    sweep(products_);
  }

  Store mi_dir_, host_, hh_, jitter_, hphp_;
  std::unordered_map<std::string, PairEntry> products_;
  std::size_t since_sweep_ = 0;
  DisDiagnostics diag_;
};

inline FeatureMatrix extract_features(const std::vector<PacketRecord>& packets, DisDiagnostics* diag = nullptr) {
  FeatureExtractor fx;
  FeatureMatrix fm;
  fm.names = feature_names();
  fm.values = Matrix(packets.size(), kFeatureCount);
  fm.labels.reserve(packets.size());
  for (std::size_t i = 0; i < packets.size(); ++i) {
    fx.process(packets[i], fm.values.row(i));
    fm.labels.push_back(static_cast<int>(packets[i].label));
  }
  if (diag) *diag = fx.diagnostics();
  return fm;
}

}  // namespace nids_xray
