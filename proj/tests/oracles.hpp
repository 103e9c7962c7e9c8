#pragma once

// Independent reference computations used by the unit and acceptance tests.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include <unistd.h>

#include "nids_xray/nids_xray.hpp"

namespace oracle {

using namespace nids_xray;

// Scratch directory removed on scope exit.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() /
           str_cat("nxray_", tag, "_", ::getpid(), "_", counter++);
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::filesystem::path operator/(const std::string& name) const { return path / name; }
  static std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  }
};

inline bool close(double a, double b, double rel) {
  return std::abs(a - b) <= rel * std::max({1.0, std::abs(a), std::abs(b)});
}

inline PacketRecord packet(double t, std::uint8_t src, std::uint8_t dst, Proto proto = Proto::udp,
                           std::uint16_t sport = 1000, std::uint16_t dport = 2000, std::uint32_t len = 100,
                           Label label = Label::benign) {
  PacketRecord p;
  p.ts_us = seconds_to_us(t);
  p.src_mac = {2, 0, 0, 0, 0, src};
  p.dst_mac = {2, 0, 0, 0, 0, dst};
  p.src_ip = IpAddr::v4(10, 0, 0, src);
  p.dst_ip = IpAddr::v4(10, 0, 0, dst);
  p.proto = proto;
  if (has_ports(proto)) {
    p.src_port = sport;
    p.dst_port = dport;
  }
  p.frame_len = len;
  p.label = label;
  return p;
}

// Random IPv4 TCP/UDP trace among `hosts` hosts, never self-addressed.
inline std::vector<PacketRecord> random_trace(std::size_t n, std::uint64_t seed, std::size_t hosts = 20,
                                              double pps = 100.0) {
  Rng rng(seed);
  std::vector<PacketRecord> out;
  double t = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    t += rng.exponential(pps);
    const auto a = static_cast<std::uint8_t>(1 + rng.below(hosts));
    auto b = static_cast<std::uint8_t>(1 + rng.below(hosts - 1));
    if (b >= a) ++b;
    const Proto proto = rng.below(2) ? Proto::tcp : Proto::udp;
    const auto sp = static_cast<std::uint16_t>(1000 + rng.below(3));
    const auto dp = static_cast<std::uint16_t>(80 + rng.below(2));
    const bool reply = rng.below(2);
    out.push_back(reply ? packet(t, b, a, proto, dp, sp, static_cast<std::uint32_t>(60 + rng.below(1441)))
                        : packet(t, a, b, proto, sp, dp, static_cast<std::uint32_t>(60 + rng.below(1441))));
  }
  return out;
}

// Decayed weight, mean and variance of a stream recomputed from its whole
// history at time T, two-pass in extended precision.
struct Sums {
  double w = 0, mu = 0, v = 0;
  long double mu_exact = 0;
  double mean() const { return w > 0 ? mu : 0.0; }
  double var() const { return w > 0 ? v : 0.0; }
};

struct Event {
  double t;
  double v;
  int side;  // 0 forward, 1 reverse
};

inline Sums sums_at(const std::vector<Event>& ev, std::size_t upto, int side, double lambda, double T) {
  long double w = 0, ls = 0;
  for (std::size_t k = 0; k < upto; ++k) {
    if (ev[k].side != side) continue;
    const long double g = std::exp2(-lambda * (T - ev[k].t));
    w += g;
    ls += g * ev[k].v;
  }
  Sums s;
  if (w <= 0) return s;
  const long double mu = ls / w;
  long double c2 = 0;
  for (std::size_t k = 0; k < upto; ++k) {
    if (ev[k].side != side) continue;
    const long double d = ev[k].v - mu;
    c2 += std::exp2(-lambda * (T - ev[k].t)) * d * d;
  }
  s.w = static_cast<double>(w);
  s.mu = static_cast<double>(mu);
  s.mu_exact = mu;
  s.v = static_cast<double>(c2 / w);
  return s;
}

// Pair statistics straight from the definitions: the residual of each insert
// is its value minus its side's mean right after the insert; the product sum
// pairs it with the other side's latest residual decayed to that instant.
inline std::array<double, 7> pair_at(const std::vector<Event>& ev, double lambda) {
  const std::size_t n = ev.size();
  const double T = ev.back().t;
  std::vector<double> resid(n);
  for (std::size_t k = 0; k < n; ++k) resid[k] = static_cast<double>(ev[k].v - sums_at(ev, k + 1, ev[k].side, lambda, ev[k].t).mu_exact);
  double sr = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    std::ptrdiff_t last = -1;
    for (std::size_t q = 0; q < k; ++q) {
      if (ev[q].side != ev[k].side) last = static_cast<std::ptrdiff_t>(q);
    }
    if (last < 0) continue;
    const auto& e = ev[static_cast<std::size_t>(last)];
    const double r_other = resid[static_cast<std::size_t>(last)] * std::exp2(-lambda * (ev[k].t - e.t));
    sr += std::exp2(-lambda * (T - ev[k].t)) * resid[k] * r_other;
  }
  const int me = ev.back().side;
  const Sums si = sums_at(ev, n, me, lambda, T), sj = sums_at(ev, n, 1 - me, lambda, T);
  const double cov = (si.w + sj.w) > 0 ? sr / (si.w + sj.w) : 0.0;
  const double den = std::sqrt(si.var()) * std::sqrt(sj.var());
  return {si.w,
          si.mean(),
          std::sqrt(si.var()),
          std::sqrt(si.mean() * si.mean() + sj.mean() * sj.mean()),
          std::sqrt(si.var() * si.var() + sj.var() * sj.var()),
          cov,
          den > 0 ? std::clamp(cov / den, -1.0, 1.0) : 0.0};
}

// Full 115-column feature rows, each recomputed from the complete history of
// the packet's streams (IPv4 traces without self-addressed packets).
inline Matrix dis_features(const std::vector<PacketRecord>& trace) {
  Matrix out(trace.size(), kFeatureCount);
  std::map<std::string, std::vector<Event>> mi, host, jit, hh, hphp;
  std::map<std::string, double> last_arrival;
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const auto& p = trace[i];
    const double t = p.ts();
    const double v = p.frame_len;
    const std::string src = to_string(p.src_ip), dst = to_string(p.dst_ip);
    const std::string mi_key = to_string(p.src_mac) + "/" + src;
    mi[mi_key].push_back({t, v, 0});
    host[src].push_back({t, v, 0});
    const std::string dir = src + ">" + dst;
    const double gap = last_arrival.contains(dir) ? t - last_arrival[dir] : 0.0;
    last_arrival[dir] = t;
    jit[dir].push_back({t, gap, 0});
    const std::string pair = std::min(src, dst) + "|" + std::max(src, dst);
    hh[pair].push_back({t, v, src < dst ? 0 : 1});
    const std::string ss = src + ":" + std::to_string(p.src_port), ds = dst + ":" + std::to_string(p.dst_port);
    const std::string sock = std::min(ss, ds) + "|" + std::max(ss, ds);
    hphp[sock].push_back({t, v, ss < ds ? 0 : 1});

    std::size_t col = 0;
    auto one = [&](const std::vector<Event>& ev) {
      for (double lam : kDecayFactors) {
        const Sums s = sums_at(ev, ev.size(), 0, lam, t);
        out(i, col++) = s.w;
        out(i, col++) = s.mean();
        out(i, col++) = std::sqrt(s.var());
      }
    };
    auto two = [&](const std::vector<Event>& ev) {
      for (double lam : kDecayFactors) {
        for (double x : pair_at(ev, lam)) out(i, col++) = x;
      }
    };
    one(mi[mi_key]);
    one(host[src]);
    two(hh[pair]);
    one(jit[dir]);
    two(hphp[sock]);
  }
  return out;
}

// A CART tree fitted to random targets on random data, as a black box.
inline TreeModel random_tree_model(std::size_t m, std::uint64_t seed, std::size_t rows = 200) {
  Rng rng(seed);
  Matrix x(rows, m);
  std::vector<double> y(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < m; ++c) x(r, c) = std::round(rng.uniform(0.0, 10.0));
    y[r] = rng.uniform(-1.0, 1.0);
  }
  CartParams p;
  p.max_depth = 6;
  p.min_leaf = 5;
  std::vector<std::string> names;
  for (std::size_t c = 0; c < m; ++c) names.push_back("f" + std::to_string(c));
  return TreeModel(fit_cart(x, y, p, names), names, "random_tree");
}

inline Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double lo = 0.0, double hi = 10.0) {
  Matrix x(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) x(r, c) = std::round(rng.uniform(lo, hi));
  }
  return x;
}

// Benign background traffic plus 10^4 attack packets inside two seconds.
inline std::vector<PacketRecord> tamper_fixture(std::uint64_t seed = 3) {
  Rng rng(seed);
  std::vector<PacketRecord> out;
  for (double t = 0.0; t < 40.0; t += rng.exponential(20.0)) out.push_back(packet(t, 1, 2, Proto::tcp, 4000, 80, 500));
  for (std::size_t i = 0; i < 10000; ++i) {
    out.push_back(packet(10.0 + 2.0 * static_cast<double>(i) / 10000.0, 9, 3, Proto::arp, 0, 0, 60, Label::malicious));
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.ts_us < b.ts_us; });
  return out;
}

// Attack counts per second recounted from the output trace.
inline std::map<std::int64_t, std::size_t> attack_counts(const std::vector<PacketRecord>& trace,
                                                         const PacketPredicate& pred) {
  std::map<std::int64_t, std::size_t> c;
  for (const auto& p : trace) {
    if (pred.matches(p)) ++c[second_of(p.ts_us)];
  }
  return c;
}

// Non-timestamp fields as a sortable key, for multiset comparisons.
inline std::vector<std::string> field_multiset(const std::vector<PacketRecord>& trace) {
  std::vector<std::string> keys;
  for (auto p : trace) {
    p.ts_us = 0;
    keys.push_back(str_cat(to_string(p.src_mac), to_string(p.dst_mac), to_string(p.src_ip), to_string(p.dst_ip),
                           to_string(p.proto), p.src_port, p.dst_port, p.frame_len, to_string(p.label)));
  }
  std::sort(keys.begin(), keys.end());
  return keys;
}

}  // namespace oracle
