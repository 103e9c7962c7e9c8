#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <vector>

#include "nids_xray/packet.hpp"

namespace nids_xray {

// Benign Poisson traffic among a few hosts and some constant-size heartbeat
// sensors, plus one ARP flood from an infected device that sends nothing else.
// The sensors' frames match the flood's size, so frame size alone does not
// give the attack away.
struct SyntheticParams {
  double duration_s = 600.0;
  double benign_pps = 50.0;
  std::size_t hosts = 8;
  std::size_t sensors = 4;
  double sensor_pps = 1.0;
  double attack_start_s = 240.0;
  double attack_pps = 5000.0;
  std::size_t attack_packets = 5000;
  std::size_t attack_targets = 4;
  std::uint64_t seed = 7;
};

namespace detail {
inline MacAddr host_mac(std::uint8_t tag, std::uint8_t id) { return {0x02, 0x00, 0x5e, 0x10, tag, id}; }
inline IpAddr host_ip(std::uint8_t a, std::uint8_t b) { return IpAddr::v4(192, 168, a, b); }
}  // namespace detail

inline std::vector<PacketRecord> synthetic_trace(const SyntheticParams& p = {}) {
  if (p.hosts < 2) throw InvalidArgument("synthetic: need at least two hosts");
  if (p.benign_pps <= 0.0 || p.attack_pps <= 0.0) throw InvalidArgument("synthetic: rates must be positive");
  Rng rng(p.seed);
  std::vector<PacketRecord> out;

  // Servers sit at .1 and .2; clients at .10 onwards.
  const std::array<std::uint16_t, 4> services{80, 443, 53, 123};
  const std::array<std::uint32_t, 6> sizes{64, 90, 128, 576, 1000, 1500};
  Rng benign = rng.fork(1);
  double t = 0.0;
  while (true) {
    t += benign.exponential(p.benign_pps);
    if (t >= p.duration_s) break;
    PacketRecord r;
    r.ts_us = seconds_to_us(t);
    const auto client = static_cast<std::uint8_t>(benign.below(p.hosts));
    const auto server = static_cast<std::uint8_t>(benign.below(2));
    const std::uint16_t svc = services[benign.below(services.size())];
    const bool outbound = benign.uniform() < 0.5;
    r.proto = (svc == 53 || svc == 123) ? Proto::udp : Proto::tcp;
    const MacAddr cm = detail::host_mac(1, client), sm = detail::host_mac(2, server);
    const IpAddr ci = detail::host_ip(1, static_cast<std::uint8_t>(10 + client));
    const IpAddr si = detail::host_ip(1, static_cast<std::uint8_t>(1 + server));
    const auto eph = static_cast<std::uint16_t>(40000 + client * 16 + benign.below(16));
    if (outbound) {
      r.src_mac = cm, r.dst_mac = sm, r.src_ip = ci, r.dst_ip = si, r.src_port = eph, r.dst_port = svc;
    } else {
      r.src_mac = sm, r.dst_mac = cm, r.src_ip = si, r.dst_ip = ci, r.src_port = svc, r.dst_port = eph;
    }
    const double jitter = 1.0 + 0.1 * (benign.uniform() - 0.5);
    r.frame_len = static_cast<std::uint32_t>(std::max(60.0, sizes[benign.below(sizes.size())] * jitter));
    r.label = Label::benign;
    out.push_back(r);
  }

  Rng sensor = rng.fork(3);
  for (std::size_t k = 0; k < p.sensors; ++k) {
    const auto id = static_cast<std::uint8_t>(k);
    for (double ts = sensor.exponential(p.sensor_pps); ts < p.duration_s; ts += sensor.exponential(p.sensor_pps)) {
      PacketRecord r;
      r.ts_us = seconds_to_us(ts);
      r.proto = Proto::udp;
      r.src_mac = detail::host_mac(3, id);
      r.dst_mac = detail::host_mac(2, 0);
      r.src_ip = detail::host_ip(1, static_cast<std::uint8_t>(100 + id));
      r.dst_ip = detail::host_ip(1, 1);
      r.src_port = 5683;
      r.dst_port = 5683;
      r.frame_len = 60;
      r.label = Label::benign;
      out.push_back(r);
    }
  }

  Rng attack = rng.fork(2);
  const MacAddr bot_mac = detail::host_mac(9, 1);
  const IpAddr bot_ip = detail::host_ip(1, 200);
  const double gap = 1.0 / p.attack_pps;
  for (std::size_t i = 0; i < p.attack_packets; ++i) {
    PacketRecord r;
    r.ts_us = seconds_to_us(p.attack_start_s + static_cast<double>(i) * gap + 0.25 * gap * attack.uniform());
    r.proto = Proto::arp;
    r.src_mac = bot_mac;
    r.dst_mac = MacAddr{0xff, 0xff, 0xff, 0xff, 0xff, 0xff};
    r.src_ip = bot_ip;
    r.dst_ip = detail::host_ip(1, static_cast<std::uint8_t>(10 + attack.below(p.attack_targets)));
    r.frame_len = 60;
    r.label = Label::malicious;
    out.push_back(r);
  }
  std::stable_sort(out.begin(), out.end(), [](const PacketRecord& a, const PacketRecord& b) { return a.ts_us < b.ts_us; });
  return out;
}

}  // namespace nids_xray
