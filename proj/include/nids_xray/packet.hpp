#pragma once

#include <arpa/inet.h>

#include <array>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "nids_xray/common.hpp"

namespace nids_xray {

using MacAddr = std::array<std::uint8_t, 6>;

inline std::string to_string(const MacAddr& mac) {
  char buf[18];
  std::snprintf(buf, sizeof buf, "%02x:%02x:%02x:%02x:%02x:%02x", mac[0], mac[1], mac[2], mac[3],
                mac[4], mac[5]);
  return buf;
}

inline MacAddr parse_mac(std::string_view text) {
  const auto parts = split(trim(text), ':');
  if (parts.size() != 6) throw FormatError(str_cat("bad MAC address '", text, "'"));
  MacAddr mac{};
  for (std::size_t i = 0; i < 6; ++i) {
    if (parts[i].size() != 2) throw FormatError(str_cat("bad MAC address '", text, "'"));
    char* end = nullptr;
    const long byte = std::strtol(parts[i].c_str(), &end, 16);
    if (end != parts[i].c_str() + 2) throw FormatError(str_cat("bad MAC address '", text, "'"));
    mac[i] = static_cast<std::uint8_t>(byte);
  }
  return mac;
}

// IPv4 or IPv6 address; an empty address marks frames without a network
// layer we understand.
struct IpAddr {
  enum class Family : std::uint8_t { none = 0, v4 = 4, v6 = 6 };

  Family family = Family::none;
  std::array<std::uint8_t, 16> bytes{};

  static IpAddr v4(std::uint8_t a, std::uint8_t b, std::uint8_t c, std::uint8_t d) {
    IpAddr ip;
    ip.family = Family::v4;
    ip.bytes[0] = a;
    ip.bytes[1] = b;
    ip.bytes[2] = c;
    ip.bytes[3] = d;
    return ip;
  }

  bool empty() const { return family == Family::none; }
  std::size_t size() const { return family == Family::v4 ? 4 : family == Family::v6 ? 16 : 0; }

  friend bool operator==(const IpAddr&, const IpAddr&) = default;
};

inline std::string to_string(const IpAddr& ip) {
  char buf[INET6_ADDRSTRLEN] = {0};
  switch (ip.family) {
    case IpAddr::Family::none:
      return {};
    case IpAddr::Family::v4:
      inet_ntop(AF_INET, ip.bytes.data(), buf, sizeof buf);
      return buf;
    case IpAddr::Family::v6:
      inet_ntop(AF_INET6, ip.bytes.data(), buf, sizeof buf);
      return buf;
  }
  return {};
}

inline IpAddr parse_ip(std::string_view text) {
  const std::string s = trim(text);
  IpAddr ip;
  if (s.empty()) return ip;
  if (inet_pton(AF_INET, s.c_str(), ip.bytes.data()) == 1) {
    ip.family = IpAddr::Family::v4;
  } else if (inet_pton(AF_INET6, s.c_str(), ip.bytes.data()) == 1) {
    ip.family = IpAddr::Family::v6;
  } else {
    throw FormatError(str_cat("bad IP address '", s, "'"));
  }
  return ip;
}

enum class Proto : std::uint8_t { tcp, udp, icmp, arp, other };

inline std::string_view to_string(Proto p) {
  switch (p) {
    case Proto::tcp: return "TCP";
    case Proto::udp: return "UDP";
    case Proto::icmp: return "ICMP";
    case Proto::arp: return "ARP";
    case Proto::other: return "OTHER";
  }
  return "OTHER";
}

inline Proto parse_proto(std::string_view text) {
  const std::string s = trim(text);
  if (s == "TCP" || s == "tcp") return Proto::tcp;
  if (s == "UDP" || s == "udp") return Proto::udp;
  if (s == "ICMP" || s == "icmp") return Proto::icmp;
  if (s == "ARP" || s == "arp") return Proto::arp;
  if (s == "OTHER" || s == "other") return Proto::other;
  throw FormatError(str_cat("unknown protocol '", s, "'"));
}

inline bool has_ports(Proto p) { return p == Proto::tcp || p == Proto::udp; }

enum class Label : std::int8_t { unknown = -1, benign = 0, malicious = 1 };

inline std::string_view to_string(Label l) {
  switch (l) {
    case Label::benign: return "0";
    case Label::malicious: return "1";
    case Label::unknown: return "-1";
  }
  return "-1";
}

inline Label parse_label(std::string_view text) {
  const std::string s = trim(text);
  if (s == "0" || s == "benign") return Label::benign;
  if (s == "1" || s == "malicious") return Label::malicious;
  if (s == "-1" || s.empty() || s == "unknown") return Label::unknown;
  throw FormatError(str_cat("unknown label '", s, "'"));
}

// Timestamps are kept as integer microseconds: pcap resolution, and exact
// under csv round trips.
struct PacketRecord {
  std::int64_t ts_us = 0;
  MacAddr src_mac{};
  MacAddr dst_mac{};
  IpAddr src_ip;
  IpAddr dst_ip;
  Proto proto = Proto::other;
  std::uint16_t src_port = 0;
  std::uint16_t dst_port = 0;
  std::uint32_t frame_len = 1;
  Label label = Label::unknown;

  double ts() const { return static_cast<double>(ts_us) * 1e-6; }

  friend bool operator==(const PacketRecord&, const PacketRecord&) = default;
};

inline std::int64_t seconds_to_us(double seconds) {
  return static_cast<std::int64_t>(std::llround(seconds * 1e6));
}

enum class TraceFormat { pcap, csv, auto_detect };

struct TraceMeta {
  std::size_t packet_count = 0;
  std::int64_t first_ts_us = 0;
  std::int64_t last_ts_us = 0;
  std::size_t benign_count = 0;
  std::size_t malicious_count = 0;
  std::size_t unknown_count = 0;
  // Packets whose timestamp went backwards and was clamped.
  std::size_t clamped_timestamps = 0;
  TraceFormat source_format = TraceFormat::csv;

  double first_ts() const { return static_cast<double>(first_ts_us) * 1e-6; }
  double last_ts() const { return static_cast<double>(last_ts_us) * 1e-6; }
};

inline TraceMeta summarize_trace(const std::vector<PacketRecord>& records, TraceFormat format) {
  TraceMeta meta;
  meta.source_format = format;
  meta.packet_count = records.size();
  if (!records.empty()) {
    meta.first_ts_us = records.front().ts_us;
    meta.last_ts_us = records.back().ts_us;
  }
  for (const auto& r : records) {
    switch (r.label) {
      case Label::benign: ++meta.benign_count; break;
      case Label::malicious: ++meta.malicious_count; break;
      case Label::unknown: ++meta.unknown_count; break;
    }
  }
  return meta;
}

// Conjunction of field equalities, written "label=malicious,proto=ARP".
// Recognized fields: label, proto, src_ip, dst_ip, src_mac, dst_mac,
// src_port, dst_port.
class PacketPredicate {
 public:
  PacketPredicate() = default;

  static PacketPredicate parse(std::string_view text) {
    PacketPredicate pred;
    pred.text_ = trim(text);
    if (pred.text_.empty()) return pred;
    for (const auto& clause : split(pred.text_, ',')) {
      const auto eq = clause.find('=');
      if (eq == std::string::npos) throw FormatError(str_cat("predicate clause without '=': '", clause, "'"));
      const std::string key = trim(clause.substr(0, eq));
      const std::string value = trim(clause.substr(eq + 1));
      if (key == "label") {
        pred.label_ = parse_label(value);
      } else if (key == "proto") {
        pred.proto_ = parse_proto(value);
      } else if (key == "src_ip") {
        pred.src_ip_ = parse_ip(value);
      } else if (key == "dst_ip") {
        pred.dst_ip_ = parse_ip(value);
      } else if (key == "src_mac") {
        pred.src_mac_ = parse_mac(value);
      } else if (key == "dst_mac") {
        pred.dst_mac_ = parse_mac(value);
      } else if (key == "src_port") {
        pred.src_port_ = static_cast<std::uint16_t>(parse_int(value, "src_port"));
      } else if (key == "dst_port") {
        pred.dst_port_ = static_cast<std::uint16_t>(parse_int(value, "dst_port"));
      } else {
        throw FormatError(str_cat("unknown predicate field '", key, "'"));
      }
    }
    return pred;
  }

  bool matches(const PacketRecord& r) const {
    if (label_ && r.label != *label_) return false;
    if (proto_ && r.proto != *proto_) return false;
    if (src_ip_ && r.src_ip != *src_ip_) return false;
    if (dst_ip_ && r.dst_ip != *dst_ip_) return false;
    if (src_mac_ && r.src_mac != *src_mac_) return false;
    if (dst_mac_ && r.dst_mac != *dst_mac_) return false;
    if (src_port_ && r.src_port != *src_port_) return false;
    if (dst_port_ && r.dst_port != *dst_port_) return false;
    return true;
  }

  bool reads_label() const { return label_.has_value(); }
  const std::string& text() const { return text_; }

 private:
  std::string text_;
  std::optional<Label> label_;
  std::optional<Proto> proto_;
  std::optional<IpAddr> src_ip_;
  std::optional<IpAddr> dst_ip_;
  std::optional<MacAddr> src_mac_;
  std::optional<MacAddr> dst_mac_;
  std::optional<std::uint16_t> src_port_;
  std::optional<std::uint16_t> dst_port_;
};

// How ground-truth labels are attached while reading a trace.
struct LabelSpec {
  // Use the csv label column as-is.
  struct Column {};
  // The first `count` packets are benign, the rest malicious.
  struct FirstBenign {
    std::size_t count = 0;
  };
  // A packet matching any predicate is malicious, every other one benign.
  struct Predicates {
    std::vector<PacketPredicate> any_of;
  };

  std::variant<Column, FirstBenign, Predicates> rule = Column{};

  // "column", "first-benign=N" or "match=<pred>;<pred>".
  static LabelSpec parse(std::string_view text) {
    const std::string s = trim(text);
    LabelSpec spec;
    if (s.empty() || s == "column") return spec;
    if (s.rfind("first-benign=", 0) == 0) {
      spec.rule = FirstBenign{static_cast<std::size_t>(parse_int(s.substr(13), "first-benign"))};
      return spec;
    }
    if (s.rfind("match=", 0) == 0) {
      Predicates preds;
      for (const auto& p : split(s.substr(6), ';')) preds.any_of.push_back(PacketPredicate::parse(p));
      spec.rule = std::move(preds);
      return spec;
    }
    throw FormatError(str_cat("unknown label spec '", s, "'"));
  }

  bool uses_column() const { return std::holds_alternative<Column>(rule); }

  // Relabels records in place for the index/predicate rules.
  void apply(std::vector<PacketRecord>& records) const {
    if (const auto* first = std::get_if<FirstBenign>(&rule)) {
      for (std::size_t i = 0; i < records.size(); ++i) {
        records[i].label = i < first->count ? Label::benign : Label::malicious;
      }
    } else if (const auto* preds = std::get_if<Predicates>(&rule)) {
      for (auto& r : records) {
        bool hit = false;
        for (const auto& p : preds->any_of) hit = hit || p.matches(r);
        r.label = hit ? Label::malicious : Label::benign;
      }
    }
  }
};

}  // namespace nids_xray
