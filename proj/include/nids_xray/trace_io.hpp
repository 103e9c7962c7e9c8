#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "nids_xray/common.hpp"
#include "nids_xray/packet.hpp"

namespace nids_xray {

inline constexpr std::string_view kTraceCsvHeader =
    "ts,src_mac,dst_mac,src_ip,dst_ip,proto,src_port,dst_port,frame_len,label";

inline constexpr std::uint32_t kPcapMagicMicros = 0xa1b2c3d4;
inline constexpr std::uint32_t kPcapMagicNanos = 0xa1b23c4d;
inline constexpr std::uint32_t kLinkTypeEthernet = 1;

struct Trace {
  std::vector<PacketRecord> records;
  TraceMeta meta;
};

namespace detail {

inline std::string format_ts(std::int64_t ts_us) {
  const bool neg = ts_us < 0;
  const std::uint64_t mag = neg ? static_cast<std::uint64_t>(-ts_us) : static_cast<std::uint64_t>(ts_us);
  char buf[40];
  std::snprintf(buf, sizeof buf, "%s%llu.%06llu", neg ? "-" : "",
                static_cast<unsigned long long>(mag / 1000000),
                static_cast<unsigned long long>(mag % 1000000));
  return buf;
}

// Decimal seconds to integer microseconds without a detour through double.
inline std::int64_t parse_ts(std::string_view text) {
  std::string s = trim(text);
  if (s.empty()) throw FormatError("empty timestamp");
  bool neg = false;
  if (s[0] == '-') {
    neg = true;
    s.erase(0, 1);
  }
  const auto dot = s.find('.');
  const std::string whole = s.substr(0, dot);
  std::string frac = dot == std::string::npos ? std::string() : s.substr(dot + 1);
  if (whole.empty() && frac.empty()) throw FormatError(str_cat("bad timestamp '", text, "'"));
  for (char c : whole + frac) {
    if (c < '0' || c > '9') {
      // Exponent notation and the like: fall back to the floating path.
      return seconds_to_us(parse_double(text, "ts"));
    }
  }
  bool round_up = false;
  if (frac.size() > 6) {
    round_up = frac[6] >= '5';
    frac.resize(6);
  }
  while (frac.size() < 6) frac.push_back('0');
  std::int64_t us = (whole.empty() ? 0 : std::stoll(whole)) * 1000000 + std::stoll(frac);
  if (round_up) ++us;
  return neg ? -us : us;
}

inline void put_u16be(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
}

inline std::uint16_t get_u16be(const std::uint8_t* p) {
  return static_cast<std::uint16_t>((p[0] << 8) | p[1]);
}

template <typename T>
void write_le(std::ostream& os, T v) {
  std::array<char, sizeof(T)> buf;
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
  os.write(buf.data(), buf.size());
}

inline std::uint32_t read_u32(const std::uint8_t* p, bool swap) {
  std::uint32_t v = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                    (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  if (swap) v = __builtin_bswap32(v);
  return v;
}

// Decodes one Ethernet frame. Anything we cannot make sense of stays
// proto=OTHER with zero ports.
inline void decode_ethernet(const std::uint8_t* data, std::size_t len, PacketRecord& rec) {
  rec.proto = Proto::other;
  rec.src_port = rec.dst_port = 0;
  if (len < 14) return;
  std::memcpy(rec.dst_mac.data(), data, 6);
  std::memcpy(rec.src_mac.data(), data + 6, 6);
  std::uint16_t ether_type = get_u16be(data + 12);
  std::size_t off = 14;
  while ((ether_type == 0x8100 || ether_type == 0x88a8) && len >= off + 4) {
    ether_type = get_u16be(data + off + 2);
    off += 4;
  }
  const std::uint8_t* l3 = data + off;
  const std::size_t l3len = len - off;
  std::uint8_t l4proto = 0;
  const std::uint8_t* l4 = nullptr;
  std::size_t l4len = 0;
  if (ether_type == 0x0806) {
    // Ethernet/IPv4 ARP only.
    if (l3len < 28 || get_u16be(l3) != 1 || get_u16be(l3 + 2) != 0x0800) return;
    rec.proto = Proto::arp;
    rec.src_ip.family = rec.dst_ip.family = IpAddr::Family::v4;
    std::memcpy(rec.src_ip.bytes.data(), l3 + 14, 4);
    std::memcpy(rec.dst_ip.bytes.data(), l3 + 24, 4);
    return;
  }
  if (ether_type == 0x0800) {
    if (l3len < 20 || (l3[0] >> 4) != 4) return;
    const std::size_t ihl = static_cast<std::size_t>(l3[0] & 0x0f) * 4;
    if (ihl < 20 || l3len < ihl) return;
    rec.src_ip.family = rec.dst_ip.family = IpAddr::Family::v4;
    std::memcpy(rec.src_ip.bytes.data(), l3 + 12, 4);
    std::memcpy(rec.dst_ip.bytes.data(), l3 + 16, 4);
    l4proto = l3[9];
    l4 = l3 + ihl;
    l4len = l3len - ihl;
  } else if (ether_type == 0x86dd) {
    if (l3len < 40 || (l3[0] >> 4) != 6) return;
    rec.src_ip.family = rec.dst_ip.family = IpAddr::Family::v6;
    std::memcpy(rec.src_ip.bytes.data(), l3 + 8, 16);
    std::memcpy(rec.dst_ip.bytes.data(), l3 + 24, 16);
    l4proto = l3[6];
    l4 = l3 + 40;
    l4len = l3len - 40;
  } else {
    return;
  }
  if (l4proto == 1 || l4proto == 58) {
    rec.proto = Proto::icmp;
  } else if ((l4proto == 6 || l4proto == 17) && l4len >= 4) {
    rec.proto = l4proto == 6 ? Proto::tcp : Proto::udp;
    rec.src_port = get_u16be(l4);
    rec.dst_port = get_u16be(l4 + 2);
  }
}

// Builds a synthetic frame carrying the record's header fields, zero padded
// to frame_len when the headers are shorter.
inline std::vector<std::uint8_t> encode_ethernet(const PacketRecord& rec) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), rec.dst_mac.begin(), rec.dst_mac.end());
  out.insert(out.end(), rec.src_mac.begin(), rec.src_mac.end());
  auto pad_to_frame = [&] {
    if (out.size() < rec.frame_len) out.resize(rec.frame_len, 0);
  };
  if (rec.proto == Proto::arp) {
    put_u16be(out, 0x0806);
    put_u16be(out, 1);
    put_u16be(out, 0x0800);
    out.push_back(6);
    out.push_back(4);
    put_u16be(out, 1);
    out.insert(out.end(), rec.src_mac.begin(), rec.src_mac.end());
    for (std::size_t i = 0; i < 4; ++i) out.push_back(rec.src_ip.bytes[i]);
    for (std::size_t i = 0; i < 6; ++i) out.push_back(0);
    for (std::size_t i = 0; i < 4; ++i) out.push_back(rec.dst_ip.bytes[i]);
    pad_to_frame();
    return out;
  }
  if (rec.src_ip.empty()) {
    // Unknown ethertype; the reader maps it back to OTHER.
    put_u16be(out, 0x88b5);
    pad_to_frame();
    return out;
  }
  std::uint8_t l4proto = 255;
  std::size_t l4hdr = 0;
  switch (rec.proto) {
    case Proto::tcp: l4proto = 6; l4hdr = 20; break;
    case Proto::udp: l4proto = 17; l4hdr = 8; break;
    case Proto::icmp: l4proto = rec.src_ip.family == IpAddr::Family::v6 ? 58 : 1; l4hdr = 8; break;
    default: break;
  }
  const bool v6 = rec.src_ip.family == IpAddr::Family::v6;
  const std::size_t l3hdr = v6 ? 40 : 20;
  const std::size_t payload_after_l2 =
      std::max<std::size_t>(l3hdr + l4hdr, rec.frame_len > 14 ? rec.frame_len - 14 : 0);
  if (v6) {
    put_u16be(out, 0x86dd);
    out.push_back(0x60);
    out.push_back(0);
    out.push_back(0);
    out.push_back(0);
    put_u16be(out, static_cast<std::uint16_t>(payload_after_l2 - 40));
    out.push_back(l4proto);
    out.push_back(64);
    out.insert(out.end(), rec.src_ip.bytes.begin(), rec.src_ip.bytes.end());
    out.insert(out.end(), rec.dst_ip.bytes.begin(), rec.dst_ip.bytes.end());
  } else {
    put_u16be(out, 0x0800);
    out.push_back(0x45);
    out.push_back(0);
    put_u16be(out, static_cast<std::uint16_t>(payload_after_l2));
    put_u16be(out, 0);
    put_u16be(out, 0);
    out.push_back(64);
    out.push_back(l4proto);
    put_u16be(out, 0);
    for (std::size_t i = 0; i < 4; ++i) out.push_back(rec.src_ip.bytes[i]);
    for (std::size_t i = 0; i < 4; ++i) out.push_back(rec.dst_ip.bytes[i]);
  }
  if (rec.proto == Proto::tcp || rec.proto == Proto::udp) {
    put_u16be(out, rec.src_port);
    put_u16be(out, rec.dst_port);
    out.resize(out.size() + l4hdr - 4, 0);
    if (rec.proto == Proto::tcp) out[out.size() - 8] = 0x50;  // data offset
  } else if (l4hdr > 0) {
    out.resize(out.size() + l4hdr, 0);
  }
  pad_to_frame();
  return out;
}

}  // namespace detail

// Single-pass reader over csv or classic pcap. Labels are attached per the
// LabelSpec and timestamps are clamped to the running maximum as records are
// produced.
class TraceReader {
 public:
  TraceReader(const std::filesystem::path& path, TraceFormat format, LabelSpec labels)
      : path_(path), labels_(std::move(labels)) {
    in_.open(path, std::ios::binary);
    if (!in_) throw IoError(str_cat("cannot open trace '", path.string(), "' (byte offset 0)"));
    if (format == TraceFormat::auto_detect) format = sniff();
    format_ = format;
    if (format_ == TraceFormat::pcap) {
      if (labels_.uses_column()) {
        throw InvalidArgument("pcap traces carry no label column; use first-benign=N or match=...");
      }
      read_pcap_header();
    } else {
      read_csv_header();
    }
  }

  std::optional<PacketRecord> next() {
    std::optional<PacketRecord> rec = format_ == TraceFormat::pcap ? next_pcap() : next_csv();
    if (!rec) return rec;
    if (std::holds_alternative<LabelSpec::FirstBenign>(labels_.rule)) {
      rec->label = index_ < std::get<LabelSpec::FirstBenign>(labels_.rule).count ? Label::benign
                                                                                  : Label::malicious;
    } else if (const auto* preds = std::get_if<LabelSpec::Predicates>(&labels_.rule)) {
      bool hit = false;
      for (const auto& p : preds->any_of) hit = hit || p.matches(*rec);
      rec->label = hit ? Label::malicious : Label::benign;
    }
    if (index_ > 0 && rec->ts_us < max_ts_) {
      rec->ts_us = max_ts_;
      ++meta_.clamped_timestamps;
    }
    max_ts_ = std::max(max_ts_, rec->ts_us);
    if (index_ == 0) meta_.first_ts_us = rec->ts_us;
    meta_.last_ts_us = rec->ts_us;
    ++meta_.packet_count;
    switch (rec->label) {
      case Label::benign: ++meta_.benign_count; break;
      case Label::malicious: ++meta_.malicious_count; break;
      case Label::unknown: ++meta_.unknown_count; break;
    }
    ++index_;
    return rec;
  }

  // Totals over the records produced so far.
  const TraceMeta& meta() const { return meta_; }
  TraceFormat format() const { return format_; }

 private:
  TraceFormat sniff() {
    std::array<std::uint8_t, 4> magic{};
    in_.read(reinterpret_cast<char*>(magic.data()), 4);
    const auto got = in_.gcount();
    in_.clear();
    in_.seekg(0);
    if (got == 4) {
      const std::uint32_t le = detail::read_u32(magic.data(), false);
      const std::uint32_t be = detail::read_u32(magic.data(), true);
      for (std::uint32_t m : {le, be}) {
        if (m == kPcapMagicMicros || m == kPcapMagicNanos) return TraceFormat::pcap;
      }
    }
    if (got >= 2 && magic[0] == 't' && magic[1] == 's') return TraceFormat::csv;
    throw FormatError(str_cat("unknown format magic in '", path_.string(), "' at byte offset 0"));
  }

  void read_pcap_header() {
    std::array<std::uint8_t, 24> hdr{};
    in_.read(reinterpret_cast<char*>(hdr.data()), hdr.size());
    if (in_.gcount() != 24) {
      throw IoError(str_cat("truncated pcap global header in '", path_.string(), "' at byte offset ", in_.gcount()));
    }
    const std::uint32_t magic = detail::read_u32(hdr.data(), false);
    if (magic == kPcapMagicMicros || magic == kPcapMagicNanos) {
      swap_ = false;
    } else if (__builtin_bswap32(magic) == kPcapMagicMicros || __builtin_bswap32(magic) == kPcapMagicNanos) {
      swap_ = true;
    } else {
      throw FormatError(str_cat("unknown format magic in '", path_.string(), "' at byte offset 0"));
    }
    nanos_ = (swap_ ? __builtin_bswap32(magic) : magic) == kPcapMagicNanos;
    const std::uint32_t linktype = detail::read_u32(hdr.data() + 20, swap_);
    if (linktype != kLinkTypeEthernet) {
      throw FormatError(str_cat("unsupported pcap link type ", linktype, " in '", path_.string(),
                                "' at byte offset 20 (only Ethernet is supported)"));
    }
    offset_ = 24;
  }

  std::optional<PacketRecord> next_pcap() {
    std::array<std::uint8_t, 16> rh{};
    in_.read(reinterpret_cast<char*>(rh.data()), rh.size());
    const auto got = in_.gcount();
    if (got == 0) return std::nullopt;
    if (got != 16) {
      throw IoError(str_cat("truncated pcap record header in '", path_.string(), "' at byte offset ", offset_));
    }
    const std::uint32_t sec = detail::read_u32(rh.data(), swap_);
    const std::uint32_t frac = detail::read_u32(rh.data() + 4, swap_);
    const std::uint32_t incl = detail::read_u32(rh.data() + 8, swap_);
    const std::uint32_t orig = detail::read_u32(rh.data() + 12, swap_);
    if (incl > (1u << 26)) {
      throw FormatError(str_cat("implausible captured length ", incl, " in '", path_.string(), "' at byte offset ", offset_));
    }
    buf_.resize(incl);
    in_.read(reinterpret_cast<char*>(buf_.data()), incl);
    if (static_cast<std::uint32_t>(in_.gcount()) != incl) {
      throw IoError(str_cat("truncated pcap packet data in '", path_.string(), "' at byte offset ", offset_ + 16));
    }
    offset_ += 16 + incl;
    PacketRecord rec;
    rec.ts_us = static_cast<std::int64_t>(sec) * 1000000 + (nanos_ ? frac / 1000 : frac);
    rec.frame_len = std::max<std::uint32_t>(1, orig);
    detail::decode_ethernet(buf_.data(), buf_.size(), rec);
    return rec;
  }

  void read_csv_header() {
    std::string line;
    if (!std::getline(in_, line)) {
      throw FormatError(str_cat("missing csv header in '", path_.string(), "' at byte offset 0"));
    }
    offset_ = line.size() + 1;
    ++line_no_;
    const auto cols = split(trim(line), ',');
    const auto expected = split(kTraceCsvHeader, ',');
    const bool full = cols == expected;
    const bool no_label = cols.size() == expected.size() - 1 &&
                          std::equal(cols.begin(), cols.end(), expected.begin());
    if (!full && !no_label) {
      throw FormatError(str_cat("unexpected csv header in '", path_.string(), "': '", trim(line), "'"));
    }
    if (no_label && labels_.uses_column()) {
      throw FormatError(str_cat("label column missing in '", path_.string(), "' but the label spec requires it"));
    }
    has_label_ = full;
  }

  std::optional<PacketRecord> next_csv() {
    std::string line;
    while (true) {
      const std::size_t at = offset_;
      if (!std::getline(in_, line)) return std::nullopt;
      offset_ += line.size() + 1;
      ++line_no_;
      if (trim(line).empty()) continue;
      try {
        return parse_csv_line(line);
      } catch (const FormatError& e) {
        throw FormatError(str_cat(path_.string(), ":", line_no_, " (byte offset ", at, "): ", e.what()));
      }
    }
  }

  PacketRecord parse_csv_line(const std::string& line) const {
    const auto f = split(line, ',');
    const std::size_t want = has_label_ ? 10 : 9;
    if (f.size() != want) throw FormatError(str_cat("expected ", want, " fields, got ", f.size()));
    PacketRecord rec;
    rec.ts_us = detail::parse_ts(f[0]);
    rec.src_mac = parse_mac(f[1]);
    rec.dst_mac = parse_mac(f[2]);
    rec.src_ip = parse_ip(f[3]);
    rec.dst_ip = parse_ip(f[4]);
    rec.proto = parse_proto(f[5]);
    const long long sp = parse_int(f[6], "src_port");
    const long long dp = parse_int(f[7], "dst_port");
    if (sp < 0 || sp > 65535 || dp < 0 || dp > 65535) throw FormatError("port out of range");
    rec.src_port = has_ports(rec.proto) ? static_cast<std::uint16_t>(sp) : 0;
    rec.dst_port = has_ports(rec.proto) ? static_cast<std::uint16_t>(dp) : 0;
    const long long len = parse_int(f[8], "frame_len");
    if (len < 1) throw FormatError("frame_len must be >= 1");
    rec.frame_len = static_cast<std::uint32_t>(len);
    rec.label = has_label_ ? parse_label(f[9]) : Label::unknown;
    return rec;
  }

  std::filesystem::path path_;
  LabelSpec labels_;
  std::ifstream in_;
  TraceFormat format_ = TraceFormat::csv;
  bool swap_ = false;
  bool nanos_ = false;
  bool has_label_ = true;
  std::size_t offset_ = 0;
  std::size_t line_no_ = 0;
  std::size_t index_ = 0;
  std::int64_t max_ts_ = 0;
  std::vector<std::uint8_t> buf_;
  TraceMeta meta_;
};

inline Trace read_trace(const std::filesystem::path& path, TraceFormat format = TraceFormat::auto_detect,
                        const LabelSpec& labels = {}) {
  TraceReader reader(path, format, labels);
  Trace trace;
  while (auto rec = reader.next()) trace.records.push_back(*rec);
  trace.meta = reader.meta();
  trace.meta.source_format = reader.format();
  return trace;
}

inline TraceMeta write_trace(const std::vector<PacketRecord>& records, const std::filesystem::path& path,
                             TraceFormat format) {
  for (std::size_t i = 1; i < records.size(); ++i) {
    if (records[i].ts_us < records[i - 1].ts_us) {
      throw InvalidArgument(str_cat("write_trace: records not timestamp-ordered at index ", i));
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(str_cat("cannot write trace '", path.string(), "'"));
  if (format == TraceFormat::pcap) {
    detail::write_le<std::uint32_t>(out, kPcapMagicMicros);
    detail::write_le<std::uint16_t>(out, 2);
    detail::write_le<std::uint16_t>(out, 4);
    detail::write_le<std::int32_t>(out, 0);
    detail::write_le<std::uint32_t>(out, 0);
    detail::write_le<std::uint32_t>(out, 65535);
    detail::write_le<std::uint32_t>(out, kLinkTypeEthernet);
    for (const auto& rec : records) {
      const auto frame = detail::encode_ethernet(rec);
      detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(rec.ts_us / 1000000));
      detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(rec.ts_us % 1000000));
      detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(frame.size()));
      detail::write_le<std::uint32_t>(out, rec.frame_len);
      out.write(reinterpret_cast<const char*>(frame.data()), static_cast<std::streamsize>(frame.size()));
    }
  } else {
    out << kTraceCsvHeader << '\n';
    for (const auto& r : records) {
      out << detail::format_ts(r.ts_us) << ',' << to_string(r.src_mac) << ',' << to_string(r.dst_mac) << ','
          << to_string(r.src_ip) << ',' << to_string(r.dst_ip) << ',' << to_string(r.proto) << ','
          << r.src_port << ',' << r.dst_port << ',' << r.frame_len << ',' << to_string(r.label) << '\n';
    }
  }
  out.flush();
  if (!out) throw IoError(str_cat("failed writing trace '", path.string(), "'"));
  return summarize_trace(records, format);
}

}  // namespace nids_xray
