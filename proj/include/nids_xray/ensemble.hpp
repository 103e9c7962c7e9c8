#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "nids_xray/autoencoder.hpp"
#include "nids_xray/matrix.hpp"
#include "nids_xray/model.hpp"

namespace nids_xray {

// Per-feature min/max scaling. Bounds widen while observing and are frozen
// by simply not observing any more.
struct Normalizer {
  std::vector<double> lo;
  std::vector<double> hi;

  explicit Normalizer(std::size_t width = 0)
      : lo(width, std::numeric_limits<double>::infinity()), hi(width, -std::numeric_limits<double>::infinity()) {}

  void observe(std::span<const double> x) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      lo[i] = std::min(lo[i], x[i]);
      hi[i] = std::max(hi[i], x[i]);
    }
  }

  void apply(std::span<const double> x, std::span<double> out) const {
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - lo[i]) / (hi[i] - lo[i] + 1e-16);
  }

  Matrix apply(const Matrix& x) const {
    Matrix out(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) apply(x.row(r), out.row(r));
    return out;
  }

  static Normalizer fit(const Matrix& x) {
    Normalizer n(x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) n.observe(x.row(r));
    return n;
  }
};

using FeatureGroups = std::vector<std::vector<std::size_t>>;

// Pearson correlation matrix of the columns; constant columns correlate 0
// with everything except themselves.
inline std::vector<double> correlation_matrix(const Matrix& x) {
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<double> mean(d, 0.0), sd(d, 0.0), corr(d * d, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) mean[c] += x(r, c);
  }
  for (double& m : mean) m /= static_cast<double>(n);
  Matrix centered(n, d);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) {
      centered(r, c) = x(r, c) - mean[c];
      sd[c] += centered(r, c) * centered(r, c);
    }
  }
  for (double& s : sd) s = std::sqrt(s);
  for (std::size_t a = 0; a < d; ++a) {
    corr[a * d + a] = 1.0;
    for (std::size_t b = a + 1; b < d; ++b) {
      double v = 0.0;
      if (sd[a] > 0.0 && sd[b] > 0.0) {
        double acc = 0.0;
        for (std::size_t r = 0; r < n; ++r) acc += centered(r, a) * centered(r, b);
        v = std::clamp(acc / (sd[a] * sd[b]), -1.0, 1.0);
      }
      corr[a * d + b] = corr[b * d + a] = v;
    }
  }
  return corr;
}

// Single-linkage agglomerative clustering on 1 - |Pearson|, then the
// dendrogram is cut top-down until every group has at most m_max features.
inline FeatureGroups group_features(const Matrix& x, std::size_t m_max) {
  if (x.rows() < 2) throw InvalidArgument(str_cat("group_features needs at least 2 rows, got ", x.rows()));
  if (m_max < 1) throw InvalidArgument("m_max must be >= 1");
  const std::size_t d = x.cols();
  const auto corr = correlation_matrix(x);

  struct Node {
    std::ptrdiff_t left = -1, right = -1;
    std::vector<std::size_t> members;
  };
  std::vector<Node> nodes(d);
  for (std::size_t i = 0; i < d; ++i) nodes[i].members = {i};

  // Distances between live clusters, kept current by the single-linkage rule.
  std::vector<std::vector<double>> cd(d, std::vector<double>(d));
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t b = 0; b < d; ++b) cd[a][b] = 1.0 - std::abs(corr[a * d + b]);
  }
  std::vector<std::size_t> slot_node(d);  // slot -> dendrogram node id
  for (std::size_t i = 0; i < d; ++i) slot_node[i] = i;
  std::vector<bool> alive(d, true);
  for (std::size_t step = 0; step + 1 < d; ++step) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t ba = 0, bb = 0;
    for (std::size_t a = 0; a < d; ++a) {
      if (!alive[a]) continue;
      for (std::size_t b = a + 1; b < d; ++b) {
        if (!alive[b]) continue;
        if (cd[a][b] < best) {
          best = cd[a][b];
          ba = a;
          bb = b;
        }
      }
    }
    Node merged;
    merged.left = static_cast<std::ptrdiff_t>(slot_node[ba]);
    merged.right = static_cast<std::ptrdiff_t>(slot_node[bb]);
    merged.members = nodes[slot_node[ba]].members;
    merged.members.insert(merged.members.end(), nodes[slot_node[bb]].members.begin(),
                          nodes[slot_node[bb]].members.end());
    nodes.push_back(std::move(merged));
    slot_node[ba] = nodes.size() - 1;
    alive[bb] = false;
    for (std::size_t c = 0; c < d; ++c) {
      if (!alive[c] || c == ba) continue;
      cd[ba][c] = cd[c][ba] = std::min(cd[ba][c], cd[bb][c]);
    }
  }

  FeatureGroups groups;
  std::vector<std::size_t> stack{nodes.size() - 1};
  while (!stack.empty()) {
    const std::size_t id = stack.back();
    stack.pop_back();
    const Node& n = nodes[id];
    if (n.members.size() <= m_max || n.left < 0) {
      auto g = n.members;
      std::sort(g.begin(), g.end());
      groups.push_back(std::move(g));
    } else {
      stack.push_back(static_cast<std::size_t>(n.right));
      stack.push_back(static_cast<std::size_t>(n.left));
    }
  }
  return groups;
}

struct EnsembleConfig {
  std::size_t m_max = 10;
  double learning_rate = 0.01;
  double hidden_ratio = 0.75;
  double calibration_fraction = 0.1;
  double phi_multiplier = 1.0;
  std::uint64_t seed = 0;
};

// Kitsune-style detector: per-group autoencoders over normalized feature
// subsets feed their RMSEs to an output autoencoder whose RMSE is the score.
class EnsembleAeModel final : public ModelAdapter {
 public:
  static constexpr std::uint32_t kFormatVersion = 1;

  EnsembleAeModel() = default;

  std::string id() const override { return "ensemble_ae"; }
  const std::vector<std::string>& feature_names() const override { return names_; }
  double threshold() const override { return phi_; }

  const FeatureGroups& groups() const { return groups_; }
  const std::vector<Autoencoder>& encoders() const { return encoders_; }
  const Autoencoder& output_ae() const { return output_; }
  const Normalizer& feature_norm() const { return norm_; }
  std::size_t train_count() const { return train_count_; }
  const EnsembleConfig& config() const { return config_; }

  double score_row(std::span<const double> x) const {
    std::vector<double> xn(x.size());
    norm_.apply(x, xn);
    std::vector<double> errs(groups_.size()), errs_n(groups_.size()), sub;
    for (std::size_t g = 0; g < groups_.size(); ++g) {
      sub.resize(groups_[g].size());
      for (std::size_t i = 0; i < sub.size(); ++i) sub[i] = xn[groups_[g][i]];
      errs[g] = encoders_[g].rmse(sub);
    }
    out_norm_.apply(errs, errs_n);
    return output_.rmse(errs_n);
  }

  static EnsembleAeModel train(const FeatureMatrix& x_train, const EnsembleConfig& cfg = {}) {
    const std::size_t n = x_train.rows();
    if (n < 100) throw InvalidArgument(str_cat("training needs at least 100 rows, got ", n));
    if (cfg.calibration_fraction <= 0.0 || cfg.calibration_fraction >= 1.0) {
      throw InvalidArgument(str_cat("calibration_fraction must be in (0,1), got ", cfg.calibration_fraction));
    }
    const auto calib = static_cast<std::size_t>(std::floor(cfg.calibration_fraction * static_cast<double>(n)));
    if (calib < 1) {
      throw InvalidArgument(str_cat("calibration slice is empty: ", n, " training rows x fraction ",
                                    cfg.calibration_fraction));
    }
    EnsembleAeModel m;
    m.config_ = cfg;
    m.names_ = x_train.names;
    m.train_count_ = n;
    m.groups_ = group_features(x_train.values, cfg.m_max);
    Rng rng(cfg.seed);
    for (const auto& g : m.groups_) {
      m.encoders_.emplace_back(g.size(), Autoencoder::hidden_size_for(g.size(), cfg.hidden_ratio), rng);
    }
    m.output_ = Autoencoder(m.groups_.size(), Autoencoder::hidden_size_for(m.groups_.size(), cfg.hidden_ratio), rng);
    m.norm_ = Normalizer(x_train.cols());
    m.out_norm_ = Normalizer(m.groups_.size());

    std::vector<double> xn(x_train.cols()), errs(m.groups_.size()), errs_n(m.groups_.size()), sub;
    for (std::size_t r = 0; r < n; ++r) {
      const auto row = x_train.values.row(r);
      m.norm_.observe(row);
      m.norm_.apply(row, xn);
      for (std::size_t g = 0; g < m.groups_.size(); ++g) {
        sub.resize(m.groups_[g].size());
        for (std::size_t i = 0; i < sub.size(); ++i) sub[i] = xn[m.groups_[g][i]];
        errs[g] = m.encoders_[g].train_step(sub, cfg.learning_rate);
      }
      m.out_norm_.observe(errs);
      m.out_norm_.apply(errs, errs_n);
      m.output_.train_step(errs_n, cfg.learning_rate);
    }

    double phi = 0.0;
    for (std::size_t r = n - calib; r < n; ++r) phi = std::max(phi, m.score_row(x_train.values.row(r)));
    m.phi_ = phi * cfg.phi_multiplier;
    if (!(m.phi_ > 0.0)) m.phi_ = std::numeric_limits<double>::min();
    return m;
  }

  // Binary model file: magic, version, length-prefixed JSON manifest, then
  // little-endian float64 blocks in manifest order.
  void save(const std::filesystem::path& path) const {
    std::vector<std::pair<std::string, const std::vector<double>*>> blocks;
    blocks.emplace_back("norm_lo", &norm_.lo);
    blocks.emplace_back("norm_hi", &norm_.hi);
    blocks.emplace_back("out_norm_lo", &out_norm_.lo);
    blocks.emplace_back("out_norm_hi", &out_norm_.hi);
    for (std::size_t g = 0; g < encoders_.size(); ++g) {
      blocks.emplace_back(str_cat("ae", g, ".weights"), &encoders_[g].weights());
      blocks.emplace_back(str_cat("ae", g, ".hidden_bias"), &encoders_[g].hidden_bias());
      blocks.emplace_back(str_cat("ae", g, ".visible_bias"), &encoders_[g].visible_bias());
    }
    blocks.emplace_back("output.weights", &output_.weights());
    blocks.emplace_back("output.hidden_bias", &output_.hidden_bias());
    blocks.emplace_back("output.visible_bias", &output_.visible_bias());

    nlohmann::json manifest;
    manifest["format"] = "nids-xray-ensemble-ae";
    manifest["version"] = kFormatVersion;
    manifest["feature_names"] = names_;
    manifest["groups"] = groups_;
    std::vector<nlohmann::json> shapes;
    for (const auto& ae : encoders_) shapes.push_back({ae.visible(), ae.hidden()});
    manifest["encoder_shapes"] = shapes;
    manifest["output_shape"] = {output_.visible(), output_.hidden()};
    manifest["phi"] = phi_;
    manifest["train_count"] = train_count_;
    manifest["config"] = {{"m_max", config_.m_max},
                          {"learning_rate", config_.learning_rate},
                          {"hidden_ratio", config_.hidden_ratio},
                          {"calibration_fraction", config_.calibration_fraction},
                          {"phi_multiplier", config_.phi_multiplier},
                          {"seed", config_.seed}};
    std::vector<nlohmann::json> block_list;
    for (const auto& [name, data] : blocks) block_list.push_back({{"name", name}, {"count", data->size()}});
    manifest["blocks"] = block_list;
    const std::string text = manifest.dump(1);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(str_cat("cannot write model '", path.string(), "'"));
    out.write(kMagic, 8);
    write_u64(out, kFormatVersion);
    write_u64(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, data] : blocks) {
      out.write(reinterpret_cast<const char*>(data->data()), static_cast<std::streamsize>(data->size() * 8));
    }
    if (!out) throw IoError(str_cat("failed writing model '", path.string(), "'"));
  }

  static EnsembleAeModel load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(str_cat("cannot open model '", path.string(), "'"));
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0) {
      throw FormatError(str_cat("'", path.string(), "' is not a model file (bad magic at byte offset 0)"));
    }
    const std::uint64_t version = read_u64(in);
    if (version != kFormatVersion) throw FormatError(str_cat("unsupported model version ", version));
    const std::uint64_t len = read_u64(in);
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) throw IoError(str_cat("truncated model manifest in '", path.string(), "' at byte offset 24"));
    const auto manifest = nlohmann::json::parse(text);

    EnsembleAeModel m;
    m.names_ = manifest.at("feature_names").get<std::vector<std::string>>();
    m.groups_ = manifest.at("groups").get<FeatureGroups>();
    m.phi_ = manifest.at("phi").get<double>();
    m.train_count_ = manifest.at("train_count").get<std::size_t>();
    const auto& c = manifest.at("config");
    m.config_.m_max = c.at("m_max");
    m.config_.learning_rate = c.at("learning_rate");
    m.config_.hidden_ratio = c.at("hidden_ratio");
    m.config_.calibration_fraction = c.at("calibration_fraction");
    m.config_.phi_multiplier = c.at("phi_multiplier");
    m.config_.seed = c.at("seed");
    Rng dummy(0);
    for (const auto& s : manifest.at("encoder_shapes")) {
      m.encoders_.emplace_back(s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>(), dummy);
    }
    const auto& os = manifest.at("output_shape");
    m.output_ = Autoencoder(os.at(0).get<std::size_t>(), os.at(1).get<std::size_t>(), dummy);
    m.norm_ = Normalizer(m.names_.size());
    m.out_norm_ = Normalizer(m.groups_.size());

    std::size_t offset = 24 + len;
    for (const auto& b : manifest.at("blocks")) {
      const std::string name = b.at("name");
      const std::size_t count = b.at("count");
      std::vector<double>* dst = m.block(name);
      if (!dst || dst->size() != count) throw FormatError(str_cat("model block '", name, "' has unexpected shape"));
      in.read(reinterpret_cast<char*>(dst->data()), static_cast<std::streamsize>(count * 8));
      if (!in) throw IoError(str_cat("truncated model block '", name, "' at byte offset ", offset));
      offset += count * 8;
    }
    return m;
  }

 protected:
  std::vector<double> score_rows(const Matrix& x) const override {
    std::vector<double> out(x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r) out[r] = score_row(x.row(r));
    return out;
  }

 private:
  static constexpr char kMagic[9] = "NXRAYAE\0";

  static void write_u64(std::ostream& os, std::uint64_t v) {
    char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(buf, 8);
  }
  static std::uint64_t read_u64(std::istream& is) {
    unsigned char buf[8];
    is.read(reinterpret_cast<char*>(buf), 8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | buf[i];
    return v;
  }

  std::vector<double>* block(const std::string& name) {
    if (name == "norm_lo") return &norm_.lo;
    if (name == "norm_hi") return &norm_.hi;
    if (name == "out_norm_lo") return &out_norm_.lo;
    if (name == "out_norm_hi") return &out_norm_.hi;
    if (name.rfind("output.", 0) == 0) return ae_block(output_, name.substr(7));
    if (name.rfind("ae", 0) == 0) {
      const auto dot = name.find('.');
      const std::size_t g = std::stoul(name.substr(2, dot - 2));
      if (g >= encoders_.size()) return nullptr;
      return ae_block(encoders_[g], name.substr(dot + 1));
    }
    return nullptr;
  }
  static std::vector<double>* ae_block(Autoencoder& ae, const std::string& part) {
    if (part == "weights") return &ae.weights();
    if (part == "hidden_bias") return &ae.hidden_bias();
    if (part == "visible_bias") return &ae.visible_bias();
    return nullptr;
  }

  std::vector<std::string> names_;
  FeatureGroups groups_;
  std::vector<Autoencoder> encoders_;
  Autoencoder output_;
  Normalizer norm_;
  Normalizer out_norm_;
  double phi_ = 0.0;
  std::size_t train_count_ = 0;
  EnsembleConfig config_;
};

}  // namespace nids_xray
