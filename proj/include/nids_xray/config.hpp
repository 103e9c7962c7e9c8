#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "nids_xray/common.hpp"

namespace nids_xray {

struct Band {
  std::int64_t lo = 0;
  std::int64_t hi = 0;
  friend bool operator==(const Band&, const Band&) = default;
};

// Every tunable of a pipeline run. Keys are flat and dotted, e.g.
// "shap.budget = 2048"; the resolved set is echoed into the report.
struct PipelineConfig {
  std::uint64_t seed = 1;

  std::string input_trace;  // empty: generate the synthetic fixture
  std::string input_format = "auto";
  std::string input_labels = "column";

  double synthetic_duration = 600.0;
  double synthetic_benign_pps = 50.0;
  double synthetic_attack_start = 240.0;
  double synthetic_attack_pps = 5000.0;
  std::int64_t synthetic_attack_packets = 5000;

  std::int64_t train_rows = 8000;
  std::vector<std::string> models{"ensemble_ae", "size_zscore"};

  std::int64_t ensemble_m_max = 10;
  double ensemble_learning_rate = 0.01;
  double ensemble_hidden_ratio = 0.75;
  double ensemble_calibration_fraction = 0.1;
  double ensemble_phi_multiplier = 1.0;
  double zscore_cut = 3.0;

  double distill_sample_fraction = 0.3;
  std::int64_t distill_iterations = 50;
  double distill_holdout_fraction = 0.3;
  std::int64_t distill_stability_top_k = 10;
  std::int64_t distill_prune_k = 10;
  std::int64_t cart_max_depth = 100;
  std::int64_t cart_min_leaf = 5;

  std::int64_t shap_budget = 2048;  // 0 enumerates every coalition
  std::int64_t shap_background = 100;
  std::int64_t shap_rows = 1000;
  std::int64_t shap_top_n = 10;
  std::string shap_target = "score";

  std::int64_t agree_m = 3;
  std::int64_t agree_min_rows = 300;
  std::int64_t agree_rows = 1000;
  std::string agree_tree = "pruned";

  std::vector<Band> tamper_bands{{10, 50}, {30, 70}, {50, 90}};
  std::string tamper_match = "label=malicious";
  double bias_drop_threshold = 0.1;

  std::vector<double> report_alphas{0.25, 0.5, 0.75};

  void set(const std::string& key, const std::string& value);
  std::map<std::string, std::string> values() const;
  nlohmann::json to_json() const;
  static PipelineConfig load(const std::filesystem::path& path);
  static PipelineConfig parse(std::istream& in, const std::string& origin = "config");
};

namespace detail {

inline std::vector<std::string> parse_list(const std::string& v) {
  std::vector<std::string> out;
  for (const auto& part : split(v, ',')) {
    const std::string t = trim(part);
    if (!t.empty()) out.push_back(t);
  }
  return out;
}

inline std::string join_list(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
  return s;
}

inline Band parse_band(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw InvalidArgument(str_cat("band '", text, "' is not lo:hi"));
  Band b{parse_int(trim(text.substr(0, colon)), "band lo"), parse_int(trim(text.substr(colon + 1)), "band hi")};
  if (b.lo <= 0 || b.lo >= b.hi) throw InvalidArgument(str_cat("band '", text, "' needs 0 < lo < hi"));
  return b;
}

struct Field {
  std::function<void(PipelineConfig&, const std::string&)> set;
  std::function<std::string(const PipelineConfig&)> get;
};

template <typename T>
Field int_field(T PipelineConfig::*member, std::int64_t lo, std::int64_t hi) {
  return {[=](PipelineConfig& c, const std::string& v) {
            const auto x = parse_int(v, "value");
            if (x < lo || x > hi) throw InvalidArgument(str_cat("value ", x, " outside [", lo, ", ", hi, "]"));
            c.*member = static_cast<T>(x);
          },
          [=](const PipelineConfig& c) { return std::to_string(c.*member); }};
}

inline Field real_field(double PipelineConfig::*member, double lo, double hi, bool open_lo = false) {
  return {[=](PipelineConfig& c, const std::string& v) {
            const double x = parse_double(v, "value");
            if (!(x <= hi) || !(open_lo ? x > lo : x >= lo)) {
              throw InvalidArgument(str_cat("value ", v, " outside ", open_lo ? "(" : "[", lo, ", ", hi, "]"));
            }
            c.*member = x;
          },
          [=](const PipelineConfig& c) { return format_double(c.*member); }};
}

inline Field text_field(std::string PipelineConfig::*member, std::vector<std::string> allowed = {}) {
  return {[=](PipelineConfig& c, const std::string& v) {
            if (!allowed.empty() && std::find(allowed.begin(), allowed.end(), v) == allowed.end()) {
              throw InvalidArgument(str_cat("value '", v, "' not one of ", join_list(allowed)));
            }
            c.*member = v;
          },
          [=](const PipelineConfig& c) { return c.*member; }};
}

inline const std::map<std::string, Field>& config_fields() {
  static const std::map<std::string, Field> fields = [] {
    constexpr std::int64_t big = std::int64_t{1} << 40;
    std::map<std::string, Field> f;
    f["seed"] = {[](PipelineConfig& c, const std::string& v) {
                   const auto x = parse_int(v, "seed");
                   if (x < 0) throw InvalidArgument("seed must be non-negative");
                   c.seed = static_cast<std::uint64_t>(x);
                 },
                 [](const PipelineConfig& c) { return std::to_string(c.seed); }};
    f["input.trace"] = text_field(&PipelineConfig::input_trace);
    f["input.format"] = text_field(&PipelineConfig::input_format, {"auto", "pcap", "csv"});
    f["input.labels"] = text_field(&PipelineConfig::input_labels);
    f["synthetic.duration"] = real_field(&PipelineConfig::synthetic_duration, 0.0, 1e6, true);
    f["synthetic.benign_pps"] = real_field(&PipelineConfig::synthetic_benign_pps, 0.0, 1e6, true);
    f["synthetic.attack_start"] = real_field(&PipelineConfig::synthetic_attack_start, 0.0, 1e6);
    f["synthetic.attack_pps"] = real_field(&PipelineConfig::synthetic_attack_pps, 0.0, 1e7, true);
    f["synthetic.attack_packets"] = int_field(&PipelineConfig::synthetic_attack_packets, 1, big);
    f["train.rows"] = int_field(&PipelineConfig::train_rows, 100, big);
    f["models"] = {[](PipelineConfig& c, const std::string& v) {
                     auto ids = parse_list(v);
                     for (const auto& id : ids) {
                       if (id != "ensemble_ae" && id != "size_zscore" && id != "broken_score") {
                         throw InvalidArgument(str_cat("unknown model '", id, "'"));
                       }
                     }
                     c.models = std::move(ids);
                   },
                   [](const PipelineConfig& c) { return join_list(c.models); }};
    f["ensemble.m_max"] = int_field(&PipelineConfig::ensemble_m_max, 1, 115);
    f["ensemble.learning_rate"] = real_field(&PipelineConfig::ensemble_learning_rate, 0.0, 10.0, true);
    f["ensemble.hidden_ratio"] = real_field(&PipelineConfig::ensemble_hidden_ratio, 0.0, 1.0, true);
    f["ensemble.calibration_fraction"] = real_field(&PipelineConfig::ensemble_calibration_fraction, 0.0, 1.0, true);
    f["ensemble.phi_multiplier"] = real_field(&PipelineConfig::ensemble_phi_multiplier, 0.0, 1e6, true);
    f["zscore.cut"] = real_field(&PipelineConfig::zscore_cut, 0.0, 1e6, true);
    f["distill.sample_fraction"] = real_field(&PipelineConfig::distill_sample_fraction, 0.0, 1.0, true);
    f["distill.iterations"] = int_field(&PipelineConfig::distill_iterations, 1, 100000);
    f["distill.holdout_fraction"] = real_field(&PipelineConfig::distill_holdout_fraction, 0.0, 0.9, true);
    f["distill.stability_top_k"] = int_field(&PipelineConfig::distill_stability_top_k, 1, 115);
    f["distill.prune_k"] = int_field(&PipelineConfig::distill_prune_k, 1, big);
    f["cart.max_depth"] = int_field(&PipelineConfig::cart_max_depth, 0, 100000);
    f["cart.min_leaf"] = int_field(&PipelineConfig::cart_min_leaf, 1, big);
    f["shap.budget"] = {[](PipelineConfig& c, const std::string& v) {
                          if (v == "exact") {
                            c.shap_budget = 0;
                            return;
                          }
                          const auto x = parse_int(v, "shap.budget");
                          if (x != 0 && x < 2) throw InvalidArgument("shap.budget must be >= 2 or 'exact'");
                          c.shap_budget = x;
                        },
                        [](const PipelineConfig& c) {
                          return c.shap_budget == 0 ? std::string("exact") : std::to_string(c.shap_budget);
                        }};
    f["shap.background"] = int_field(&PipelineConfig::shap_background, 1, big);
    f["shap.rows"] = int_field(&PipelineConfig::shap_rows, 1, big);
    f["shap.top_n"] = int_field(&PipelineConfig::shap_top_n, 1, 115);
    f["shap.target"] = text_field(&PipelineConfig::shap_target, {"score", "predict"});
    f["agree.m"] = int_field(&PipelineConfig::agree_m, 1, 1000);
    f["agree.min_rows"] = int_field(&PipelineConfig::agree_min_rows, 1, big);
    f["agree.rows"] = int_field(&PipelineConfig::agree_rows, 1, big);
    f["agree.tree"] = text_field(&PipelineConfig::agree_tree, {"pruned", "full"});
    f["tamper.bands"] = {[](PipelineConfig& c, const std::string& v) {
                           std::vector<Band> bands;
                           for (const auto& b : parse_list(v)) bands.push_back(parse_band(b));
                           if (bands.empty()) throw InvalidArgument("tamper.bands is empty");
                           c.tamper_bands = std::move(bands);
                         },
                         [](const PipelineConfig& c) {
                           std::vector<std::string> parts;
                           for (const auto& b : c.tamper_bands) parts.push_back(str_cat(b.lo, ":", b.hi));
                           return join_list(parts);
                         }};
    f["tamper.match"] = text_field(&PipelineConfig::tamper_match);
    f["bias.drop_threshold"] = real_field(&PipelineConfig::bias_drop_threshold, 0.0, 1.0);
    f["report.alphas"] = {[](PipelineConfig& c, const std::string& v) {
                            std::vector<double> alphas;
                            for (const auto& a : parse_list(v)) {
                              const double x = parse_double(a, "report.alphas");
                              if (!(x >= 0.0 && x <= 1.0)) throw InvalidArgument(str_cat("alpha ", a, " outside [0, 1]"));
                              alphas.push_back(x);
                            }
                            if (alphas.empty()) throw InvalidArgument("report.alphas is empty");
                            c.report_alphas = std::move(alphas);
                          },
                          [](const PipelineConfig& c) {
                            std::vector<std::string> parts;
                            for (double a : c.report_alphas) parts.push_back(format_double(a));
                            return join_list(parts);
                          }};
    return f;
  }();
  return fields;
}

}  // namespace detail

inline void PipelineConfig::set(const std::string& key, const std::string& value) {
  const auto& fields = detail::config_fields();
  const auto it = fields.find(key);
  if (it == fields.end()) throw InvalidArgument(str_cat("unknown config key '", key, "'"));
  try {
    it->second.set(*this, trim(value));
  } catch (const InvalidArgument& e) {
    throw InvalidArgument(str_cat(key, ": ", e.what()));
  } catch (const FormatError& e) {
    throw InvalidArgument(str_cat(key, ": ", e.what()));
  }
}

inline std::map<std::string, std::string> PipelineConfig::values() const {
  std::map<std::string, std::string> out;
  for (const auto& [key, field] : detail::config_fields()) out[key] = field.get(*this);
  return out;
}

inline nlohmann::json PipelineConfig::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : values()) j[k] = v;
  return j;
}

// One "key = value" per line; '#' starts a comment.
inline PipelineConfig PipelineConfig::parse(std::istream& in, const std::string& origin) {
  PipelineConfig cfg;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(str_cat(origin, ":", lineno, ": expected key = value"));
    try {
      cfg.set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const InvalidArgument& e) {
      throw InvalidArgument(str_cat(origin, ":", lineno, ": ", e.what()));
    }
  }
  return cfg;
}

inline PipelineConfig PipelineConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(str_cat("cannot open config ", path.string()));
  return parse(in, path.string());
}

}  // namespace nids_xray
