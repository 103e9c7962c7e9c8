#pragma once

#include <openssl/evp.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "nids_xray/agreement.hpp"
#include "nids_xray/cart.hpp"
#include "nids_xray/config.hpp"
#include "nids_xray/dis.hpp"
#include "nids_xray/distill.hpp"
#include "nids_xray/kernel_shap.hpp"
#include "nids_xray/models.hpp"
#include "nids_xray/synthetic.hpp"
#include "nids_xray/tamper.hpp"
#include "nids_xray/trace_io.hpp"

namespace nids_xray {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr int kReportSchemaVersion = 1;

inline std::string sha256_hex(std::string_view data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1) throw Error("sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(str_cat("cannot open '", path.string(), "'"));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& path, std::string_view text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError(str_cat("cannot write '", path.string(), "'"));
}

inline std::string sha256_file(const fs::path& path) { return sha256_hex(read_file(path)); }

struct SelectionScore {
  double alpha_weight = 0.0;
  double f1 = 0.0;
  double fidelity = 0.0;
  double s = 0.0;
};

// Trades detection quality against explainability: a*F1 + (1-a)*fidelity.
inline SelectionScore selection_score(double f1, double fidelity, double alpha_weight) {
  if (!(alpha_weight >= 0.0 && alpha_weight <= 1.0)) {
    throw InvalidArgument(str_cat("selection weight ", alpha_weight, " outside [0, 1]"));
  }
  if (!(f1 >= 0.0 && f1 <= 1.0)) throw InvalidArgument(str_cat("F1 ", f1, " outside [0, 1]"));
  if (!(fidelity <= 1.0)) throw InvalidArgument(str_cat("fidelity ", fidelity, " above 1"));
  double s = alpha_weight * f1 + (1.0 - alpha_weight) * fidelity;
  if (alpha_weight == 1.0) s = f1;
  if (alpha_weight == 0.0) s = fidelity;
  return {alpha_weight, f1, fidelity, s};
}

// Runs named stages at most once per distinct input: a stamp records the
// hash of the stage parameters and input files together with the hashes of
// what the stage wrote.
class StageRunner {
 public:
  explicit StageRunner(fs::path root) : root_(std::move(root)) { fs::create_directories(root_ / ".stamps"); }

  const fs::path& root() const { return root_; }
  fs::path path(const std::string& rel) const { return root_ / rel; }
  const std::vector<std::string>& executed() const { return executed_; }
  const std::vector<std::string>& skipped() const { return skipped_; }

  bool run(const std::string& name, const json& params, const std::vector<fs::path>& inputs,
           const std::vector<std::string>& outputs, const std::function<void()>& body) {
    json key_src{{"stage", name}, {"params", params}, {"inputs", json::array()}};
    for (const auto& p : inputs) key_src["inputs"].push_back(hash_of(p));
    const std::string key = sha256_hex(key_src.dump());
    std::string stamp_name = name;
    std::replace(stamp_name.begin(), stamp_name.end(), '/', '_');
    const fs::path stamp = root_ / ".stamps" / (stamp_name + ".json");
    if (fs::exists(stamp) && up_to_date(stamp, key, outputs)) {
      skipped_.push_back(name);
      return false;
    }
    fs::remove(stamp);
    for (const auto& o : outputs) {
      fs::create_directories(path(o).parent_path());
      hashes_.erase(path(o).string());
    }
    body();
    json s{{"key", key}, {"outputs", json::object()}};
    for (const auto& o : outputs) {
      if (!fs::exists(path(o))) throw Error(str_cat("stage ", name, " did not write ", o));
      s["outputs"][o] = hash_of(path(o));
    }
    write_file(stamp, s.dump(1));
    executed_.push_back(name);
    return true;
  }

  std::string hash_of(const fs::path& p) {
    const auto it = hashes_.find(p.string());
    if (it != hashes_.end()) return it->second;
    return hashes_[p.string()] = sha256_file(p);
  }

 private:
  bool up_to_date(const fs::path& stamp, const std::string& key, const std::vector<std::string>& outputs) {
    json s;
    try {
      s = json::parse(read_file(stamp));
    } catch (const json::exception&) {
      return false;
    }
    if (s.value("key", "") != key) return false;
    for (const auto& o : outputs) {
      if (!fs::exists(path(o)) || !s["outputs"].contains(o) || s["outputs"][o] != hash_of(path(o))) return false;
    }
    return true;
  }

  fs::path root_;
  std::map<std::string, std::string> hashes_;
  std::vector<std::string> executed_, skipped_;
};

// Background for SHAP: seeded uniform sample of the benign training rows.
inline FeatureMatrix select_background(const FeatureMatrix& train, std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> benign;
  for (std::size_t i = 0; i < train.rows(); ++i) {
    if (train.labels.empty() || train.labels[i] == 0) benign.push_back(i);
  }
  if (benign.empty()) throw InvalidArgument("background: training slice holds no benign rows");
  Rng rng(seed);
  auto pick = rng.sample_without_replacement(benign.size(), std::min(n, benign.size()));
  std::sort(pick.begin(), pick.end());
  std::vector<std::size_t> rows;
  for (std::size_t p : pick) rows.push_back(benign[p]);
  return train.select_rows(rows);
}

inline json metrics_to_json(const DetectionMetrics& m) {
  return {{"precision", m.precision},
          {"recall", m.recall},
          {"f1", m.f1},
          {"accuracy", m.accuracy},
          {"auc", m.auc ? json(*m.auc) : json()},
          {"tp", m.counts.tp},
          {"fp", m.counts.fp},
          {"tn", m.counts.tn},
          {"fn", m.counts.fn}};
}

inline json trust_to_json(const TrustReport& r, const std::vector<std::string>& names) {
  json top = json::array();
  for (const auto& [f, imp] : r.top_features) top.push_back({{"feature", names.at(f)}, {"importance", imp}});
  return {{"teacher", r.teacher_id},
          {"sample_fraction", r.sample_fraction},
          {"iterations", r.iterations},
          {"best_iteration", r.best_iteration},
          {"fidelities", r.fidelities},
          {"fidelity_mean", r.fidelity_mean},
          {"fidelity_std", r.fidelity_std},
          {"stability", r.stability},
          {"top_features", top}};
}

inline json shape_json(const SurrogateTree& t) {
  return {{"size", t.size()}, {"depth", t.depth()}, {"leaves", t.leaf_count()}};
}

struct PipelineResult {
  json report;
  std::string text;
  int exit_code = 0;
  std::vector<std::string> executed;
  std::vector<std::string> skipped;
};

inline std::string render_report(const json& report);

namespace detail {

inline std::vector<std::string> names_of(const std::vector<std::size_t>& idx, const std::vector<std::string>& names) {
  std::vector<std::string> out;
  for (std::size_t i : idx) out.push_back(names.at(i));
  return out;
}

inline json read_json(const fs::path& p) { return json::parse(read_file(p)); }

inline std::string band_name(const Band& b) { return str_cat("band_", b.lo, "_", b.hi); }

}  // namespace detail

// ingest -> extract -> per model: train, score, distill, shap, agree, bias
// -> report. Stage failures inside a model are recorded and leave n/a
// cells; anything else is fatal and propagates.
inline PipelineResult run_pipeline(const PipelineConfig& cfg, const fs::path& out_dir) {
  StageRunner runner(out_dir);
  const json cfg_json = cfg.to_json();
  auto pick = [&](std::initializer_list<const char*> keys) {
    json j = json::object();
    for (const char* k : keys) j[k] = cfg_json.at(k);
    return j;
  };

  // ingest
  std::vector<fs::path> ingest_inputs;
  if (!cfg.input_trace.empty()) ingest_inputs.push_back(cfg.input_trace);
  runner.run("ingest",
             pick({"input.trace", "input.format", "input.labels", "synthetic.duration", "synthetic.benign_pps",
                   "synthetic.attack_start", "synthetic.attack_pps", "synthetic.attack_packets", "seed"}),
             ingest_inputs, {"trace.csv"}, [&] {
               std::vector<PacketRecord> records;
               if (cfg.input_trace.empty()) {
                 SyntheticParams sp;
                 sp.duration_s = cfg.synthetic_duration;
                 sp.benign_pps = cfg.synthetic_benign_pps;
                 sp.attack_start_s = cfg.synthetic_attack_start;
                 sp.attack_pps = cfg.synthetic_attack_pps;
                 sp.attack_packets = static_cast<std::size_t>(cfg.synthetic_attack_packets);
                 sp.seed = cfg.seed;
                 records = synthetic_trace(sp);
               } else {
                 const TraceFormat fmt = cfg.input_format == "pcap"  ? TraceFormat::pcap
                                         : cfg.input_format == "csv" ? TraceFormat::csv
                                                                     : TraceFormat::auto_detect;
                 records = read_trace(cfg.input_trace, fmt, LabelSpec::parse(cfg.input_labels)).records;
               }
               write_trace(records, runner.path("trace.csv"), TraceFormat::csv);
             });
  const fs::path trace_path = runner.path("trace.csv");

  runner.run("extract", json::object(), {trace_path}, {"features.bin", "features.bin.hdr"}, [&] {
    const auto trace = read_trace(trace_path, TraceFormat::csv, LabelSpec::parse("column"));
    write_feature_binary(extract_features(trace.records), runner.path("features.bin"));
  });
  const fs::path features_path = runner.path("features.bin");
  const FeatureMatrix fm = read_feature_binary(features_path);
  const auto train_rows = static_cast<std::size_t>(cfg.train_rows);
  if (train_rows >= fm.rows()) {
    throw InvalidArgument(str_cat("train.rows = ", train_rows, " leaves no evaluation rows in ", fm.rows()));
  }
  const FeatureMatrix train = fm.slice(0, train_rows);
  const FeatureMatrix eval = fm.slice(train_rows, fm.rows());

  runner.run("background", pick({"shap.background", "train.rows", "seed"}), {features_path},
             {"background.bin", "background.bin.hdr"}, [&] {
               write_feature_binary(
                   select_background(train, static_cast<std::size_t>(cfg.shap_background), Rng(cfg.seed).fork(11).next_u64()),
                   runner.path("background.bin"));
             });
  const fs::path background_path = runner.path("background.bin");

  std::vector<std::string> tamper_outputs;
  for (const auto& b : cfg.tamper_bands) tamper_outputs.push_back("traces/" + detail::band_name(b) + ".csv");
  std::string tamper_error;
  try {
    runner.run("tamper", pick({"tamper.bands", "tamper.match", "seed"}), {trace_path}, tamper_outputs, [&] {
      const auto trace = read_trace(trace_path, TraceFormat::csv, LabelSpec::parse("column"));
      for (std::size_t i = 0; i < cfg.tamper_bands.size(); ++i) {
        TamperSpec spec;
        spec.lo = cfg.tamper_bands[i].lo;
        spec.hi = cfg.tamper_bands[i].hi;
        spec.match = PacketPredicate::parse(cfg.tamper_match);
        spec.seed = Rng(cfg.seed).fork(100 + i).next_u64();
        write_trace(tamper(trace.records, spec).records, runner.path(tamper_outputs[i]), TraceFormat::csv);
      }
    });
  } catch (const std::exception& e) {
    tamper_error = e.what();
  }

  json model_rows = json::array();
  for (const auto& id : cfg.models) {
    const std::string dir = "models/" + id + "/";
    std::map<std::string, std::string> failures;
    auto stage = [&](const std::string& name, std::initializer_list<const char*> deps, const json& params,
                     const std::vector<fs::path>& inputs, const std::vector<std::string>& outputs,
                     const std::function<void()>& body) {
      for (const char* d : deps) {
        if (failures.contains(d)) {
          failures[name] = str_cat("not run: ", d, " failed");
          return;
        }
      }
      try {
        runner.run(dir + name, params, inputs, outputs, body);
      } catch (const std::exception& e) {
        failures[name] = e.what();
      }
    };
    const json model_params = pick({"train.rows", "seed", "ensemble.m_max", "ensemble.learning_rate",
                                    "ensemble.hidden_ratio", "ensemble.calibration_fraction",
                                    "ensemble.phi_multiplier", "zscore.cut"});
    const fs::path model_path = runner.path(dir + "model.bin");
    std::unique_ptr<ModelAdapter> model;
    auto loaded = [&]() -> const ModelAdapter& {
      if (!model) model = load_model(model_path);
      return *model;
    };

    stage("train", {}, json{{"model", id}, {"params", model_params}}, {features_path}, {dir + "model.bin"}, [&] {
      save_model(*train_model(id, train, cfg), model_path);
    });

    stage("score", {"train"}, json::object(), {model_path, features_path}, {dir + "scores.csv", dir + "metrics.json"},
          [&] {
            const auto& m = loaded();
            const auto pred = m.predict(eval);
            std::vector<double> scores;
            std::string score_error;
            try {
              scores = m.score(eval);
            } catch (const std::exception& e) {
              score_error = e.what();
            }
            std::ostringstream csv;
            csv << "row,score,predicted,label\n";
            for (std::size_t i = 0; i < eval.rows(); ++i) {
              csv << train_rows + i << ',' << (scores.empty() ? "n/a" : format_double(scores[i])) << ',' << pred[i]
                  << ',' << eval.labels[i] << '\n';
            }
            write_file(runner.path(dir + "scores.csv"), csv.str());
            json mj = metrics_to_json(evaluate(eval.labels, pred, scores));
            mj["threshold"] = m.threshold();
            mj["score_error"] = score_error.empty() ? json() : json(score_error);
            write_file(runner.path(dir + "metrics.json"), mj.dump(1));
          });

    stage("distill", {"train"},
          pick({"distill.sample_fraction", "distill.iterations", "distill.holdout_fraction", "distill.stability_top_k",
                "distill.prune_k", "cart.max_depth", "cart.min_leaf", "seed"}),
          {model_path, features_path}, {dir + "trust.json", dir + "tree.dot"}, [&] {
            const auto& m = loaded();
            DistillParams dp;
            dp.sample_fraction = cfg.distill_sample_fraction;
            dp.iterations = static_cast<std::size_t>(cfg.distill_iterations);
            dp.holdout_fraction = cfg.distill_holdout_fraction;
            dp.stability_top_k = static_cast<std::size_t>(cfg.distill_stability_top_k);
            dp.cart.max_depth = static_cast<std::size_t>(cfg.cart_max_depth);
            dp.cart.min_leaf = static_cast<std::size_t>(cfg.cart_min_leaf);
            dp.seed = Rng(cfg.seed).fork(21).next_u64();
            const auto res = distill(m, eval, dp);
            SurrogateTree pruned = top_k_prune(res.best, static_cast<std::size_t>(cfg.distill_prune_k));
            const Matrix hold = eval.values.select_rows(res.report.best_holdout);
            const auto teacher = m.predict(hold);
            pruned.fidelity = r_squared(std::vector<double>(teacher.begin(), teacher.end()), pruned.predict(hold));
            json j{{"report", trust_to_json(res.report, eval.names)},
                   {"fidelity", res.best.fidelity},
                   {"fidelity_pruned", pruned.fidelity},
                   {"prune_k", cfg.distill_prune_k},
                   {"tree", tree_to_json(res.best)},
                   {"pruned", tree_to_json(pruned)}};
            write_file(runner.path(dir + "trust.json"), j.dump(1));
            std::ostringstream dot;
            write_dot(dot, res.best, 3);
            write_file(runner.path(dir + "tree.dot"), dot.str());
          });

    ShapParams sp;
    sp.budget = cfg.shap_budget == 0 ? std::nullopt : std::optional<std::size_t>(cfg.shap_budget);
    sp.seed = Rng(cfg.seed).fork(31).next_u64();
    auto batch_model = [&]() -> BatchModel {
      return cfg.shap_target == "predict" ? label_function(loaded()) : score_function(loaded());
    };
    stage("shap", {"train"}, pick({"shap.budget", "shap.rows", "shap.top_n", "shap.target", "seed"}),
          {model_path, features_path, background_path}, {dir + "shap.json", dir + "shap_values.csv"}, [&] {
            const FeatureMatrix bg = read_feature_binary(background_path);
            Rng rng = Rng(cfg.seed).fork(32);
            auto rows = rng.sample_without_replacement(eval.rows(), std::min<std::size_t>(eval.rows(), cfg.shap_rows));
            std::sort(rows.begin(), rows.end());
            const Matrix x = eval.values.select_rows(rows);
            const auto res = explain(batch_model(), x, bg.values, sp, eval.names);
            const auto sum = summarize(res, x, static_cast<std::size_t>(cfg.shap_top_n));
            json ranking = json::array();
            for (std::size_t f : sum.ranking) ranking.push_back({{"feature", eval.names[f]}, {"mean_abs", sum.mean_abs[f]}});
            json force = json::array();
            for (const auto& fr : sum.force) {
              json c = json::array();
              for (std::size_t k = 0; k < std::min<std::size_t>(fr.contributions.size(), cfg.shap_top_n); ++k) {
                c.push_back({{"feature", eval.names[fr.contributions[k].first]}, {"phi", fr.contributions[k].second}});
              }
              force.push_back({{"row", train_rows + rows[fr.row]}, {"output", fr.output}, {"top", c}});
            }
            json j{{"base_value", res.base_value},  {"background_size", res.background_size},
                   {"coalitions", res.coalitions},  {"singular", res.singular},
                   {"ranking", ranking},            {"force", force}};
            write_file(runner.path(dir + "shap.json"), j.dump(1));
            std::ostringstream csv;
            csv << "row,feature,phi,feature_value\n";
            for (const auto& b : sum.beeswarm) {
              csv << train_rows + rows[b.row] << ',' << eval.names[b.feature] << ',' << format_double(b.phi) << ','
                  << format_double(b.value) << '\n';
            }
            write_file(runner.path(dir + "shap_values.csv"), csv.str());
          });

    stage("agree", {"train", "distill"},
          pick({"shap.budget", "shap.top_n", "shap.target", "agree.m", "agree.min_rows", "agree.rows", "agree.tree",
                "seed"}),
          {model_path, features_path, background_path, runner.path(dir + "trust.json")},
          {dir + "agreement.json", dir + "agreement.csv"}, [&] {
            const FeatureMatrix bg = read_feature_binary(background_path);
            const json trust = detail::read_json(runner.path(dir + "trust.json"));
            const SurrogateTree tree = tree_from_json(trust.at(cfg.agree_tree == "pruned" ? "pruned" : "tree"));
            AgreementParams ap;
            ap.m = static_cast<std::size_t>(cfg.agree_m);
            ap.top_n = static_cast<std::size_t>(cfg.shap_top_n);
            ap.min_rows = static_cast<std::size_t>(cfg.agree_min_rows);
            ap.rows_per_subset = static_cast<std::size_t>(cfg.agree_rows);
            ap.shap = sp;
            ap.seed = Rng(cfg.seed).fork(41).next_u64();
            const auto avg = agreement_average(batch_model(), tree, eval, bg.values, ap);
            json subsets = json::array();
            for (const auto& r : avg.subsets) {
              subsets.push_back({{"leaf_node", r.leaf_node},
                                 {"rows", r.coverage},
                                 {"explained", r.explained_rows.size()},
                                 {"T", detail::names_of(r.t, eval.names)},
                                 {"S", detail::names_of(r.s, eval.names)},
                                 {"alpha", r.alpha ? json(*r.alpha) : json()}});
            }
            json j{{"A", avg.a ? json(*avg.a) : json()},
                   {"m", avg.m},
                   {"alphas", avg.alphas},
                   {"shortfall", avg.shortfall},
                   {"warnings", avg.warnings},
                   {"subsets", subsets}};
            write_file(runner.path(dir + "agreement.json"), j.dump(1));
            std::ostringstream csv;
            write_agreement_csv(csv, avg, eval.names);
            write_file(runner.path(dir + "agreement.csv"), csv.str());
          });

    if (!tamper_error.empty()) failures["tamper"] = tamper_error;
    std::vector<fs::path> bias_inputs{trace_path};
    for (const auto& o : tamper_outputs) bias_inputs.push_back(runner.path(o));
    json bias_params = model_params;
    bias_params["model"] = id;
    bias_params["tamper"] = pick({"tamper.bands", "tamper.match", "bias.drop_threshold"});
    stage("bias", {"train", "tamper"}, bias_params, bias_inputs, {dir + "bias.json", dir + "bias_pairs.csv"}, [&] {
      std::vector<NamedTrace> traces{
          {"original", read_trace(trace_path, TraceFormat::csv, LabelSpec::parse("column")).records, std::nullopt}};
      for (std::size_t i = 0; i < cfg.tamper_bands.size(); ++i) {
        const auto& b = cfg.tamper_bands[i];
        traces.push_back({detail::band_name(b),
                          read_trace(runner.path(tamper_outputs[i]), TraceFormat::csv, LabelSpec::parse("column")).records,
                          std::pair{b.lo, b.hi}});
      }
      BiasParams bp;
      bp.train_rows = train_rows;
      bp.attack = PacketPredicate::parse(cfg.tamper_match);
      bp.drop_threshold = cfg.bias_drop_threshold;
      const Trainer trainer = [&](const FeatureMatrix& x) { return train_model(id, x, cfg); };
      const auto rep = bias_experiment(trainer, traces, bp);
      json means = json::object(), below = json::object();
      for (const auto& t : rep.traces) {
        means[t.name] = t.mean_attack_score;
        below[t.name] = t.fraction_below_threshold;
      }
      json j{{"verdict", rep.verdict},
             {"vulnerable", rep.vulnerable},
             {"monotone", rep.monotone},
             {"mean_attack_score", means},
             {"fraction_below_threshold", below}};
      write_file(runner.path(dir + "bias.json"), j.dump(1));
      std::ostringstream csv;
      write_bias_pairs_csv(csv, rep);
      write_file(runner.path(dir + "bias_pairs.csv"), csv.str());
    });

    // Assemble this model's row from whatever artifacts exist.
    json row{{"id", id}};
    auto artifact = [&](const std::string& name) -> std::optional<json> {
      const fs::path p = runner.path(dir + name + ".json");
      if (!fs::exists(p)) return std::nullopt;
      return detail::read_json(p);
    };
    const auto metrics = failures.contains("score") ? std::nullopt : artifact("metrics");
    const auto trust = failures.contains("distill") ? std::nullopt : artifact("trust");
    const auto shap = failures.contains("shap") ? std::nullopt : artifact("shap");
    const auto agree = failures.contains("agree") ? std::nullopt : artifact("agreement");
    const auto bias = failures.contains("bias") ? std::nullopt : artifact("bias");
    if (metrics && !metrics->at("score_error").is_null()) failures["score"] = metrics->at("score_error");
    row["threshold"] = metrics ? metrics->at("threshold") : json();
    row["metrics"] = json::object();
    for (const char* k : {"precision", "recall", "f1", "accuracy", "auc"}) row["metrics"][k] = metrics ? metrics->at(k) : json();
    row["fidelity"] = trust ? trust->at("fidelity") : json();
    row["fidelity_pruned"] = trust ? trust->at("fidelity_pruned") : json();
    row["prune_k"] = cfg.distill_prune_k;
    row["fidelity_mean"] = trust ? trust->at("report").at("fidelity_mean") : json();
    row["stability"] = trust ? trust->at("report").at("stability") : json();
    row["tree"] = trust ? json{{"size", trust->at("tree").at("size")}, {"depth", trust->at("tree").at("depth")},
                               {"leaves", trust->at("tree").at("leaves")}}
                        : json();
    row["tree_pruned"] = trust ? json{{"size", trust->at("pruned").at("size")},
                                      {"depth", trust->at("pruned").at("depth")},
                                      {"leaves", trust->at("pruned").at("leaves")}}
                               : json();
    row["top_features"] = json::array();
    if (trust) {
      for (const auto& f : trust->at("report").at("top_features")) row["top_features"].push_back(f.at("feature"));
    }
    row["shap_top"] = json::array();
    if (shap) {
      const auto& rk = shap->at("ranking");
      for (std::size_t k = 0; k < std::min<std::size_t>(rk.size(), cfg.shap_top_n); ++k) {
        row["shap_top"].push_back(rk[k].at("feature"));
      }
    }
    row["agreement"] = agree ? json{{"A", agree->at("A")}, {"m", agree->at("m")}, {"alphas", agree->at("alphas")},
                                    {"shortfall", agree->at("shortfall")}}
                             : json{{"A", json()}};
    row["bias"] = bias ? json{{"verdict", bias->at("verdict")}, {"monotone", bias->at("monotone")},
                              {"mean_attack_score", bias->at("mean_attack_score")}}
                       : json{{"verdict", json()}};
    row["selection"] = json::array();
    for (double a : cfg.report_alphas) {
      const json& f1 = row["metrics"]["f1"];
      const json& fid = row["fidelity"];
      row["selection"].push_back(
          {{"alpha", a},
           {"s", f1.is_null() || fid.is_null() ? json() : json(selection_score(f1.get<double>(), fid.get<double>(), a).s)}});
    }
    row["failures"] = json::object();
    for (const auto& [k, v] : failures) row["failures"][k] = v;
    model_rows.push_back(row);
  }

  // Sort by the selection score at the middle weight, n/a last.
  const std::size_t mid = cfg.report_alphas.size() / 2;
  std::stable_sort(model_rows.begin(), model_rows.end(), [&](const json& a, const json& b) {
    const json& sa = a["selection"][mid]["s"];
    const json& sb = b["selection"][mid]["s"];
    if (sa.is_null() != sb.is_null()) return sb.is_null();
    if (!sa.is_null() && sa.get<double>() != sb.get<double>()) return sa.get<double>() > sb.get<double>();
    return a["id"].get<std::string>() < b["id"].get<std::string>();
  });

  std::size_t na = 0;
  for (const auto& r : model_rows) {
    for (const json* cell : {&r["metrics"]["f1"], &r["metrics"]["auc"], &r["fidelity"], &r["fidelity_pruned"],
                             &r["agreement"]["A"], &r["bias"]["verdict"]}) {
      na += cell->is_null() ? 1 : 0;
    }
    for (const auto& s : r["selection"]) na += s["s"].is_null() ? 1 : 0;
  }

  std::size_t benign = 0, malicious = 0;
  for (int l : fm.labels) {
    benign += l == 0;
    malicious += l == 1;
  }
  json artifacts = json::object();
  for (const auto& entry : fs::recursive_directory_iterator(out_dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string rel = fs::relative(entry.path(), out_dir).generic_string();
    if (rel.rfind(".stamps/", 0) == 0 || rel.rfind("report.", 0) == 0) continue;
    artifacts[rel] = runner.hash_of(entry.path());
  }
  json report{{"schema_version", kReportSchemaVersion},
              {"tool", "nids-xray"},
              {"environment", {{"compiler", __VERSION__}, {"cplusplus", __cplusplus}}},
              {"config", cfg_json},
              {"trace",
               {{"rows", fm.rows()},
                {"benign", benign},
                {"malicious", malicious},
                {"train_rows", train_rows},
                {"eval_rows", eval.rows()}}},
              {"models", model_rows},
              {"na_cells", na},
              {"artifacts", artifacts}};

  PipelineResult result;
  result.text = render_report(report);
  std::vector<fs::path> report_inputs;
  for (const auto& [rel, h] : artifacts.items()) {
    (void)h;
    report_inputs.push_back(out_dir / rel);
  }
  runner.run("report", report, report_inputs, {"report.json", "report.txt"}, [&] {
    write_file(runner.path("report.json"), report.dump(1) + "\n");
    write_file(runner.path("report.txt"), result.text);
  });
  result.report = std::move(report);
  result.exit_code = na > 0 ? 2 : 0;
  result.executed = runner.executed();
  result.skipped = runner.skipped();
  return result;
}

namespace detail {

inline std::string sig3(const json& v) {
  if (v.is_null()) return "n/a";
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "yes" : "no";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v.get<double>());
  return buf;
}

inline std::string pad(const std::string& s, std::size_t w) { return s.size() >= w ? s + " " : s + std::string(w - s.size(), ' '); }

}  // namespace detail

// Human summary of a machine report; numbers to three significant digits.
inline std::string render_report(const json& report) {
  std::ostringstream os;
  os << "nids-xray comparative report (schema " << report.at("schema_version").get<int>() << ")\n";
  const auto& cfg = report.at("config");
  os << "seed " << cfg.at("seed").get<std::string>() << ", models " << cfg.at("models").get<std::string>() << '\n';
  if (report.contains("trace")) {
    const auto& t = report.at("trace");
    os << "trace: " << t.at("rows") << " packets (" << t.at("benign") << " benign, " << t.at("malicious")
       << " malicious), " << t.at("train_rows") << " training rows, " << t.at("eval_rows") << " evaluation rows\n";
  }
  os << '\n';
  const auto& models = report.at("models");
  std::vector<std::string> alpha_heads;
  if (!models.empty()) {
    for (const auto& s : models.front().at("selection")) alpha_heads.push_back("S@" + detail::sig3(s.at("alpha")));
  } else {
    for (const auto& a : split(cfg.at("report.alphas").get<std::string>(), ',')) alpha_heads.push_back("S@" + trim(a));
  }
  const std::vector<std::pair<std::string, std::size_t>> heads{
      {"model", 14}, {"F1", 7}, {"AUC", 7}, {"fidelity", 9}, {"pruned", 8}, {"size/depth/leaves", 18}, {"A", 6}, {"bias", 15}};
  for (const auto& [h, w] : heads) os << detail::pad(h, w);
  for (const auto& h : alpha_heads) os << detail::pad(h, 8);
  os << '\n';
  for (const auto& m : models) {
    const auto& tr = m.at("tree");
    const std::string shape = tr.is_null() ? "n/a"
                                           : str_cat(tr.at("size").get<std::size_t>(), "/", tr.at("depth").get<std::size_t>(),
                                                     "/", tr.at("leaves").get<std::size_t>());
    os << detail::pad(m.at("id").get<std::string>(), 14) << detail::pad(detail::sig3(m.at("metrics").at("f1")), 7)
       << detail::pad(detail::sig3(m.at("metrics").at("auc")), 7) << detail::pad(detail::sig3(m.at("fidelity")), 9)
       << detail::pad(detail::sig3(m.at("fidelity_pruned")), 8) << detail::pad(shape, 18)
       << detail::pad(detail::sig3(m.at("agreement").at("A")), 6)
       << detail::pad(detail::sig3(m.at("bias").at("verdict")), 15);
    for (const auto& s : m.at("selection")) os << detail::pad(detail::sig3(s.at("s")), 8);
    os << '\n';
  }
  for (const auto& m : models) {
    os << '\n' << m.at("id").get<std::string>() << ":\n";
    if (!m.at("top_features").empty()) {
      os << "  tree features:";
      for (const auto& f : m.at("top_features")) os << ' ' << f.get<std::string>();
      os << '\n';
    }
    if (!m.at("shap_top").empty()) {
      os << "  SHAP top features:";
      for (const auto& f : m.at("shap_top")) os << ' ' << f.get<std::string>();
      os << '\n';
    }
    for (const char* k : {"fidelity", "fidelity_pruned"}) {
      const auto& v = m.at(k);
      if (!v.is_null() && v.get<double>() < 0.0) {
        os << "  " << (std::string(k) == "fidelity" ? "full tree" : "pruned tree")
           << ": DT explanation fits predictions worse than the mean (fidelity " << detail::sig3(v) << ")\n";
      }
    }
    if (m.at("bias").contains("mean_attack_score")) {
      os << "  mean attack score:";
      for (const auto& [trace, v] : m.at("bias").at("mean_attack_score").items()) os << ' ' << trace << '=' << detail::sig3(v);
      os << '\n';
    }
    for (const auto& [stage, msg] : m.at("failures").items()) os << "  failed " << stage << ": " << msg.get<std::string>() << '\n';
  }
  return os.str();
}

}  // namespace nids_xray
