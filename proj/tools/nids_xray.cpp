// nids-xray: command line front end for the explainability pipeline.

#include <CLI11.hpp>

#include <iostream>

#include "nids_xray/nids_xray.hpp"

using namespace nids_xray;

namespace {

FeatureMatrix load_features(const std::string& path) {
  return path.ends_with(".bin") ? read_feature_binary(path) : read_feature_csv(path);
}

void save_features(const FeatureMatrix& fm, const std::string& path) {
  if (path.ends_with(".bin")) {
    write_feature_binary(fm, path);
  } else {
    write_feature_csv(fm, path);
  }
}

TraceFormat format_of(const std::string& s) {
  if (s == "pcap") return TraceFormat::pcap;
  if (s == "csv") return TraceFormat::csv;
  return TraceFormat::auto_detect;
}

std::pair<std::size_t, std::size_t> parse_range(const std::string& text, std::size_t rows) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw InvalidArgument(str_cat("row range '", text, "' is not begin:end"));
  const auto b = static_cast<std::size_t>(parse_int(text.substr(0, colon), "range begin"));
  const std::string e = text.substr(colon + 1);
  const std::size_t end = e.empty() ? rows : static_cast<std::size_t>(parse_int(e, "range end"));
  if (b >= end || end > rows) throw InvalidArgument(str_cat("row range ", text, " invalid for ", rows, " rows"));
  return {b, end};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"nids-xray: explainability and inductive-bias checks for network intrusion detectors"};
  app.require_subcommand(1);
  std::uint64_t seed = 1;
  std::string config_path, out_dir = "nids-xray-out";
  app.add_option("--seed", seed, "Seed for every random choice");
  app.add_option("--config", config_path, "Config file of dotted key = value lines");
  app.add_option("--out-dir", out_dir, "Directory for pipeline artifacts");

  auto* ingest = app.add_subcommand("ingest", "Read a pcap or csv trace and write normalized csv");
  std::string in, out, format = "auto", labels = "column";
  ingest->add_option("--in", in)->required();
  ingest->add_option("--out", out)->required();
  ingest->add_option("--format", format)->check(CLI::IsMember({"auto", "pcap", "csv"}));
  ingest->add_option("--labels", labels, "column | first-benign=N | match=pred;pred");

  auto* synth = app.add_subcommand("synth", "Write the synthetic benign + flood trace");
  synth->add_option("--out", out)->required();

  auto* extract = app.add_subcommand("extract", "Compute the 115 damped statistics per packet");
  extract->add_option("--in", in)->required();
  extract->add_option("--out", out, "Feature file (.csv or .bin)")->required();
  extract->add_option("--labels", labels);

  auto* train = app.add_subcommand("train", "Train a detector on a row range");
  std::string features, model_path, kind = "ensemble_ae", rows_range;
  train->add_option("--features", features)->required();
  train->add_option("--model", model_path)->required();
  train->add_option("--benign-rows", rows_range, "begin:end training rows")->required();
  train->add_option("--kind", kind)->check(CLI::IsMember({"ensemble_ae", "size_zscore", "broken_score"}));

  auto* score = app.add_subcommand("score", "Score rows and report detection metrics");
  score->add_option("--model", model_path)->required();
  score->add_option("--features", features)->required();
  score->add_option("--out", out, "Per-row scores csv");

  auto* explain_dt = app.add_subcommand("explain-dt", "Distill the detector into a decision tree");
  double fraction = 0.3;
  std::size_t iterations = 50, topk = 10;
  explain_dt->add_option("--model", model_path)->required();
  explain_dt->add_option("--features", features)->required();
  explain_dt->add_option("--fraction", fraction);
  explain_dt->add_option("--iterations", iterations);
  explain_dt->add_option("--topk", topk);
  explain_dt->add_option("--out", out, "Tree json (the pruned tree goes to <out>.pruned.json)")->required();

  auto* explain_shap = app.add_subcommand("explain-shap", "Kernel SHAP attributions");
  std::string rows_path, background_path, target = "score";
  std::string budget = "2048";
  std::size_t topn = 10;
  explain_shap->add_option("--model", model_path)->required();
  explain_shap->add_option("--rows", rows_path)->required();
  explain_shap->add_option("--background", background_path)->required();
  explain_shap->add_option("--budget", budget, "coalitions per row, or 'exact'");
  explain_shap->add_option("--target", target)->check(CLI::IsMember({"score", "predict"}));
  explain_shap->add_option("--topn", topn);
  explain_shap->add_option("--out", out, "Values csv (row, feature, phi, feature_value)");

  auto* agree = app.add_subcommand("agree", "Tree-path vs SHAP agreement score");
  std::string tree_path;
  std::size_t m = 3, min_rows = 300, subset_rows = 1000;
  agree->add_option("--model", model_path)->required();
  agree->add_option("--tree", tree_path)->required();
  agree->add_option("--features", features)->required();
  agree->add_option("--background", background_path)->required();
  agree->add_option("--m", m);
  agree->add_option("--topn", topn);
  agree->add_option("--min-rows", min_rows);
  agree->add_option("--rows", subset_rows);
  agree->add_option("--budget", budget);
  agree->add_option("--out", out, "Agreement csv");

  auto* tamper_cmd = app.add_subcommand("tamper", "Re-time attack packets into a rate band");
  std::string band = "10:50", match = "label=malicious";
  tamper_cmd->add_option("--in", in)->required();
  tamper_cmd->add_option("--out", out)->required();
  tamper_cmd->add_option("--band", band);
  tamper_cmd->add_option("--match", match);
  tamper_cmd->add_option("--labels", labels);
  std::string rates_out;
  tamper_cmd->add_option("--rates", rates_out, "Per-second rate csv of the output");

  auto* bias = app.add_subcommand("bias", "Compare detector scores across original and tampered traces");
  std::vector<std::string> trace_paths;
  std::size_t train_rows = 8000;
  double drop = 0.1;
  bias->add_option("--traces", trace_paths, "Original trace first, then tampered ones")->required();
  bias->add_option("--kind", kind)->check(CLI::IsMember({"ensemble_ae", "size_zscore", "broken_score"}));
  bias->add_option("--train-rows", train_rows);
  bias->add_option("--match", match);
  bias->add_option("--drop", drop);
  bias->add_option("--labels", labels);
  bias->add_option("--out", out, "Expected/predicted pairs csv");

  auto* report = app.add_subcommand("report", "Render a machine report as text");
  report->add_option("--in", in)->required();

  auto* run = app.add_subcommand("run", "Full pipeline; resumes from existing artifacts");
  std::vector<std::string> overrides;
  run->add_option("--set", overrides, "key=value overriding the config file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    PipelineConfig cfg = config_path.empty() ? PipelineConfig{} : PipelineConfig::load(config_path);
    if (app.count("--seed") || config_path.empty()) cfg.seed = seed;
    seed = cfg.seed;
    auto make_model_cfg = [&] {
      PipelineConfig c = cfg;
      c.seed = seed;
      return c;
    };

    if (*ingest) {
      const auto trace = read_trace(in, format_of(format), LabelSpec::parse(labels));
      const auto meta = write_trace(trace.records, out, TraceFormat::csv);
      std::cout << meta.packet_count << " packets, " << meta.benign_count << " benign, " << meta.malicious_count
                << " malicious, " << meta.unknown_count << " unlabelled, " << trace.meta.clamped_timestamps
                << " clamped timestamps\n";
    } else if (*synth) {
      SyntheticParams sp;
      sp.seed = seed;
      const auto meta = write_trace(synthetic_trace(sp), out, TraceFormat::csv);
      std::cout << meta.packet_count << " packets written to " << out << '\n';
    } else if (*extract) {
      const auto trace = read_trace(in, TraceFormat::auto_detect, LabelSpec::parse(labels));
      DisDiagnostics diag;
      const auto fm = extract_features(trace.records, &diag);
      save_features(fm, out);
      std::cout << fm.rows() << " rows; " << diag.backwards_time << " backwards timestamps, " << diag.evicted_keys
                << " evicted keys\n";
    } else if (*train) {
      const auto fm = load_features(features);
      const auto [b, e] = parse_range(rows_range, fm.rows());
      const auto model = train_model(kind, fm.slice(b, e), make_model_cfg());
      save_model(*model, model_path);
      std::cout << model->id() << " trained on rows " << b << ":" << e << ", threshold "
                << format_double(model->threshold()) << '\n';
    } else if (*score) {
      const auto model = load_model(model_path);
      const auto fm = load_features(features);
      const auto pred = model->predict(fm);
      std::vector<double> s;
      try {
        s = model->score(fm);
      } catch (const std::exception& e) {
        std::cerr << "warning: " << e.what() << '\n';
      }
      if (!out.empty()) {
        std::ofstream os(out);
        os << "row,score,predicted,label\n";
        for (std::size_t i = 0; i < fm.rows(); ++i) {
          os << i << ',' << (s.empty() ? "n/a" : format_double(s[i])) << ',' << pred[i] << ',' << fm.labels[i] << '\n';
        }
      }
      const auto met = evaluate(fm.labels, pred, s);
      std::cout << "precision " << format_double(met.precision) << "\nrecall " << format_double(met.recall) << "\nf1 "
                << format_double(met.f1) << "\naccuracy " << format_double(met.accuracy) << "\nauc "
                << (met.auc ? format_double(*met.auc) : "n/a") << '\n';
    } else if (*explain_dt) {
      const auto model = load_model(model_path);
      const auto fm = load_features(features);
      DistillParams dp;
      dp.sample_fraction = fraction;
      dp.iterations = iterations;
      dp.seed = seed;
      const auto res = distill(*model, fm, dp);
      auto pruned = top_k_prune(res.best, topk);
      const Matrix hold = fm.values.select_rows(res.report.best_holdout);
      const auto teacher = model->predict(hold);
      pruned.fidelity = r_squared(std::vector<double>(teacher.begin(), teacher.end()), pruned.predict(hold));
      write_file(out, tree_to_json(res.best).dump(1));
      write_file(out + ".pruned.json", tree_to_json(pruned).dump(1));
      std::ofstream dot(out + ".dot");
      write_dot(dot, res.best, 3);
      std::cout << trust_to_json(res.report, fm.names).dump(1) << "\nfidelity " << format_double(res.best.fidelity)
                << ", pruned (k=" << topk << ") " << format_double(pruned.fidelity) << '\n';
      if (res.best.fidelity < 0) std::cout << "DT explanation fits predictions worse than the mean\n";
    } else if (*explain_shap) {
      const auto model = load_model(model_path);
      const auto rows = load_features(rows_path);
      const auto bg = load_features(background_path);
      ShapParams sp;
      sp.budget = budget == "exact" ? std::nullopt : std::optional<std::size_t>(parse_int(budget, "budget"));
      sp.seed = seed;
      const BatchModel f = target == "predict" ? label_function(*model) : score_function(*model);
      const auto res = explain(f, rows.values, bg.values, sp, rows.names);
      const auto sum = summarize(res, rows.values, topn);
      std::cout << "base value " << format_double(res.base_value) << (res.singular ? " (rank-deficient solve)" : "")
                << "\n";
      for (std::size_t k = 0; k < std::min(topn, sum.ranking.size()); ++k) {
        std::cout << k + 1 << ". " << rows.names[sum.ranking[k]] << ' ' << format_double(sum.mean_abs[sum.ranking[k]])
                  << '\n';
      }
      if (!out.empty()) {
        std::ofstream os(out);
        os << "row,feature,phi,feature_value\n";
        for (const auto& b : sum.beeswarm) {
          os << b.row << ',' << rows.names[b.feature] << ',' << format_double(b.phi) << ',' << format_double(b.value)
             << '\n';
        }
      }
    } else if (*agree) {
      const auto model = load_model(model_path);
      const auto fm = load_features(features);
      const auto bg = load_features(background_path);
      const auto tree = tree_from_json(nlohmann::json::parse(read_file(tree_path)));
      AgreementParams ap;
      ap.m = m;
      ap.top_n = topn;
      ap.min_rows = min_rows;
      ap.rows_per_subset = subset_rows;
      ap.shap.budget = budget == "exact" ? std::nullopt : std::optional<std::size_t>(parse_int(budget, "budget"));
      ap.shap.seed = seed;
      ap.seed = seed;
      const auto avg = agreement_average(score_function(*model), tree, fm, bg.values, ap);
      write_agreement_text(std::cout, avg, fm.names);
      if (!out.empty()) {
        std::ofstream os(out);
        write_agreement_csv(os, avg, fm.names);
      }
    } else if (*tamper_cmd) {
      const auto trace = read_trace(in, TraceFormat::auto_detect, LabelSpec::parse(labels));
      const Band b = detail::parse_band(band);
      TamperSpec spec;
      spec.lo = b.lo;
      spec.hi = b.hi;
      spec.match = PacketPredicate::parse(match);
      spec.seed = seed;
      const auto res = tamper(trace.records, spec);
      write_trace(res.records, out, out.ends_with(".pcap") ? TraceFormat::pcap : TraceFormat::csv);
      std::cout << res.matched << " packets re-timed over " << res.buckets.size() << " seconds\n";
      if (!rates_out.empty()) {
        std::ofstream os(rates_out);
        write_rate_csv(os, rate_series(res.records));
      }
    } else if (*bias) {
      std::vector<NamedTrace> traces;
      for (std::size_t i = 0; i < trace_paths.size(); ++i) {
        traces.push_back({i == 0 ? "original" : trace_paths[i],
                          read_trace(trace_paths[i], TraceFormat::auto_detect, LabelSpec::parse(labels)).records,
                          std::nullopt});
      }
      BiasParams bp;
      bp.train_rows = train_rows;
      bp.attack = PacketPredicate::parse(match);
      bp.drop_threshold = drop;
      const PipelineConfig mc = make_model_cfg();
      const auto rep = bias_experiment([&](const FeatureMatrix& x) { return train_model(kind, x, mc); }, traces, bp);
      write_bias_summary(std::cout, rep);
      if (!out.empty()) {
        std::ofstream os(out);
        write_bias_pairs_csv(os, rep);
      }
    } else if (*report) {
      std::cout << render_report(nlohmann::json::parse(read_file(in)));
    } else if (*run) {
      for (const auto& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw InvalidArgument(str_cat("--set expects key=value, got '", kv, "'"));
        cfg.set(trim(kv.substr(0, eq)), kv.substr(eq + 1));
      }
      const auto res = run_pipeline(cfg, out_dir);
      std::cout << res.text;
      std::cerr << res.executed.size() << " stages run, " << res.skipped.size() << " reused\n";
      return res.exit_code;
    }
  } catch (const std::exception& e) {
    std::cerr << "nids-xray: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
